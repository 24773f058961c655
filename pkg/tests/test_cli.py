import json
import os

import numpy as np
import pandas as pd
import pytest

import database
from cli import main
from conftest import UCSD_PATH, chain_network, quadratic_bundle
from controller import load_bundle
from data_exporter import ResultsExporter
from grid import PowerScenario
from sim import SimConfig, run_day, run_episode
from summary import cost_table, noise_table

TOY_NET = """# four-bus feeder
name = toy
base_kv = 12.47
base_mva = 10
controllable = [2, 4]

0 1 0.155 0.311
1 2 0.155 0.311
2 3 0.155 0.311
3 4 0.155 0.311
"""


@pytest.fixture
def workspace(tmp_path):
    net_path = tmp_path / 'toy.net'
    net_path.write_text(TOY_NET)
    cfg_path = tmp_path / 'experiment.json'
    cfg_path.write_text(json.dumps({
        'network': str(net_path),
        'comm_setup': 'FC',
        'q_lim_mvar': [2.0, 2.0],
        'epsilon': 0.05,
        'dataset': {'augmentation_factor': 0},
        'training': {'epochs': 2, 'show_progress': False},
    }))
    return tmp_path


def _run(workspace, *argv):
    base = ['--config', str(workspace / 'experiment.json'), '--db', str(workspace / 'runs.db'), '--workers', '1']
    return main(base + list(argv))


class TestBuildNet:
    def test_ucsd_summary(self, tmp_path, capsys):
        rc = main(['--db', str(tmp_path / 'runs.db'), 'build-net', UCSD_PATH, '--json'])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary['buses'] == 49
        assert summary['controllable'] == 13
        assert summary['x_cc_norm'] > 0

    def test_cyclic_network_reports_json_error(self, tmp_path, capsys):
        path = tmp_path / 'cycle.net'
        path.write_text("0 1 0.1 0.2\n1 2 0.1 0.2\n2 0 0.1 0.2\n")
        rc = main(['--db', str(tmp_path / 'runs.db'), '--json-errors', 'build-net', str(path)])
        assert rc == 1
        payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert payload['error'] == 'NetworkFileError'
        assert payload['details']['line'] == 3

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(['no-such-command'])
        assert exc.value.code == 2


class TestPipeline:
    def test_end_to_end(self, workspace, capsys):
        profiles = str(workspace / 'scenarios.csv')
        labels = str(workspace / 'labels.csv')
        bundle_dir = str(workspace / 'bundle')
        exports = str(workspace / 'exports')

        assert _run(workspace, 'synth-profiles', '--days', '2', '--out', profiles) == 0
        assert _run(workspace, 'gen-data', '--profiles', profiles, '--out', labels) == 0
        assert len(pd.read_csv(labels, comment='#')) == 2 * 96
        assert _run(workspace, 'train', '--data', labels, '--out', bundle_dir) == 0
        assert os.path.exists(os.path.join(bundle_dir, 'history.csv'))

        assert _run(workspace, 'verify', '--bundle', bundle_dir, '--pairs', '500', '--samples', '500') in (0, 1)
        assert load_bundle(bundle_dir).certification is not None

        assert _run(workspace, 'simulate', '--bundle', bundle_dir, '--profiles', profiles,
                    '--steps', '5', '--export-dir', exports) == 0
        assert _run(workspace, 'simulate', '--bundle', bundle_dir, '--profiles', profiles,
                    '--steps', '5', '--noise', '0.01', '--no-opf', '--export-dir', exports) == 0
        runs = database.day_runs_frame()
        assert len(runs) == 2
        assert runs['day_index'].tolist() == [1, 1]
        assert runs['noise_dv'].tolist() == [0.0, 0.01]

        assert _run(workspace, 'report', '--export-dir', exports) == 0
        assert any(name.startswith('cost_table') for name in os.listdir(exports))
        trajectories = [n for n in os.listdir(exports) if n.startswith('voltage_trajectories')]
        assert len(trajectories) == 1
        assert set(pd.read_csv(os.path.join(exports, trajectories[0]))['noise_dv']) == {0.0, 0.01}
        assert 'FC' in capsys.readouterr().out

    def test_missing_limits_for_custom_network(self, workspace, capsys):
        cfg = json.loads((workspace / 'experiment.json').read_text())
        cfg['q_lim_mvar'] = None
        (workspace / 'experiment.json').write_text(json.dumps(cfg))
        profiles = str(workspace / 'scenarios.csv')
        assert _run(workspace, 'synth-profiles', '--days', '1', '--out', profiles) == 0
        assert _run(workspace, 'gen-data', '--profiles', profiles) == 1
        assert 'ControlPreconditionError' in capsys.readouterr().err


class TestRegistryAndExports:
    @pytest.fixture
    def report(self):
        net = chain_network(3)
        bundle = quadratic_bundle(net.controllable, weight=4.0, q_lim=0.5)
        bundle.comm_setup = 'NC'
        day = _chain_points(net)
        return run_day(net, bundle, day, SimConfig(steps_T=10))

    def test_record_and_read_back(self, tmp_path, report):
        database.init_db(str(tmp_path / 'runs.db'))
        database.record_day_run(report, day_index=3)
        df = database.day_runs_frame()
        assert df.loc[0, 'controller'] == 'NC'
        assert df.loc[0, 'Total Cost'] == pytest.approx(report.total('NC'))
        assert df.loc[0, 'OPF Total'] == pytest.approx(report.total('OPF'))
        voltages = database.day_run_voltages()
        assert set(voltages['series']) == {k for k, v in report.terminal_v.items() if np.asarray(v).size}
        assert len(voltages) == sum(np.asarray(v).size for v in report.terminal_v.values())
        assert voltages['day_index'].unique().tolist() == [3]
        database.wipe_all_data()
        assert database.day_runs_frame().empty

    def test_tables(self):
        df = pd.DataFrame({
            'controller': ['FC', 'FC', 'NC'],
            'noise_dq': [0.0, 0.0, 0.0],
            'noise_dv': [0.0, 0.01, 0.0],
            'Cost-Volt': [1.0, 2.0, 3.0],
            'Cost-Loss': [0.1, 0.1, 0.1],
            'Total Cost': [1.1, 2.1, 3.1],
            'NoCtrl Total': [10.0, 10.0, 10.0],
            'OPF Total': [1.0, 1.0, 1.0],
        })
        table = cost_table(df)
        assert list(table.index) == ['NC', 'FC']
        assert table.loc['FC', 'Improvement %'] == pytest.approx(89.0)
        sweep = noise_table(df)
        assert sweep.loc['FC', 0.01] == pytest.approx(2.1)

    def test_exports(self, tmp_path, report):
        exporter = ResultsExporter(str(tmp_path), timestamped=False)
        paths = exporter.export_day_report(report, 'nc')
        assert all(os.path.exists(p) for p in paths.values())
        trajectories = pd.read_csv(exporter.export_voltage_trajectories(report, 'nc'))
        assert set(trajectories['controller']) == {'NoCtrl', 'NC', 'OPF'}
        assert os.path.exists(exporter.plot_voltage_profiles([report], bus=3))

    def test_trace_and_history_exports(self, tmp_path):
        net = chain_network(2)
        bundle = quadratic_bundle(net.controllable, weight=2.0, q_lim=0.5)
        trace = run_episode(net, bundle, _chain_points(net, 1)[0], np.zeros(2), SimConfig(steps_T=4))
        exporter = ResultsExporter(str(tmp_path), timestamped=False)
        frame = pd.read_csv(exporter.export_trace(trace, [1, 2], tag='t'))
        assert len(frame) == 5 and 'q_bus2' in frame.columns
        history = pd.DataFrame({'epoch': [1, 2], 'train_loss': [0.5, 0.2], 'val_loss': [0.6, 0.3]})
        assert pd.read_csv(exporter.export_training_history(history, 'FC'))['val_loss'].tolist() == [0.6, 0.3]
        assert os.path.exists(exporter.plot_training_curves({'FC': history}))


def _chain_points(net, n_points=4):
    rng = np.random.default_rng(0)
    return [PowerScenario(-0.3 * rng.uniform(0.5, 1.0, net.n), np.zeros(0), label=f"p{k}") for k in range(n_points)]
