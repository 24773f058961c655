"""Command-line entry point: build-net, synth-profiles, gen-data, train, simulate, verify, report"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import config
import database
from comm_setups import SETUP_ORDER, UCSD_CONTROLLABLE, default_box, setup_partition
from controller import (
    CommGraph,
    Partition,
    ReactiveBox,
    build_bundle,
    load_bundle,
    save_bundle,
    validate_partition,
)
from data_exporter import ResultsExporter
from errors import ControlPreconditionError, VoltVarError
from grid import GridNetwork, load_network, sensitivity
from learn import (
    DatasetConfig,
    certifiable_train_config,
    evaluate,
    generate_dataset,
    load_dataset,
    save_dataset,
    train,
)
from profiles import load_scenarios, perturb_day, save_scenarios, synthesize_days
from sim import NoiseConfig, SimConfig, run_day, run_days
from verify import certify_bundle

logger = logging.getLogger(__name__)


def network_summary(net: GridNetwork) -> dict:
    mat = sensitivity(net)
    return {
        'name': net.name,
        'buses': net.bus_count,
        'lines': len(net.lines),
        'controllable': len(net.controllable),
        'x_cc_norm': mat.X_norm,
        'z_base': net.z_base,
    }


def _experiment(args) -> config.ExperimentConfig:
    exp = config.load_experiment(args.config) if args.config else config.ExperimentConfig()
    if getattr(args, 'net', None):
        exp.network = args.net
    if getattr(args, 'setup', None):
        exp.comm_setup = args.setup
    if getattr(args, 'epsilon', None) is not None:
        exp.epsilon = args.epsilon
    if args.seed is not None:
        exp.seed = args.seed
    return exp


def _box(net: GridNetwork, exp: config.ExperimentConfig) -> ReactiveBox:
    if exp.q_lim_mvar is not None:
        return ReactiveBox.from_mvar(exp.q_lim_mvar, net.base_mva)
    if tuple(net.controllable) == UCSD_CONTROLLABLE:
        return default_box(base_mva=net.base_mva)
    raise ControlPreconditionError("no reactive limits for this network; set q_lim_mvar in the experiment config")


def _partition(net: GridNetwork, exp: config.ExperimentConfig) -> Partition:
    ctrl = tuple(net.controllable)
    if ctrl == UCSD_CONTROLLABLE:
        return setup_partition(exp.comm_setup, ctrl, exp.partition)
    if exp.partition is not None:
        partition = Partition(tuple(tuple(s) for s in exp.partition))
        validate_partition(partition, CommGraph.from_cliques(ctrl, partition.subgraphs))
        return partition
    if exp.comm_setup == 'FC':
        return Partition((ctrl,))
    if exp.comm_setup == 'NC':
        return Partition(tuple((b,) for b in ctrl))
    raise ControlPreconditionError(
        f"setup {exp.comm_setup!r} is only defined for ucsd49; give an explicit partition"
    )


def cmd_build_net(args) -> int:
    net = load_network(args.path)
    summary = network_summary(net)
    print("\n" + "="*60)
    print(f"🔌 NETWORK {summary['name'] or args.path}")
    print("="*60)
    print(f"   • Buses: {summary['buses']} ({summary['lines']} lines)")
    print(f"   • Controllable: {summary['controllable']}")
    print(f"   • |X_cc|: {summary['x_cc_norm']:.6f} p.u.")
    print(f"   • Z_base: {summary['z_base']:.4f} ohm")
    if args.json:
        print(json.dumps(summary))
    return 0


def cmd_synth_profiles(args) -> int:
    exp = _experiment(args)
    net = load_network(exp.network)
    n_days = args.days if args.days is not None else exp.n_days
    df = synthesize_days(net, n_days, seed=exp.seed)
    save_scenarios(df, args.out)
    print(f"✅ Wrote {n_days} days ({len(df)} points) to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    exp = _experiment(args)
    net = load_network(exp.network)
    days = load_scenarios(args.profiles, net)
    params = {'seed': exp.seed, 'workers': args.workers, **exp.dataset}
    if args.noise is not None:
        params['augmentation_noise'] = args.noise
    if args.factor is not None:
        params['augmentation_factor'] = args.factor
    if args.nonlinear_passes is not None:
        params['nonlinear_passes'] = args.nonlinear_passes
    cfg = DatasetConfig(**params)
    data = generate_dataset(net, days, _box(net, exp), cfg=cfg)
    save_dataset(data, args.out, net.base_mva)
    print(f"✅ {len(data)} labeled samples written to {args.out}")
    if data.skipped:
        print(f"⚠️  Skipped {data.skipped} points where the OPF oracle did not converge")
    return 0


def cmd_train(args) -> int:
    exp = _experiment(args)
    net = load_network(exp.network)
    data = load_dataset(args.data)
    params = {'seed': exp.seed, **exp.training}
    if args.epochs is not None:
        params['epochs'] = args.epochs
    if args.lr is not None:
        params['learning_rate'] = args.lr
    if args.batch_size is not None:
        params['batch_size'] = args.batch_size
    cfg = certifiable_train_config(params, exp.epsilon, sensitivity(net).X_norm)

    bundle = build_bundle(_partition(net, exp), _box(net, exp), net.controllable,
                          epsilon=exp.epsilon, seed=exp.seed, comm_setup=exp.comm_setup)
    print(f"\n🧠 Training {exp.comm_setup} ({len(bundle.models)} subgraphs, {len(data)} samples)...")
    bundle, history = train(bundle, data, cfg)
    bundle.config_hash = exp.config_hash
    out = args.out or os.path.join(config.BUNDLE_DIR, exp.comm_setup)
    save_bundle(bundle, out)
    history.to_csv(os.path.join(out, 'history.csv'), index=False)
    val_mse, _ = evaluate(bundle, data, 'val' if len(data.val_idx) else 'train')
    database.record_bundle(bundle, out, val_mse)
    print(f"✅ Saved bundle to {out} (prediction MSE {val_mse:.3e})")
    return 0


def cmd_verify(args) -> int:
    exp = _experiment(args)
    net = load_network(exp.network)
    bundle = load_bundle(args.bundle)
    cert = certify_bundle(bundle, sensitivity(net), n_pairs=args.pairs, n_lipschitz=args.samples,
                          seed=exp.seed)
    save_bundle(bundle, args.bundle)
    database.record_bundle(bundle, args.bundle)
    if cert.ok:
        print(f"✅ Certified: eps={cert.epsilon:g} <= {cert.epsilon_bound:.4g} "
              f"(L={cert.lipschitz_analytic:.4g}, sampled {cert.lipschitz_sampled:.4g})")
        return 0
    print("❌ Certification refused:")
    for reason in cert.reasons:
        print(f"   • {reason}")
    return 1


def cmd_simulate(args) -> int:
    exp = _experiment(args)
    net = load_network(exp.network)
    bundle = load_bundle(args.bundle)
    days = load_scenarios(args.profiles, net)
    if args.perturb:
        days = [perturb_day(day, args.perturb, seed=exp.seed + d) for d, day in enumerate(days)]
    params = {'seed': exp.seed, 'workers': args.workers, **exp.simulation}
    params['noise'] = NoiseConfig(d_q=args.dq, d_v=args.noise)
    if args.pf_model:
        params['pf_model'] = args.pf_model
    if args.steps is not None:
        params['steps_T'] = args.steps
    if args.no_opf:
        params['include_opf'] = False
    cfg = SimConfig(**params)

    if args.all_days:
        reports = run_days(net, bundle, days, cfg)
        indices = list(range(len(days)))
    else:
        index = args.day if args.day >= 0 else len(days) + args.day
        reports = [run_day(net, bundle, days[index], cfg)]
        indices = [index]

    exporter = ResultsExporter(args.export_dir)
    bundle_id = database.latest_bundle_id(args.bundle)
    for index, report in zip(indices, reports):
        database.record_day_run(report, index, bundle_id)
        exporter.export_day_report(report, f"{report.controller}_d{index}_n{args.noise:g}")
        exporter.export_voltage_trajectories(report, f"{report.controller}_d{index}_n{args.noise:g}")
        own = report.totals.loc[report.controller]
        print(f"📊 Day {index} {report.controller}: total {own['Total Cost']:.4f} "
              f"({own['Improvement %']:+.1f}% vs NoCtrl)")
        if report.errors:
            print(f"⚠️  {report.errors} episodes truncated by power-flow failures")
    return 0


def cmd_report(args) -> int:
    from summary import cost_table, noise_table

    df = database.day_runs_frame()
    if df.empty:
        print("📭 No simulated days recorded")
        return 0
    exporter = ResultsExporter(args.export_dir)
    table = cost_table(df)
    path = exporter.export_table(table.reset_index(), 'cost_table')
    print(table.to_string(float_format=lambda x: f"{x:.4f}"))
    sweep = noise_table(df)
    if sweep.shape[1] > 1:
        frame = sweep.reset_index().melt(id_vars='controller', var_name='noise', value_name='Total Cost')
        exporter.export_table(frame, 'noise_sweep')
        exporter.plot_noise_sweep(frame)
    voltages = database.day_run_voltages()
    if not voltages.empty:
        exporter.export_table(voltages, 'voltage_trajectories')
    print(f"\n✅ Report written to {os.path.dirname(path)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='vvc', description=__doc__)
    parser.add_argument('--config', help='experiment JSON file')
    parser.add_argument('--seed', type=int, default=None)
    parser.add_argument('--workers', type=int, default=config.DEFAULT_WORKERS)
    parser.add_argument('--db', default=None, help='run registry SQLite path')
    parser.add_argument('--json-errors', action='store_true', help='print errors as JSON on stderr')
    parser.add_argument('-v', '--verbose', action='store_true')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('build-net', help='validate a network file and print its summary')
    p.add_argument('path')
    p.add_argument('--json', action='store_true')
    p.set_defaults(func=cmd_build_net)

    p = sub.add_parser('synth-profiles', help='write synthetic load/PV days')
    p.add_argument('--net')
    p.add_argument('--days', type=int)
    p.add_argument('--out', default=os.path.join(config.DATA_DIR, 'scenarios.csv'))
    p.set_defaults(func=cmd_synth_profiles)

    p = sub.add_parser('gen-data', help='label scenarios with the OPF oracle')
    p.add_argument('--net')
    p.add_argument('--profiles', required=True)
    p.add_argument('--out', default=os.path.join(config.DATA_DIR, 'labels.csv'))
    p.add_argument('--noise', type=float, help='augmentation noise (fraction)')
    p.add_argument('--factor', type=int, help='noisy copies per point')
    p.add_argument('--nonlinear-passes', type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('train', help='train a controller bundle')
    p.add_argument('--net')
    p.add_argument('--data', required=True)
    p.add_argument('--setup', choices=SETUP_ORDER)
    p.add_argument('--epsilon', type=float)
    p.add_argument('--epochs', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--out')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('verify', help='certify a bundle and write the result into its manifest')
    p.add_argument('--net')
    p.add_argument('--bundle', required=True)
    p.add_argument('--pairs', type=int, default=config.MONOTONICITY_PAIRS)
    p.add_argument('--samples', type=int, default=config.LIPSCHITZ_SAMPLES)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser('simulate', help='run closed-loop days')
    p.add_argument('--net')
    p.add_argument('--bundle', required=True)
    p.add_argument('--profiles', required=True)
    p.add_argument('--day', type=int, default=-1, help='day index (default: last)')
    p.add_argument('--all-days', action='store_true')
    p.add_argument('--noise', type=float, default=0.0, help='measurement noise d_v (fraction)')
    p.add_argument('--dq', type=float, default=0.0, help='setpoint disturbance d_q (p.u.)')
    p.add_argument('--pf-model', choices=('linear', 'nonlinear'))
    p.add_argument('--steps', type=int)
    p.add_argument('--perturb', type=float, default=0.0, help='multiplicative noise on the loaded injections (fraction)')
    p.add_argument('--no-opf', action='store_true')
    p.add_argument('--export-dir')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('report', help='cost and noise tables from the run registry')
    p.add_argument('--export-dir')
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        database.init_db(args.db)
        return args.func(args)
    except VoltVarError as e:
        payload = e.to_dict()
    except (ValueError, KeyError, OSError) as e:
        payload = {'error': type(e).__name__, 'message': str(e), 'details': {}}
    if args.json_errors:
        print(json.dumps(payload), file=sys.stderr)
    else:
        print(f"❌ {payload['error']}: {payload['message']}", file=sys.stderr)
    return 1


if __name__ == '__main__':
    sys.exit(main())
