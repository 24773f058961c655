import numpy as np
import pytest

from errors import ScenarioFileError
from grid import sensitivity, solve_lindistflow
from profiles import (
    frame_to_days,
    load_scenarios,
    load_shape,
    perturb_day,
    pv_shape,
    save_scenarios,
    split_days,
    synthesize_days,
)


@pytest.fixture(scope='module')
def ucsd_frame(ucsd_net):
    return synthesize_days(ucsd_net, 2, seed=0)


def test_shapes():
    hours = np.linspace(0.0, 24.0, 97)
    assert load_shape(hours).max() == pytest.approx(1.0, abs=1e-3)
    pv = pv_shape(hours)
    assert pv[hours < 6.0].max() == 0.0
    assert pv.max() == pytest.approx(1.0, abs=1e-2)


def test_frame_layout(ucsd_net, ucsd_frame):
    assert len(ucsd_frame) == 2 * 96
    assert sorted(ucsd_frame['day'].unique()) == [0, 1]
    assert 'p_bus48' in ucsd_frame.columns and 'q_bus1' in ucsd_frame.columns
    assert ucsd_frame['timestamp'].iloc[4] == '01:00'


def test_uncontrolled_voltages_deviate(ucsd_net, ucsd_frame, tmp_path):
    path = save_scenarios(ucsd_frame, str(tmp_path / 'days.csv'))
    days = load_scenarios(path, ucsd_net)
    mat = sensitivity(ucsd_net)
    v = np.array([solve_lindistflow(mat, s, np.zeros(13)) for s in days[0]])
    assert 0.92 < v.min() < 0.96
    assert v.max() > 1.0


def test_round_trip_in_per_unit(ucsd_net, ucsd_frame, tmp_path):
    path = save_scenarios(ucsd_frame, str(tmp_path / 'days.csv'))
    days = load_scenarios(path, ucsd_net)
    assert [len(d) for d in days] == [96, 96]
    np.testing.assert_allclose(days[1][3].p[0], ucsd_frame['p_bus1'].iloc[96 + 3] / ucsd_net.base_mva, rtol=1e-15)
    assert len(days[0][0].q_uncontrolled) == 35
    assert days[1][0].label == 'day1 00:00'


def test_bad_cell_names_row(ucsd_net, ucsd_frame, tmp_path):
    frame = ucsd_frame.copy()
    frame['p_bus7'] = frame['p_bus7'].astype(object)
    frame.loc[2, 'p_bus7'] = 'n/a'
    path = save_scenarios(frame, str(tmp_path / 'bad.csv'))
    with pytest.raises(ScenarioFileError) as exc:
        load_scenarios(path, ucsd_net)
    assert exc.value.row == 3


def test_missing_columns(chain_net, ucsd_frame, tmp_path):
    path = save_scenarios(ucsd_frame[['day', 'timestamp', 'p_bus1']], str(tmp_path / 'short.csv'))
    with pytest.raises(ScenarioFileError):
        load_scenarios(path, chain_net)


def test_needs_a_day(ucsd_net):
    with pytest.raises(ValueError):
        synthesize_days(ucsd_net, 0)


def test_split_and_perturb(chain_net):
    days = [[i] for i in range(4)]
    assert split_days(days, 1) == (days[:3], days[3:])
    assert split_days(days[:1], 1) == (days[:1], [])

    day = _chain_day(chain_net)
    assert all(np.array_equal(a.p, b.p) for a, b in zip(perturb_day(day, 0.0), day))
    noisy = perturb_day(day, 0.1, seed=2)
    for a, b in zip(noisy, day):
        ratio = a.p / b.p
        assert np.all((ratio >= 0.9) & (ratio <= 1.1))


def _chain_day(net):
    frame = synthesize_days(net, 1, seed=1, points_per_day=8)
    return frame_to_days(net, frame)[0]
