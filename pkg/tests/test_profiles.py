
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stealthbench.profiles import (
    ONE_FILE,
    UNLIMITED,
    ActionProfile,
    DetectionTable,
    RewardParams,
    builtin_detection_table,
    builtin_profiles,
    expected_reward,
    load_detection_table,
    load_profiles,
    optimal_profile,
    reward_detected,
    reward_hidden,
    save_detection_table,
    save_profiles,
)

# Independent high-precision evaluations (mpmath, 30 digits) of the closed
# forms with the reference rates and miss probabilities.
EXPECTED = {
    1: 24.17715066,
    2: -19.05480897,
    3: -19.67751425,
    4: 45.87281972,
    5: 39.90566677,
    6: 36.49035338,
}


def by_id():
    return {p.id: p for p in builtin_profiles()}


def test_builtin_rows():
    p = by_id()
    assert (p[4].nominal_rate_bps, p[4].burst_duration, p[4].burst_pause_s) == (500.0, 10.0, 5.0)
    assert p[4].algorithm_label == "AES-CTR"
    assert (p[1].nominal_rate_bps, p[1].burst_duration, p[1].burst_pause_s) == (16.0, ONE_FILE, 60.0)
    assert (p[3].nominal_rate_bps, p[3].burst_duration, p[3].burst_pause_s) == (632834.80, UNLIMITED, 0.0)
    assert sorted(p) == [1, 2, 3, 4, 5, 6]


def test_effective_rate():
    p = by_id()
    assert p[4].effective_rate_bps() == pytest.approx(500 * 10 / 15)
    assert p[2].effective_rate_bps() == p[2].nominal_rate_bps


@pytest.mark.parametrize("kwargs", [
    dict(nominal_rate_bps=0.0),
    dict(burst_pause_s=-1.0),
    dict(burst_duration="forever"),
    dict(burst_duration=0.0),
])
def test_profile_validation(kwargs):
    base = dict(id=9, algorithm_label="x", nominal_rate_bps=1.0, burst_duration=1.0, burst_pause_s=0.0)
    with pytest.raises(ValueError):
        ActionProfile(**{**base, **kwargs})


def test_table_validation():
    with pytest.raises(ValueError):
        DetectionTable(0.9, {1: 1.5})
    with pytest.raises(ValueError):
        RewardParams(d=0.0)


def test_reward_examples():
    assert reward_hidden(500) == pytest.approx(62.166, abs=1e-3)
    assert reward_hidden(0) == 0.0
    assert reward_hidden(200) == pytest.approx(53.03, abs=1e-2)
    assert reward_detected(500) == pytest.approx(-20.04, abs=1e-3)
    assert reward_detected(1) == -40.0
    assert reward_detected(0) == -40.0


def test_negative_rate_rejected():
    with pytest.raises(ValueError):
        reward_hidden(-1)
    with pytest.raises(ValueError):
        reward_detected(-0.5)


@pytest.mark.parametrize("pid", sorted(EXPECTED))
def test_expected_reward_oracle(pid):
    got = expected_reward(by_id()[pid], builtin_detection_table())
    assert got == pytest.approx(EXPECTED[pid], abs=1e-6)


def test_expected_reward_unknown_profile():
    table = DetectionTable(0.9, {1: 0.5})
    with pytest.raises(KeyError):
        expected_reward(by_id()[4], table)


def test_optimal_and_ranking():
    best, values = optimal_profile(builtin_profiles(), builtin_detection_table())
    assert best == 4
    ranking = [p.id for _, p in sorted(zip(values, builtin_profiles()), key=lambda t: -t[0])]
    assert ranking == [4, 5, 6, 1, 2, 3]


def test_optimal_single_and_all_detected():
    profiles = builtin_profiles()
    assert optimal_profile([profiles[2]], builtin_detection_table())[0] == 3
    never_missed = DetectionTable(0.9, {p.id: 0.0 for p in profiles})
    assert optimal_profile(profiles, never_missed)[0] == 3


def test_optimal_tie_goes_to_lowest_id():
    a = ActionProfile(7, "x", 100.0, 1.0, 0.0)
    b = ActionProfile(2, "x", 100.0, 1.0, 0.0)
    table = DetectionTable(0.9, {7: 0.5, 2: 0.5})
    assert optimal_profile([a, b], table)[0] == 2


def test_json_roundtrip(tmp_path):
    save_profiles(builtin_profiles(), tmp_path / "p.json")
    assert load_profiles(tmp_path / "p.json") == builtin_profiles()
    save_detection_table(builtin_detection_table(), tmp_path / "t.json")
    assert load_detection_table(tmp_path / "t.json") == builtin_detection_table()


def test_duplicate_ids_rejected(tmp_path):
    p = builtin_profiles()[0]
    save_profiles([p, p], tmp_path / "p.json")
    with pytest.raises(ValueError):
        load_profiles(tmp_path / "p.json")


rates = st.floats(min_value=0.0, max_value=1e7, allow_nan=False)


@given(rates, rates)
def test_hidden_increasing(a, b):
    if a < b:
        assert reward_hidden(a) <= reward_hidden(b)
        # Strict once the gap survives float rounding of ln(r + 1).
        if b - a > 1e-9 * (1.0 + a):
            assert reward_hidden(a) < reward_hidden(b)


@given(st.floats(min_value=1.0, max_value=1e7))
def test_detected_bounded(r):
    v = reward_detected(r)
    assert -40.0 <= v <= -20.0


@given(rates)
def test_hidden_beats_detected(r):
    assert reward_hidden(r) > reward_detected(r)


@given(st.floats(0, 1), st.floats(0, 1))
def test_expected_monotone_in_miss(m1, m2):
    prof = by_id()[4]
    lo, hi = sorted((m1, m2))
    assert expected_reward(prof, DetectionTable(0.9, {4: lo})) <= \
        expected_reward(prof, DetectionTable(0.9, {4: hi})) + 1e-9
