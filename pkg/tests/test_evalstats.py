import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as scipy_stats

from univoc.errors import (
    BalanceError,
    ConfigError,
    DegenerateTestError,
    InputError,
)
from univoc.evalstats import (
    RatingRecord,
    analyze,
    holm_bonferroni,
    load_plan,
    paired_t_test,
    plan_sessions,
    relative_mushra,
    save_plan,
    student_t_two_sided_p,
)

# oracle: I_{df/(df+t^2)}(df/2, 1/2), 50-digit evaluation
T_P_REFERENCE = [
    (0.5, 1, 0.70483276469913345),
    (1.0, 1, 0.5),
    (2.0, 3, 0.13932596855884318),
    (1.5, 5, 0.19390368024247343),
    (2.75, 7, 0.028503973776409815),
    (0.1, 10, 0.92232071856440832),
    (3.2, 12, 0.0076325388008107972),
    (4.5, 2, 0.046001907994276019),
    (0.0, 4, 1.0),
    (10.0, 30, 4.5752514082296132e-11),
    (1.96, 60, 0.054644929736529251),
    (2.576, 120, 0.011207829547593585),
]


# ---------------------------------------------------------------------------
# t distribution and paired test


def test_t_p_values_match_reference_grid():
    for t, df, expected in T_P_REFERENCE:
        got = student_t_two_sided_p(t, df)
        assert abs(got - expected) < 1e-9, (t, df)


def test_small_sample_closed_form():
    res = paired_t_test([1, 2, 3], [0, 0, 0])
    assert res.df == 2
    assert abs(res.t - 2.0 * math.sqrt(3.0)) < 1e-12
    # df=2 closed form: p = 2 * (1 - (1 + t/sqrt(t^2+2))/2)
    assert abs(res.p - 0.0741799002274485) < 1e-9


def test_identical_sequences_are_degenerate():
    with pytest.raises(DegenerateTestError):
        paired_t_test([5, 6, 7], [5, 6, 7])
    with pytest.raises(DegenerateTestError):
        paired_t_test([5, 6, 7], [4, 5, 6])  # constant shift, zero variance


def test_swapping_sides_negates_t_and_keeps_p():
    a, b = [3.0, 5.5, 1.2, 8.0], [2.0, 6.0, 0.4, 5.0]
    fwd = paired_t_test(a, b)
    rev = paired_t_test(b, a)
    assert fwd.t == -rev.t
    assert fwd.p == rev.p
    assert fwd.df == rev.df == 3


def test_paired_t_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(25):
        n = int(rng.integers(3, 30))
        a = rng.normal(size=n) * 10
        b = a + rng.normal(size=n) * 3 + rng.normal() * 2
        ours = paired_t_test(a, b)
        ref = scipy_stats.ttest_rel(a, b)
        assert abs(ours.t - ref.statistic) < 1e-9
        assert abs(ours.p - ref.pvalue) < 1e-6


def test_paired_t_input_validation():
    with pytest.raises(InputError):
        paired_t_test([1, 2], [1, 2, 3])
    with pytest.raises(InputError):
        paired_t_test([1], [2])


@given(t=st.floats(-50, 50), df=st.integers(1, 200))
def test_p_always_a_probability(t, df):
    p = student_t_two_sided_p(t, df)
    assert 0.0 <= p <= 1.0


# ---------------------------------------------------------------------------
# Holm-Bonferroni


def test_holm_step_down_worked_example():
    ps = {"x": 0.004, "y": 0.03, "z": 0.002}
    assert holm_bonferroni(ps, alpha=0.01) == {"z", "x"}


def test_holm_trivial_cases():
    assert holm_bonferroni({"only": 0.005}, alpha=0.01) == {"only"}
    assert holm_bonferroni({"a": 1.0, "b": 1.0}, alpha=0.01) == set()
    assert holm_bonferroni({}, alpha=0.01) == set()


def test_holm_threshold_is_strict():
    assert holm_bonferroni({"edge": 0.01}, alpha=0.01) == set()


def test_holm_stops_at_first_failure():
    ps = {"a": 0.001, "b": 0.5, "c": 0.0011, "d": 0.009}
    # sorted: a (< 0.0025), c (< 0.00333), d (0.009 >= 0.005) stop
    assert holm_bonferroni(ps, alpha=0.01) == {"a", "c"}


def test_holm_validation():
    with pytest.raises(ConfigError):
        holm_bonferroni({"a": 0.5}, alpha=0.0)
    with pytest.raises(InputError):
        holm_bonferroni({"a": 1.5}, alpha=0.01)


@given(ps=st.lists(st.floats(0, 1), min_size=1, max_size=8),
       alpha=st.floats(0.001, 0.2))
@settings(max_examples=200)
def test_holm_sits_between_bonferroni_and_uncorrected(ps, alpha):
    labeled = {f"p{i}": p for i, p in enumerate(ps)}
    m = len(ps)
    holm = holm_bonferroni(labeled, alpha)
    bonferroni = {k for k, p in labeled.items() if p < alpha / m}
    uncorrected = {k for k, p in labeled.items() if p < alpha}
    assert bonferroni <= holm <= uncorrected


@given(ps=st.lists(st.floats(0, 1), min_size=2, max_size=6), seed=st.integers(0, 5))
def test_holm_invariant_to_label_insertion_order(ps, seed):
    labeled = {f"p{i}": p for i, p in enumerate(ps)}
    rng = np.random.default_rng(seed)
    order = list(labeled)
    rng.shuffle(order)
    shuffled = {k: labeled[k] for k in order}
    assert holm_bonferroni(labeled, 0.05) == holm_bonferroni(shuffled, 0.05)


# ---------------------------------------------------------------------------
# relative score


def test_relative_score_reported_rows():
    assert round(relative_mushra([61.9], [67.6]), 1) == 91.6
    assert round(relative_mushra([38.4], [67.6]), 1) == 56.8
    assert relative_mushra([50, 60], [50, 60]) == 100.0


@given(scores=st.lists(st.integers(1, 100), min_size=1, max_size=20),
       nat=st.lists(st.integers(1, 100), min_size=1, max_size=20),
       c=st.floats(0.01, 50))
def test_relative_score_scale_equivariant(scores, nat, c):
    base = relative_mushra(scores, nat)
    scaled = relative_mushra([c * s for s in scores], [c * s for s in nat])
    assert abs(base - scaled) < 1e-9 * max(1.0, abs(base))


def test_relative_score_errors():
    with pytest.raises(DegenerateTestError):
        relative_mushra([50], [0, 0])
    with pytest.raises(InputError):
        relative_mushra([], [50])


# ---------------------------------------------------------------------------
# rating records


def test_rating_record_validation():
    good = RatingRecord("l1", "u1", "sysA", 55, 0, 123.0)
    assert good.score == 55
    with pytest.raises(InputError):
        RatingRecord("l1", "u1", "sysA", 101, 0, 0.0)
    with pytest.raises(InputError):
        RatingRecord("l1", "u1", "sysA", -1, 0, 0.0)
    with pytest.raises(InputError):
        RatingRecord("l1", "u1", "sysA", True, 0, 0.0)
    with pytest.raises(InputError):
        RatingRecord("l1", "u1", "sysA", 50.0, 0, 0.0)
    with pytest.raises(InputError):
        RatingRecord("", "u1", "sysA", 50, 0, 0.0)
    with pytest.raises(InputError):
        RatingRecord("l1", "u1", "sysA", 50, -1, 0.0)


def test_rating_record_json_round_trip():
    rec = RatingRecord("l1", "u1", "sysA", 55, 3, 1700000000.5)
    again = RatingRecord.from_json(rec.to_json())
    assert again == rec
    with pytest.raises(InputError, match="version"):
        RatingRecord.from_json('{"v": 9}')
    with pytest.raises(InputError, match="missing"):
        RatingRecord.from_json('{"v": 1, "listener_id": "l"}')


# ---------------------------------------------------------------------------
# session planning


def assert_balanced(plan, utts, r, s):
    per_listener = [len({sc.utterance_id for sc in lp.screens})
                    for lp in plan.listeners]
    assert all(len(lp.screens) == s for lp in plan.listeners)
    assert per_listener == [s] * len(plan.listeners)
    listeners_per_utt = {u: set() for u in utts}
    for lp in plan.listeners:
        for sc in lp.screens:
            listeners_per_utt[sc.utterance_id].add(lp.token)
    assert all(len(v) == r for v in listeners_per_utt.values())


def test_published_test_shape_is_feasible():
    utts = [f"utt{i:03d}" for i in range(200)]
    plan = plan_sessions(utts, ["sysA", "sysB", "nat"], listeners=50,
                         ratings_per_utt=5, screens_per_listener=20,
                         seed=0, natural_id="nat")
    assert_balanced(plan, utts, r=5, s=20)
    total_screens = sum(len(lp.screens) for lp in plan.listeners)
    assert total_screens == 1000


def test_small_plan_covers_all_utterances():
    plan = plan_sessions(["a", "b", "c", "d"], ["x", "nat"], listeners=2,
                         ratings_per_utt=1, screens_per_listener=2,
                         seed=1, natural_id="nat")
    assert_balanced(plan, ["a", "b", "c", "d"], r=1, s=2)
    rated = {sc.utterance_id for lp in plan.listeners for sc in lp.screens}
    assert rated == {"a", "b", "c", "d"}


def test_infeasible_balance_is_rejected_with_equation():
    with pytest.raises(BalanceError, match=r"3\*2 = 6.*2\*2 = 4"):
        plan_sessions(["a", "b", "c"], ["nat"], listeners=2, ratings_per_utt=2,
                      screens_per_listener=2, seed=0, natural_id="nat")
    with pytest.raises(BalanceError, match="exceeds"):
        plan_sessions(["a", "b"], ["nat"], listeners=1, ratings_per_utt=2,
                      screens_per_listener=4, seed=0, natural_id="nat")


def test_plan_config_errors():
    with pytest.raises(ConfigError, match="natural"):
        plan_sessions(["a"], ["x"], 1, 1, 1, 0, natural_id="nat")
    with pytest.raises(ConfigError, match="unique"):
        plan_sessions(["a", "a"], ["nat"], 1, 2, 2, 0, natural_id="nat")
    with pytest.raises(ConfigError):
        plan_sessions([], ["nat"], 1, 1, 1, 0, natural_id="nat")


def test_every_screen_hides_every_system():
    plan = plan_sessions(["a", "b"], ["x", "y", "nat"], listeners=2,
                         ratings_per_utt=2, screens_per_listener=2,
                         seed=3, natural_id="nat")
    for lp in plan.listeners:
        for sc in lp.screens:
            assert sorted(st.system_id for st in sc.stimuli) == ["nat", "x", "y"]
            handles = [st.handle for st in sc.stimuli]
            assert len(set(handles)) == len(handles)
            # the labeled reference must not share the hidden natural's handle
            assert sc.reference_handle not in handles


def test_handles_are_unique_plan_wide():
    plan = plan_sessions([f"u{i}" for i in range(10)], ["x", "y", "nat"],
                         listeners=5, ratings_per_utt=2, screens_per_listener=4,
                         seed=2, natural_id="nat")
    everything = []
    for lp in plan.listeners:
        everything.append(lp.token)
        for sc in lp.screens:
            everything.append(sc.reference_handle)
            everything.extend(st.handle for st in sc.stimuli)
    assert len(set(everything)) == len(everything)


def test_stimulus_order_is_randomized_across_screens():
    plan = plan_sessions([f"u{i}" for i in range(8)], ["x", "y", "z", "nat"],
                         listeners=4, ratings_per_utt=2, screens_per_listener=4,
                         seed=5, natural_id="nat")
    orders = {tuple(st.system_id for st in sc.stimuli)
              for lp in plan.listeners for sc in lp.screens}
    assert len(orders) > 1


def test_plan_is_deterministic_given_seed():
    args = (["a", "b", "c", "d"], ["x", "nat"], 2, 1, 2)
    p1 = plan_sessions(*args, seed=7, natural_id="nat")
    p2 = plan_sessions(*args, seed=7, natural_id="nat")
    p3 = plan_sessions(*args, seed=8, natural_id="nat")
    assert p1 == p2
    assert p1 != p3
    tokens = [lp.token for lp in p1.listeners]
    assert len(set(tokens)) == len(tokens)


@given(data=st.data())
@settings(max_examples=60, deadline=None)
def test_random_feasible_plans_are_balanced(data):
    n = data.draw(st.integers(1, 10), label="n_utts")
    s = data.draw(st.integers(1, n), label="screens_per_listener")
    r = data.draw(st.integers(1, 4), label="ratings_per_utt")
    if (n * r) % s != 0:
        return
    l = n * r // s
    utts = [f"u{i}" for i in range(n)]
    plan = plan_sessions(utts, ["sys", "nat"], listeners=l, ratings_per_utt=r,
                         screens_per_listener=s,
                         seed=data.draw(st.integers(0, 99)), natural_id="nat")
    assert_balanced(plan, utts, r=r, s=s)


def test_plan_file_round_trip(tmp_path):
    plan = plan_sessions(["a", "b"], ["x", "nat"], listeners=2,
                         ratings_per_utt=2, screens_per_listener=2,
                         seed=9, natural_id="nat")
    save_plan(tmp_path / "plan.json", plan)
    assert load_plan(tmp_path / "plan.json") == plan
    (tmp_path / "bad.json").write_text('{"v": 99}')
    with pytest.raises(InputError, match="version"):
        load_plan(tmp_path / "bad.json")


# ---------------------------------------------------------------------------
# analysis


def make_records(table, screen_base=0):
    """table: {(utt, listener): {system: score}} -> records"""
    out = []
    for i, ((utt, lst), scores) in enumerate(sorted(table.items())):
        for sys_id, score in sorted(scores.items()):
            out.append(RatingRecord(lst, utt, sys_id, score,
                                    screen_base + i, 1000.0 + i))
    return out


def test_constant_ratio_is_exact():
    table = {
        ("u1", "l1"): {"nat": 70, "sysA": 30},
        ("u2", "l1"): {"nat": 90, "sysA": 50},
        ("u1", "l2"): {"nat": 80, "sysA": 40},
        ("u2", "l2"): {"nat": 80, "sysA": 40},
    }
    report = analyze(make_records(table), natural_id="nat")
    assert report.systems["sysA"].relative == 50.0
    assert report.systems["nat"].relative == 100.0
    assert report.systems["sysA"].mean == 40.0
    assert report.systems["sysA"].n == 4


def test_identical_systems_never_significant():
    table = {(f"u{i}", "l1"): {"nat": 60 + i, "copy1": 50 + i, "copy2": 50 + i}
             for i in range(6)}
    report = analyze(make_records(table), natural_id="nat")
    pair = report.tests["copy1 vs copy2"]
    assert pair.degenerate
    assert not pair.significant


def test_missing_natural_reference_is_named():
    table = {("u1", "l1"): {"sysA": 50, "sysB": 60},
             ("u2", "l1"): {"sysA": 55, "sysB": 65}}
    with pytest.raises(InputError, match="nat"):
        analyze(make_records(table), natural_id="nat")
    with pytest.raises(InputError):
        analyze([], natural_id="nat")


def test_clear_separation_is_detected():
    rng = np.random.default_rng(0)
    table = {}
    for i in range(40):
        noise = rng.integers(-3, 4)
        table[(f"u{i}", f"l{i % 5}")] = {
            "nat": int(90 + noise),
            "good": int(75 + rng.integers(-3, 4)),
            "poor": int(30 + rng.integers(-3, 4)),
        }
    report = analyze(make_records(table), natural_id="nat", alpha=0.01)
    assert report.tests["good vs poor"].significant
    assert report.tests["good vs nat"].significant
    assert report.systems["poor"].mean < report.systems["good"].mean
    payload = report.to_json_dict()
    assert set(payload["systems"]) == {"nat", "good", "poor"}
    assert payload["alpha"] == 0.01

    text = report.render_table()
    lines = text.splitlines()
    assert lines[0].split() == ["System", "Mean", "Rel.", "n"]
    assert "good vs poor" in text
    assert "significant" in text


def test_utterance_breakdown():
    table = {
        ("u1", "l1"): {"nat": 80, "sysA": 40},
        ("u1", "l2"): {"nat": 60, "sysA": 20},
    }
    report = analyze(make_records(table), natural_id="nat")
    assert report.utterance_means == {"u1": {"nat": 70.0, "sysA": 30.0}}


def test_sparse_pairs_are_degenerate_not_crashes():
    # only one shared (utterance, listener) pair between the two systems
    records = [
        RatingRecord("l1", "u1", "nat", 90, 0, 0.0),
        RatingRecord("l1", "u1", "sysA", 50, 0, 0.0),
        RatingRecord("l2", "u2", "nat", 85, 0, 0.0),
    ]
    report = analyze(records, natural_id="nat")
    assert report.tests["nat vs sysA"].degenerate
