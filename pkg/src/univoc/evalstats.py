"""Listening-test planning and analysis.

Covers the full desk workflow: build a balanced session plan (every utterance
rated by exactly R listeners, every listener rating exactly S screens, natural
speech hidden on every screen), then reduce the collected ratings to per-system
means, relative scores against natural speech, and pairwise paired t-tests
with Holm-Bonferroni correction.

The Student-t p-values come from our own regularized incomplete beta
evaluation (continued fraction, |error| < 1e-9 against high-precision
references) so the analysis carries no statistics-library dependency.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BalanceError, ConfigError, DegenerateTestError, InputError

_PLAN_FILE_VERSION = 1
_RECORD_VERSION = 1


# ---------------------------------------------------------------------------
# Student's t distribution


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta, modified Lentz iteration."""
    eps, fpmin = 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction failed to converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise InputError("incomplete beta needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise InputError("incomplete beta needs x in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_bt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
              + a * math.log(x) + b * math.log1p(-x))
    bt = math.exp(log_bt)
    # the continued fraction converges fast only below the distribution bulk
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t with df degrees of freedom."""
    if df < 1:
        raise InputError("df must be >= 1")
    if not math.isfinite(t):
        raise InputError("t statistic must be finite")
    x = df / (df + t * t)
    return min(1.0, max(0.0, regularized_incomplete_beta(df / 2.0, 0.5, x)))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test: t = mean(d) / (sd(d) / sqrt(n)) with the
    n-1 sample standard deviation. Identical pairs everywhere are refused
    rather than reported as an infinitely significant result."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("paired t-test needs two equal-length 1-D sequences")
    n = a.shape[0]
    if n < 2:
        raise InputError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateTestError(
            "difference variance is zero; paired t-test is undefined"
        )
    t = float(d.mean()) / (sd / math.sqrt(n))
    return TTestResult(t, student_t_two_sided_p(t, n - 1), n - 1)


def holm_bonferroni(pvalues: dict, alpha: float = 0.01) -> set:
    """Step-down Holm correction; returns the rejected labels.

    Walks the p-values ascending, rejecting while p < alpha / (m - i + 1),
    and stops at the first failure. Ties sort stably by (p, label)."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    items = sorted(pvalues.items(), key=lambda kv: (kv[1], kv[0]))
    m = len(items)
    rejected = set()
    for i, (label, p) in enumerate(items, start=1):
        if not 0.0 <= p <= 1.0:
            raise InputError(f"p-value for {label!r} outside [0, 1]")
        if p < alpha / (m - i + 1):
            rejected.add(label)
        else:
            break
    return rejected


def relative_mushra(system_scores, natural_scores) -> float:
    """Percentage ratio of mean scores: 100 * mean(system) / mean(natural)."""
    s = np.asarray(system_scores, np.float64)
    n = np.asarray(natural_scores, np.float64)
    if s.size == 0 or n.size == 0:
        raise InputError("score sets must be non-empty")
    if float(n.mean()) == 0.0:
        raise DegenerateTestError("mean natural score is zero; ratio undefined")
    return 100.0 * float(s.mean()) / float(n.mean())


# ---------------------------------------------------------------------------
# rating records


@dataclass(frozen=True)
class RatingRecord:
    listener_id: str
    utterance_id: str
    system_id: str
    score: int
    screen_index: int
    timestamp: float

    def __post_init__(self):
        for name in ("listener_id", "utterance_id", "system_id"):
            v = getattr(self, name)
            if not isinstance(v, str) or not v:
                raise InputError(f"{name} must be a non-empty string")
        if isinstance(self.score, bool) or not isinstance(self.score, int) or \
                not 0 <= self.score <= 100:
            raise InputError("score must be an integer in [0, 100]")
        if self.screen_index < 0:
            raise InputError("screen_index must be >= 0")

    def to_json(self) -> str:
        return json.dumps({
            "v": _RECORD_VERSION,
            "listener_id": self.listener_id,
            "utterance_id": self.utterance_id,
            "system_id": self.system_id,
            "score": self.score,
            "screen_index": self.screen_index,
            "timestamp": self.timestamp,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RatingRecord":
        obj = json.loads(line)
        if not isinstance(obj, dict) or obj.get("v") != _RECORD_VERSION:
            raise InputError("unsupported rating record version")
        try:
            return cls(obj["listener_id"], obj["utterance_id"], obj["system_id"],
                       obj["score"], obj["screen_index"], float(obj["timestamp"]))
        except KeyError as exc:
            raise InputError(f"rating record missing field {exc}") from exc


# ---------------------------------------------------------------------------
# session planning


@dataclass(frozen=True)
class Stimulus:
    handle: str
    system_id: str


@dataclass(frozen=True)
class Screen:
    """One rating screen. `reference_handle` is the openly labeled natural
    anchor; the natural system also hides among `stimuli` under its own
    unrelated handle, so nothing in the payload links the two."""

    utterance_id: str
    reference_handle: str
    stimuli: tuple

    def handle_for(self, system_id: str) -> str:
        for s in self.stimuli:
            if s.system_id == system_id:
                return s.handle
        raise KeyError(system_id)


@dataclass(frozen=True)
class ListenerPlan:
    token: str
    screens: tuple


@dataclass(frozen=True)
class SessionPlan:
    listeners: tuple
    systems: tuple
    natural_id: str
    seed: int

    @property
    def utterance_ids(self) -> tuple:
        seen = {}
        for lp in self.listeners:
            for s in lp.screens:
                seen[s.utterance_id] = None
        return tuple(seen)


def plan_sessions(utterance_ids, systems, listeners: int, ratings_per_utt: int,
                  screens_per_listener: int, seed: int,
                  natural_id: str) -> SessionPlan:
    """Balanced assignment of utterances to listeners.

    Requires N * R == L * S and S <= N; every listener's screens hold S
    distinct utterances and every utterance lands on exactly R distinct
    listeners. Each screen carries every system (natural speech among them,
    hidden behind an opaque handle) in seeded random order.
    """
    utts = list(utterance_ids)
    systems = list(systems)
    n, r, l, s = len(utts), ratings_per_utt, listeners, screens_per_listener
    if n == 0 or not systems:
        raise ConfigError("need at least one utterance and one system")
    if len(set(utts)) != n:
        raise ConfigError("utterance ids must be unique")
    if len(set(systems)) != len(systems):
        raise ConfigError("system ids must be unique")
    if natural_id not in systems:
        raise ConfigError(f"natural reference {natural_id!r} missing from systems")
    if min(r, l, s) < 1:
        raise ConfigError("listeners, ratings_per_utt, screens_per_listener >= 1")
    if n * r != l * s:
        raise BalanceError(
            f"infeasible balance: utterances*ratings_per_utt = {n}*{r} = {n * r} "
            f"but listeners*screens_per_listener = {l}*{s} = {l * s}"
        )
    if s > n:
        raise BalanceError(
            f"screens_per_listener = {s} exceeds utterance count {n}; "
            "a listener would repeat an utterance"
        )

    rng = np.random.default_rng(seed)
    # One permutation tiled R times, dealt out in S-sized runs: runs never
    # span more than one boundary (S <= N), so each listener's utterances are
    # distinct, and an utterance's R occurrences are N >= S apart, so its
    # listeners are distinct too.
    order = [utts[i] for i in rng.permutation(n)]
    lane = order * r

    used: set[str] = set()

    def fresh(nbytes):
        # handles resolve audio on their own, so they must be unique plan-wide
        while True:
            h = rng.bytes(nbytes).hex()
            if h not in used:
                used.add(h)
                return h

    listener_plans = []
    for i in range(l):
        token = fresh(8)
        screens = []
        for utt in lane[i * s:(i + 1) * s]:
            shuffled = [systems[j] for j in rng.permutation(len(systems))]
            stimuli = tuple(Stimulus(fresh(4), sys_id) for sys_id in shuffled)
            screens.append(Screen(utt, fresh(4), stimuli))
        listener_plans.append(ListenerPlan(token, tuple(screens)))
    return SessionPlan(tuple(listener_plans), tuple(systems), natural_id, seed)


def save_plan(path, plan: SessionPlan) -> None:
    payload = {
        "v": _PLAN_FILE_VERSION,
        "seed": plan.seed,
        "systems": list(plan.systems),
        "natural_id": plan.natural_id,
        "listeners": [
            {"token": lp.token,
             "screens": [
                 {"utterance_id": sc.utterance_id,
                  "reference_handle": sc.reference_handle,
                  "stimuli": [{"handle": st.handle, "system_id": st.system_id}
                              for st in sc.stimuli]}
                 for sc in lp.screens]}
            for lp in plan.listeners],
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_plan(path) -> SessionPlan:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not a session plan: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("v") != _PLAN_FILE_VERSION:
        raise InputError(f"{path}: unsupported session plan version")
    try:
        listeners = tuple(
            ListenerPlan(lp["token"], tuple(
                Screen(sc["utterance_id"], sc["reference_handle"], tuple(
                    Stimulus(st["handle"], st["system_id"])
                    for st in sc["stimuli"]))
                for sc in lp["screens"]))
            for lp in payload["listeners"])
        return SessionPlan(listeners, tuple(payload["systems"]),
                           payload["natural_id"], payload["seed"])
    except KeyError as exc:
        raise InputError(f"{path}: missing field {exc}") from exc


# ---------------------------------------------------------------------------
# analysis


@dataclass(frozen=True)
class SystemSummary:
    mean: float
    n: int
    relative: float


@dataclass(frozen=True)
class PairTest:
    t: float | None
    p: float | None
    df: int | None
    significant: bool
    degenerate: bool


@dataclass(frozen=True)
class Report:
    systems: dict
    tests: dict
    utterance_means: dict
    natural_id: str
    alpha: float

    def to_json_dict(self) -> dict:
        return {
            "v": 1,
            "natural_id": self.natural_id,
            "alpha": self.alpha,
            "systems": {k: {"mean": v.mean, "n": v.n, "relative": v.relative}
                        for k, v in self.systems.items()},
            "tests": {k: {"t": v.t, "p": v.p, "df": v.df,
                          "significant": v.significant,
                          "degenerate": v.degenerate}
                      for k, v in self.tests.items()},
            "utterance_means": self.utterance_means,
        }

    def render_table(self) -> str:
        names = sorted(self.systems, key=lambda k: -self.systems[k].mean)
        rows = [(name, f"{self.systems[name].mean:.1f}",
                 f"{self.systems[name].relative:.1f}%",
                 str(self.systems[name].n)) for name in names]
        head = ("System", "Mean", "Rel.", "n")
        widths = [max(len(r[i]) for r in rows + [head]) for i in range(4)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths)),
                 "  ".join("-" * w for w in widths)]
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths))
                  for row in rows]
        lines.append("")
        lines.append(f"pairwise paired t-tests, Holm-corrected at "
                     f"alpha={self.alpha:g}:")
        for label in sorted(self.tests):
            tst = self.tests[label]
            if tst.degenerate:
                lines.append(f"  {label}: degenerate (zero difference variance)")
            else:
                mark = "significant" if tst.significant else "not significant"
                lines.append(f"  {label}: t={tst.t:.3f} p={tst.p:.4g} "
                             f"df={tst.df} -> {mark}")
        return "\n".join(lines)


def analyze(records, natural_id: str, alpha: float = 0.01) -> Report:
    """Reduce rating records to the published-table shape.

    Means and relative scores per system, plus all pairwise paired t-tests
    (paired on (utterance, listener), Holm-corrected). Pairs with zero
    difference variance are flagged degenerate and never called significant.
    """
    records = list(records)
    if not records:
        raise InputError("no rating records to analyze")
    by_system: dict[str, list[int]] = {}
    keyed: dict[tuple, dict[str, float]] = {}
    for rec in records:
        by_system.setdefault(rec.system_id, []).append(rec.score)
        keyed.setdefault((rec.utterance_id, rec.listener_id), {})[rec.system_id] = \
            rec.score
    if natural_id not in by_system:
        raise InputError(f"no ratings for natural reference {natural_id!r}")

    natural_scores = by_system[natural_id]
    systems = {}
    for sys_id, scores in sorted(by_system.items()):
        systems[sys_id] = SystemSummary(
            float(np.mean(scores)), len(scores),
            relative_mushra(scores, natural_scores),
        )

    names = sorted(by_system)
    raw: dict[str, TTestResult | None] = {}
    for i, a_name in enumerate(names):
        for b_name in names[i + 1:]:
            label = f"{a_name} vs {b_name}"
            a_vals, b_vals = [], []
            for scores in keyed.values():
                if a_name in scores and b_name in scores:
                    a_vals.append(scores[a_name])
                    b_vals.append(scores[b_name])
            if len(a_vals) < 2:
                raw[label] = None
                continue
            try:
                raw[label] = paired_t_test(a_vals, b_vals)
            except DegenerateTestError:
                raw[label] = None

    rejected = holm_bonferroni(
        {label: res.p for label, res in raw.items() if res is not None}, alpha
    )
    tests = {}
    for label, res in raw.items():
        if res is None:
            tests[label] = PairTest(None, None, None, False, True)
        else:
            tests[label] = PairTest(res.t, res.p, res.df, label in rejected, False)

    utterance_means: dict[str, dict[str, float]] = {}
    per_utt: dict[str, dict[str, list[int]]] = {}
    for rec in records:
        per_utt.setdefault(rec.utterance_id, {}).setdefault(
            rec.system_id, []).append(rec.score)
    for utt in sorted(per_utt):
        utterance_means[utt] = {s: float(np.mean(v))
                                for s, v in sorted(per_utt[utt].items())}

    return Report(systems, tests, utterance_means, natural_id, alpha)
