"""Speaker-similarity anchor selection.

Each candidate corpus and the target speaker get a diagonal-covariance GMM
over log-mel frames; the anchor is the candidate whose GMM sits closest to
the target's in KL divergence. The divergence is estimated by seeded Monte
Carlo as KLD(target || candidate); that direction punishes candidates whose
model fails to cover the target's frames, which is the failure mode that
matters when reusing a vocoder for an unseen voice.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
_GMM_FILE_VERSION = 1


@dataclass(frozen=True)
class SpeakerGmm:
    """Diagonal-covariance mixture; rows of means/variances are components."""

    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, dim)
    variances: np.ndarray  # (K, dim)
    log_likelihood_trail: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, np.float64)
        m = np.asarray(self.means, np.float64)
        v = np.asarray(self.variances, np.float64)
        if w.ndim != 1 or m.ndim != 2 or v.shape != m.shape or \
                w.shape[0] != m.shape[0]:
            raise InputError("inconsistent mixture shapes")
        if abs(float(w.sum()) - 1.0) > 1e-8 or np.any(w < 0):
            raise InputError("weights must form a simplex (sum 1 within 1e-8)")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise InputError("variances must be positive and finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_pdf(self, frames: np.ndarray) -> np.ndarray:
        """Log density of each row of `frames`, evaluated in the log domain."""
        x = np.asarray(frames, np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise InputError(f"expected dim {self.dim}, got {x.shape[1]}")
        comp = _component_log_pdf(x, self.means, self.variances)
        comp += np.log(self.weights)[None, :]
        peak = comp.max(axis=1, keepdims=True)
        return (peak + np.log(np.exp(comp - peak).sum(axis=1, keepdims=True)))[:, 0]


def _component_log_pdf(x, means, variances):
    """(N, K) matrix of per-component diagonal Gaussian log densities."""
    d = x.shape[1]
    const = -0.5 * (d * np.log(2.0 * np.pi) + np.log(variances).sum(axis=1))
    diff = x[:, None, :] - means[None, :, :]
    quad = (diff * diff / variances[None, :, :]).sum(axis=2)
    return const[None, :] - 0.5 * quad


def _kmeanspp_centers(x, k, rng):
    """Seeded k-means++ seeding: squared-distance weighted draws from the
    data rows."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(0, n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = x[rng.integers(0, n)]
        else:
            centers[i] = x[np.searchsorted(np.cumsum(d2 / total),
                                           rng.random(), side="right").clip(0, n - 1)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def fit_gmm(frames, k: int, seed: int = 0, max_iters: int = 200,
            tol: float = 1e-6) -> SpeakerGmm:
    """EM fit with k-means++ initialization.

    Stops when the per-frame log-likelihood improves by less than `tol` or
    after `max_iters` iterations. A component that loses all its mass is
    re-seeded by splitting the highest-total-variance component (logged).
    The per-iteration log-likelihood trail rides along on the result.
    """
    x = np.asarray(frames, np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("frames must be a non-empty (N, dim) array")
    if k < 1:
        raise ConfigError("k must be >= 1")
    n, dim = x.shape
    if n < k:
        raise InputError(f"need at least k={k} frames, got {n}")

    rng = np.random.default_rng(seed)
    means = _kmeanspp_centers(x, k, rng)
    global_var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    variances = np.tile(global_var, (k, 1))
    weights = np.full(k, 1.0 / k)

    trail = []
    prev_ll = -np.inf
    for _ in range(max_iters):
        # E-step in the log domain
        comp = _component_log_pdf(x, means, variances) + np.log(weights)[None, :]
        peak = comp.max(axis=1, keepdims=True)
        log_norm = peak + np.log(np.exp(comp - peak).sum(axis=1, keepdims=True))
        ll = float(log_norm.mean())
        trail.append(ll)
        resp = np.exp(comp - log_norm)

        # M-step
        nk = resp.sum(axis=0)
        empty = np.flatnonzero(nk < 1e-10)
        if empty.size:
            donor = int(np.argmax(variances.sum(axis=1)))
            for j in empty:
                log.warning("re-seeding empty mixture component %d from %d", j, donor)
                means[j] = means[donor] + rng.standard_normal(dim) * \
                    np.sqrt(variances[donor])
                variances[j] = variances[donor]
                weights[donor] /= 2.0
                weights[j] = weights[donor]
            weights /= weights.sum()
            prev_ll = -np.inf
            continue
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        second = (resp.T @ (x * x)) / nk[:, None]
        variances = np.maximum(second - means * means, VARIANCE_FLOOR)

        if ll - prev_ll < tol:
            break
        prev_ll = ll

    return SpeakerGmm(weights, means, variances, tuple(trail))


@dataclass(frozen=True)
class KldEstimate:
    nats: float
    stderr: float
    n_samples: int

    def __str__(self):
        return f"{self.nats:.2f} nats (se {self.stderr:.3f}, n={self.n_samples})"


def _sample_gmm(gmm: SpeakerGmm, n: int, rng: np.random.Generator) -> np.ndarray:
    comps = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    noise = rng.standard_normal((n, gmm.dim))
    return gmm.means[comps] + noise * np.sqrt(gmm.variances[comps])


def gmm_kld(p: SpeakerGmm, q: SpeakerGmm, n_samples: int = 10000,
            seed: int = 0) -> KldEstimate:
    """Monte Carlo KLD(p || q): mean of ln p(x) - ln q(x) over x ~ p,
    with the standard error of that mean."""
    if p.dim != q.dim:
        raise InputError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if n_samples < 2:
        raise ConfigError("n_samples must be >= 2")
    rng = np.random.default_rng(seed)
    x = _sample_gmm(p, n_samples, rng)
    diffs = p.log_pdf(x) - q.log_pdf(x)
    est = float(diffs.mean())
    se = float(diffs.std(ddof=1) / np.sqrt(n_samples))
    return KldEstimate(est, se, n_samples)


@dataclass(frozen=True)
class AnchorSelection:
    selected: str
    divergences: dict[str, KldEstimate]


def select_anchor(target: SpeakerGmm, candidates, n_samples: int = 10000,
                  seed: int = 0) -> AnchorSelection:
    """Pick the candidate minimizing KLD(target || candidate).

    `candidates` maps names to GMMs. All candidates are scored against one
    shared set of target samples, so the result cannot depend on candidate
    order; exact divergence ties fall to the lexicographically first name.
    """
    items = sorted(dict(candidates).items())
    if not items:
        raise InputError("candidate list is empty")
    for name, gmm in items:
        if gmm.dim != target.dim:
            raise InputError(f"candidate {name!r} dimension {gmm.dim} != "
                             f"target {target.dim}")
    rng = np.random.default_rng(seed)
    x = _sample_gmm(target, n_samples, rng)
    log_p = target.log_pdf(x)
    table = {}
    for name, gmm in items:
        diffs = log_p - gmm.log_pdf(x)
        table[name] = KldEstimate(float(diffs.mean()),
                                  float(diffs.std(ddof=1) / np.sqrt(n_samples)),
                                  n_samples)
    best = min(items, key=lambda kv: (table[kv[0]].nats, kv[0]))[0]
    return AnchorSelection(best, table)


def save_gmm(path, gmm: SpeakerGmm) -> None:
    payload = {
        "version": _GMM_FILE_VERSION,
        "K": gmm.n_components,
        "dim": gmm.dim,
        "weights": gmm.weights.tolist(),
        "means": gmm.means.tolist(),
        "variances": gmm.variances.tolist(),
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_gmm(path) -> SpeakerGmm:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not a mixture file: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != _GMM_FILE_VERSION:
        raise InputError(f"{path}: unsupported mixture file version")
    try:
        gmm = SpeakerGmm(np.asarray(payload["weights"], np.float64),
                         np.asarray(payload["means"], np.float64),
                         np.asarray(payload["variances"], np.float64))
    except KeyError as exc:
        raise InputError(f"{path}: missing field {exc}") from exc
    if gmm.n_components != payload["K"] or gmm.dim != payload["dim"]:
        raise InputError(f"{path}: header K/dim disagree with array shapes")
    return gmm
