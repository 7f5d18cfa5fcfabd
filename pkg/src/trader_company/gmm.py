"""Gaussian-mixture generation of new Traders from surviving ones.

Each term is encoded as a 7-vector ``(P, Q, D, F, O-index, A-index, w)``;
terms of all survivors are pooled, a full-covariance mixture is fitted by EM,
and new Traders are assembled from sampled terms after rounding and clipping
the discrete coordinates.  The number of terms of a new Trader is resampled
from the survivors' empirical distribution.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .formula import HyperRanges, TermParams, TraderParams

log = logging.getLogger(__name__)

TERM_DIM = 7
REG_FLOOR = 1e-6
DEFAULT_COMPONENTS = 5


@dataclass(frozen=True, eq=False)
class GMModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)
    log_likelihood: float  # mean per point, at the returned parameters
    n_iter: int

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def encode_terms(traders: Sequence[TraderParams], ranges: HyperRanges) -> tuple[np.ndarray, dict[int, float]]:
    """Pool every term into an (n_terms, 7) array and tally the term counts."""
    if not traders:
        raise ValueError("need at least one Trader to encode")
    op_index = {op: i for i, op in enumerate(ranges.allowed_ops)}
    act_index = {a: i for i, a in enumerate(ranges.allowed_activations)}
    rows = []
    for theta in traders:
        for t in theta.terms:
            try:
                rows.append((t.p, t.q, t.d, t.f, op_index[t.op], act_index[t.act], t.w))
            except KeyError as exc:
                raise ValueError(f"term uses {exc.args[0]!r}, which the ranges do not allow") from None
    counts = Counter(theta.m for theta in traders)
    total = len(traders)
    m_dist = {m: counts[m] / total for m in sorted(counts)}
    return np.array(rows, dtype=float), m_dist


def decode_array(vectors: np.ndarray, ranges: HyperRanges, n_stocks: int) -> tuple[np.ndarray, np.ndarray]:
    """Round and clip the discrete coordinates.

    Returns an (n, 6) integer array of ``(P, Q, D, F, O-index, A-index)``
    and the untouched weights.
    """
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    upper = np.array(
        [n_stocks - 1, n_stocks - 1, ranges.max_delay, ranges.max_delay,
         len(ranges.allowed_ops) - 1, len(ranges.allowed_activations) - 1],
        dtype=float,
    )
    ints = np.clip(np.rint(v[:, :6]), 0.0, upper).astype(np.int64)
    return ints, v[:, 6].copy()


def decode_term(vec: Sequence[float], ranges: HyperRanges, n_stocks: int) -> TermParams:
    ints, w = decode_array(np.asarray(vec, dtype=float)[None, :], ranges, n_stocks)
    p, q, d, f, o, a = (int(x) for x in ints[0])
    return TermParams(p, q, d, f, ranges.allowed_ops[o], ranges.allowed_activations[a], float(w[0]))


def _cholesky(covariances: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(covariances)


def _component_logpdf(x: np.ndarray, means: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """(n, K) log densities."""
    n, d = x.shape
    out = np.empty((n, len(means)))
    for k in range(len(means)):
        z = np.linalg.solve(chol[k], (x - means[k]).T)
        logdet = 2.0 * np.sum(np.log(np.diag(chol[k])))
        out[:, k] = -0.5 * (np.sum(z * z, axis=0) + logdet + d * np.log(2.0 * np.pi))
    return out


def _logsumexp(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1, keepdims=True)
    return (top + np.log(np.sum(np.exp(a - top), axis=1, keepdims=True)))[:, 0]


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    dist2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = dist2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=dist2 / total))
        else:
            idx = int(rng.integers(n))
        centers.append(x[idx])
        dist2 = np.minimum(dist2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def log_likelihood(model: GMModel, points: np.ndarray) -> float:
    """Mean per-point log-likelihood of ``points`` under ``model``."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    chol = _cholesky(model.covariances)
    logp = _component_logpdf(x, model.means, chol) + np.log(model.weights)
    return float(np.mean(_logsumexp(logp)))


def fit_gmm(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    reg_floor: float = REG_FLOOR,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> GMModel:
    """EM with k-means++ seeding and ``reg_floor * I`` added to every covariance.

    The component count is reduced to ``min(k, len(points))``.  Iteration
    stops when the mean log-likelihood improves by less than ``tol``.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if x.shape[0] == 0 or x.size == 0:
        raise ValueError("cannot fit a mixture to zero points")
    if k < 1:
        raise ValueError("k must be >= 1")
    n, d = x.shape
    k = min(k, n)
    floor = reg_floor * np.eye(d)

    means = _kmeanspp(x, k, rng)
    base_cov = np.cov(x, rowvar=False, bias=True).reshape(d, d) + floor
    covs = np.repeat(base_cov[None], k, axis=0)
    weights = np.full(k, 1.0 / k)

    prev = -np.inf
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        chol = _cholesky(covs)
        logp = _component_logpdf(x, means, chol) + np.log(weights)
        norm = _logsumexp(logp)
        ll = float(np.mean(norm))
        if ll - prev < tol and n_iter > 1:
            break
        prev = ll
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        for j in range(k):
            if nk[j] <= 1e-12 * n:
                continue  # starved component keeps its parameters
            mu = resp[:, j] @ x / nk[j]
            diff = x - mu
            means[j] = mu
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + floor
        weights = np.maximum(nk, 1e-300) / n
        weights = weights / weights.sum()

    chol = _cholesky(covs)
    logp = _component_logpdf(x, means, chol) + np.log(weights)
    final = float(np.mean(_logsumexp(logp)))
    return GMModel(weights, means, covs, final, n_iter)


def sample_gmm(model: GMModel, n: int, rng: np.random.Generator, return_components: bool = False):
    if n < 0:
        raise ValueError("n must be >= 0")
    comps = rng.choice(model.k, size=n, p=model.weights)
    z = rng.standard_normal((n, model.dim))
    chol = _cholesky(model.covariances)
    out = model.means[comps] + np.einsum("nij,nj->ni", chol[comps], z)
    if return_components:
        return out, comps
    return out


def generate_traders(
    survivors: Sequence[TraderParams],
    n_new: int,
    k: int,
    ranges: HyperRanges,
    n_stocks: int,
    rng: np.random.Generator,
    reg_floor: float = REG_FLOOR,
) -> list[TraderParams]:
    if not survivors:
        raise ValueError("generation needs at least one surviving Trader")
    if n_new <= 0:
        return []
    points, m_dist = encode_terms(survivors, ranges)
    model = fit_gmm(points, k, rng, reg_floor=reg_floor)
    log.debug("fitted %d-component mixture to %d terms in %d iterations", model.k, len(points), model.n_iter)
    sizes = rng.choice(np.array(list(m_dist)), size=n_new, p=np.array(list(m_dist.values())))
    vectors = sample_gmm(model, int(sizes.sum()), rng)
    ints, w = decode_array(vectors, ranges, n_stocks)
    ops, acts = ranges.allowed_ops, ranges.allowed_activations
    traders = []
    start = 0
    for m in sizes:
        rows = range(start, start + int(m))
        traders.append(
            TraderParams(
                tuple(
                    TermParams(
                        int(ints[r, 0]), int(ints[r, 1]), int(ints[r, 2]), int(ints[r, 3]),
                        ops[ints[r, 4]], acts[ints[r, 5]], float(w[r]),
                    )
                    for r in rows
                )
            )
        )
        start += int(m)
    return traders
