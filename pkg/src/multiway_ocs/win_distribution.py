"""Seed process, win function, exact prefix laws, and the sufficiency certificate.

The selection machinery is driven by an integer-valued "seed" process: a
saturating counter z that resets to 0 with probability p at every step and
emits its value when it resets (emitting -1 otherwise).  An increasing map W
turns emitted values into win probabilities.  Everything downstream (exact
prefix distributions, the F table, the sufficiency certificate) is computed
on the merged finite-state version of this chain, which is observationally
identical to the unbounded chain once W is capped at y_max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SeedParams",
    "WinModel",
    "ExactDistribution",
    "FTable",
    "SmallCertificate",
    "build_win_model",
    "seed_sample",
    "seed_sample_batch",
    "enumerate_prefix",
    "compute_F",
    "check_small",
    "uncapped_y_max",
]

MERGE_TOL = 1e-14
MASS_TOL = 1e-12


@dataclass(frozen=True)
class SeedParams:
    """Hyperparameters of the seed process: reset probability p, counter cap
    y_max, and round arity m."""

    p: float
    y_max: int = 30
    m: int = 6

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise ValueError(f"p must be strictly inside (0, 1), got {self.p}")
        if self.y_max < 1:
            raise ValueError(f"y_max must be >= 1, got {self.y_max}")
        if self.m < 2:
            raise ValueError(f"m must be >= 2, got {self.m}")


def uncapped_y_max(p: float, tol: float = 1e-12) -> int:
    """Counter cap large enough that the merged tail mass (1-p)^y_max < tol,
    i.e. the capped model is indistinguishable from the unbounded one."""
    return max(1, math.ceil(math.log(tol) / math.log1p(-p)))


@dataclass(frozen=True)
class WinModel:
    """Tabulated cumulative law G and win function W of one seed draw.

    G[v + 1] = Pr[emitted value <= v - 1] for v in {-1, ..., y_max + 1};
    W[y + 1] = win probability of a fresh element whose draw is y, for
    y in {-1, ..., y_max}.  Both tables are indexed with the +1 offset so
    that the -1 entry sits at index 0.
    """

    params: SeedParams
    G: np.ndarray
    W: np.ndarray

    def win(self, y: int) -> float:
        return float(self.W[min(y, self.params.y_max) + 1])

    def stationary_z(self) -> np.ndarray:
        """Merged stationary law of the counter: geometric with the tail mass
        (1-p)^y_max pooled into the top state."""
        p, y_max = self.params.p, self.params.y_max
        pz = np.empty(y_max + 1)
        pz[:y_max] = p * (1.0 - p) ** np.arange(y_max)
        pz[y_max] = (1.0 - p) ** y_max
        return pz


def build_win_model(params: SeedParams) -> WinModel:
    """Tabulate G and W for the given parameters.

    W(y) is the mean of t^(m-1) over t in [G(y), G(y+1)], i.e. the
    probability that a fresh element with draw y beats m-1 independent fresh
    rivals (ties broken uniformly).  Zero-width G intervals (possible at
    extreme y for large caps, where the geometric tail underflows) take the
    pointwise limit G(y)^(m-1).
    """
    p, y_max, m = params.p, params.y_max, params.m
    v = np.arange(0, y_max + 2)
    G = np.concatenate([[0.0], (1.0 - p) + p * (1.0 - (1.0 - p) ** v)])
    W = np.empty(y_max + 2)
    for i in range(y_max + 2):
        d = G[i + 1] - G[i]
        if d > 0.0:
            W[i] = (G[i + 1] ** m - G[i] ** m) / (m * d)
        else:
            W[i] = G[i] ** (m - 1)
    return WinModel(params=params, G=G, W=W)


def seed_sample(params: SeedParams, horizon: int, rng: np.random.Generator):
    """Sample one trajectory of (y_1..y_horizon, z_1..z_horizon).

    z_1 is drawn from the truncated geometric stationary law; afterwards each
    step resets with probability p (emitting the counter) or emits -1 and
    increments the counter, saturating at y_max.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    p, y_max = params.p, params.y_max
    log1mp = math.log1p(-p)
    u = rng.random(horizon + 1)
    z = min(int(math.log(u[0]) / log1mp), y_max)
    ys = np.empty(horizon, dtype=np.int64)
    zs = np.empty(horizon, dtype=np.int64)
    for k in range(horizon):
        zs[k] = z
        if u[k + 1] < p:
            ys[k] = z
            z = 0
        else:
            ys[k] = -1
            z = min(z + 1, y_max)
    return ys, zs


def seed_sample_batch(params: SeedParams, horizon: int, n: int,
                      rng: np.random.Generator):
    """Vectorized version of seed_sample: returns (Y, Z) of shape (n, horizon)."""
    p, y_max = params.p, params.y_max
    z = np.minimum(
        np.floor(np.log(rng.random(n)) / math.log1p(-p)).astype(np.int64), y_max)
    Y = np.empty((n, horizon), dtype=np.int64)
    Z = np.empty((n, horizon), dtype=np.int64)
    for k in range(horizon):
        Z[:, k] = z
        reset = rng.random(n) < p
        Y[:, k] = np.where(reset, z, -1)
        z = np.where(reset, 0, np.minimum(z + 1, y_max))
    return Y, Z


@dataclass(frozen=True)
class ExactDistribution:
    """Finite discrete distribution: sorted values with positive masses."""

    values: np.ndarray
    masses: np.ndarray

    @classmethod
    def from_atoms(cls, atoms: dict, merge_tol: float = MERGE_TOL) -> "ExactDistribution":
        """Build from a value -> mass mapping, merging values closer than
        merge_tol (numerically identical atoms from distinct paths)."""
        vals = sorted(atoms)
        merged_v, merged_m = [], []
        for v in vals:
            q = atoms[v]
            if q <= 0.0:
                continue
            if merged_v and v - merged_v[-1] <= merge_tol:
                tot = merged_m[-1] + q
                merged_v[-1] = (merged_v[-1] * merged_m[-1] + v * q) / tot
                merged_m[-1] = tot
            else:
                merged_v.append(v)
                merged_m.append(q)
        dist = cls(values=np.array(merged_v), masses=np.array(merged_m))
        dist.validate()
        return dist

    def validate(self):
        if np.any(self.masses <= 0.0):
            raise ValueError("masses must be positive")
        if np.any(np.diff(self.values) <= 0.0):
            raise ValueError("values must be strictly increasing")
        if abs(self.masses.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"masses sum to {self.masses.sum()}, not 1")

    def mean(self) -> float:
        return float(np.dot(self.values, self.masses))

    def expected_excess(self, t: float) -> float:
        """E[(X - t)_+]."""
        return float(np.dot(self.masses, np.maximum(self.values - t, 0.0)))


def enumerate_prefix(model: WinModel, r: int) -> ExactDistribution:
    """Exact law of 1 - prod_{l<=r} (1 - W(y_l)) by path enumeration.

    Paths are pairs (initial counter state, r reset/no-reset choices), at
    most (y_max + 1) * 2^r of them.  The running product multiplies the
    (1 - W) factors in step order so values agree bit-for-bit with a
    sequential simulation of the same chain.
    """
    p, y_max, m = model.params.p, model.params.y_max, model.params.m
    if not (1 <= r <= m - 1):
        raise ValueError(f"r must be in 1..m-1, got {r}")
    W = model.W
    pz = model.stationary_z()
    atoms: dict[float, float] = {}
    stack = [(z0, float(pz[z0]), 1.0, 0) for z0 in range(y_max + 1) if pz[z0] > 0.0]
    while stack:
        z, prob, prod, steps = stack.pop()
        if steps == r:
            w = 1.0 - prod
            atoms[w] = atoms.get(w, 0.0) + prob
            continue
        stack.append((0, prob * p, prod * (1.0 - W[z + 1]), steps + 1))
        stack.append((min(z + 1, y_max), prob * (1.0 - p), prod * (1.0 - W[0]), steps + 1))
    return ExactDistribution.from_atoms(atoms)


@dataclass(frozen=True)
class FTable:
    """Exact never-win probabilities F(0..n_max) plus the geometric tail ratio."""

    params: SeedParams
    n_max: int
    head: np.ndarray
    tail_ratio: float

    def value(self, n: int) -> float:
        """F(n), using the geometric tail bound beyond n_max."""
        if n <= self.n_max:
            return float(self.head[n])
        return float(self.head[self.n_max] * self.tail_ratio ** (n - self.n_max))


def compute_F(model: WinModel, n_max: int) -> FTable:
    """F(n) = E[prod_{l<=n} (1 - W(y_l))] by dynamic programming over the
    merged counter state; exact up to float rounding.

    The tail ratio F(n_max)/F(n_max-1) extends the table geometrically: the
    consecutive ratios F(n+1)/F(n) are decreasing, so
    F(n) <= F(n_max) * tail_ratio^(n - n_max) for n > n_max.
    """
    if n_max < 2:
        raise ValueError("n_max must be >= 2")
    p, y_max = model.params.p, model.params.y_max
    W = model.W
    lose_factor = (1.0 - p) * (1.0 - W[0])
    D = model.stationary_z()
    head = np.empty(n_max + 1)
    head[0] = 1.0
    for n in range(1, n_max + 1):
        D2 = np.zeros_like(D)
        D2[0] = float(np.dot(D, p * (1.0 - W[1:])))
        lose = D * lose_factor
        D2[1:] += lose[:-1]
        D2[-1] += lose[-1]
        D = D2
        head[n] = D.sum()
    return FTable(params=model.params, n_max=n_max, head=head,
                  tail_ratio=float(head[n_max] / head[n_max - 1]))


@dataclass(frozen=True)
class SmallCertificate:
    """Result of the sufficiency check for one multiplicity r."""

    r: int
    holds: bool
    min_gap: float
    argmin: float


def check_small(model: WinModel, r: int, tol: float = 1e-12) -> SmallCertificate:
    """Certify that the multiplicity-r win law is small enough to tournament.

    Minimizes
        g(t) = [1 - t - (m-r)/m * (1 - t^(m/(m-r)))] - E[(w - t)_+]
    over t in [0, 1], where w is the exact law from enumerate_prefix.  The
    expectation term is piecewise linear with kinks at the support values, so
    on each interval between kinks g is convex with derivative
        g'(t) = -1 + t^(r/(m-r)) + Pr[w > t],
    and the interior stationary point has the closed form
    t* = (Pr[w <= t])^((m-r)/r).  The global minimum is therefore attained at
    a kink or at one of these per-interval stationary points, all of which
    are evaluated exactly.
    """
    m = model.params.m
    if not (1 <= r <= m - 1):
        raise ValueError(f"r must be in 1..m-1, got {r}")
    dist = enumerate_prefix(model, r)
    vals, mass = dist.values, dist.masses
    suf_m = np.concatenate([np.cumsum(mass[::-1])[::-1], [0.0]])
    suf_mv = np.concatenate([np.cumsum((mass * vals)[::-1])[::-1], [0.0]])
    kinks = np.concatenate([[0.0], vals, [1.0]])
    s_exp = m / (m - r)
    best_v, best_t = math.inf, 0.0
    for j in range(len(kinks) - 1):
        a, b = kinks[j], kinks[j + 1]
        if b <= a:
            continue
        sf, sv = suf_m[j], suf_mv[j]
        cand = [a, b]
        q = 1.0 - sf
        if 0.0 < q < 1.0:
            t_star = q ** ((m - r) / r)
            if a < t_star < b:
                cand.append(t_star)
        for t in cand:
            g = 1.0 - t - (m - r) / m * (1.0 - t ** s_exp) - (sv - t * sf)
            if g < best_v:
                best_v, best_t = g, t
    return SmallCertificate(r=r, holds=best_v >= -tol, min_gap=best_v, argmin=best_t)
