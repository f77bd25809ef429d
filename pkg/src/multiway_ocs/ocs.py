"""Multiway online correlated selection.

Each element carries an independent win sequence x_1, x_2, ... produced by
the seed process through the win function W.  A round with multiset A_j
computes each element's desired win probability from its next r values,
maps it to a random "strength" through a coupling, and the largest strength
wins.  The coupling against the ideal strength law (CDF t^(r/(m-r)) for
multiplicity r) is found by a transport linear program whose constraints
are exactly the properties the tournament needs: correct marginal,
conditional mean at least the desired win probability, and conditional laws
that are stochastically increasing in the desired win probability.
"""

from __future__ import annotations

import bisect
import math
import random
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .win_distribution import ExactDistribution, WinModel, enumerate_prefix

__all__ = [
    "DUMMY",
    "CouplingConstructionError",
    "TournamentCoupling",
    "CouplingSet",
    "RoundInput",
    "OCSState",
    "build_coupling",
]

DUMMY = "__dummy__"


class CouplingConstructionError(RuntimeError):
    """No feasible transport plan at the maximum discretization."""


# ---------------------------------------------------------------------------
# Target discretization
# ---------------------------------------------------------------------------

def _cell_means(u: np.ndarray, s: float) -> np.ndarray:
    """Conditional means of t ~ CDF t^s on the quantile cells with edges u.

    mean_j = (s/(s+1)) * (u_hi^((s+1)/s) - u_lo^((s+1)/s)) / (u_hi - u_lo),
    evaluated through log1p/expm1 so that cells squeezed against quantile 1
    (width near float eps) stay accurate.
    """
    ex = (s + 1.0) / s
    means = np.empty(len(u) - 1)
    for j in range(len(u) - 1):
        lo, hi = u[j], u[j + 1]
        if lo == 0.0:
            means[j] = (s / (s + 1.0)) * hi ** ex / (hi - lo)
        else:
            alo, ahi = ex * math.log(lo), ex * math.log(hi)
            means[j] = (s / (s + 1.0)) * math.exp(alo) * math.expm1(ahi - alo) / (hi - lo)
    return means


def _icx_gap(vals, mass, cmass, means):
    """E[(target_N - t)_+] - E[(source - t)_+] at every kink t, with the
    source mass strictly above each kink.

    Both excess functions are piecewise linear, so nonnegativity at the
    kinks is exactly feasibility of the coupling (increasing convex order
    against the discretized target).
    """
    ts = np.unique(np.concatenate([vals, means]))
    order = np.argsort(means, kind="stable")
    bv, bm = means[order], cmass[order]
    suf_bm = np.concatenate([np.cumsum(bm[::-1])[::-1], [0.0]])
    suf_bmv = np.concatenate([np.cumsum((bm * bv)[::-1])[::-1], [0.0]])
    suf_am = np.concatenate([np.cumsum(mass[::-1])[::-1], [0.0]])
    suf_amv = np.concatenate([np.cumsum((mass * vals)[::-1])[::-1], [0.0]])
    ib = np.searchsorted(bv, ts, side="left")
    ia = np.searchsorted(vals, ts, side="right")
    phi = (suf_bmv[ib] - ts * suf_bm[ib]) - (suf_amv[ia] - ts * suf_am[ia])
    return phi, ts, suf_am[ia]


MIN_CELL_WIDTH = 1e-8  # keeps every balance row 10x above solver tolerance


def _refine_cells(vals, mass, r, m, n_base, tol_abs=2e-13, tol_row=1e-8,
                  max_cells=16384, max_rounds=120):
    """Equal-mass quantile cells plus a geometric top stack plus data-driven
    splits.

    Equal-mass cells alone cannot host the near-one atoms (a cell's
    conditional mean caps the reachable conditional expectation well below
    atoms at 1 - O(1e-9)), so the top cell is pre-split geometrically and
    any cell straddling a negative icx gap is halved further.  The gap
    tolerance tightens to tol_row times the source mass above t, so atoms
    near 1 are covered tightly enough that no single atom's conditional
    mean falls short by much more than ~tol_row.  Cell widths never drop
    below MIN_CELL_WIDTH: thinner cells put balance rows inside the LP
    solver's feasibility tolerance and make it fail outright.
    """
    s = r / (m - r)
    u = {i / n_base for i in range(n_base + 1)}
    w = 1.0 / n_base
    while w > MIN_CELL_WIDTH:
        w /= 2.0
        e = 1.0 - w
        if 0.0 < e < 1.0:
            u.add(e)
    u = sorted(u)
    for _ in range(max_rounds):
        ua = np.array(u)
        cmass = np.diff(ua)
        means = _cell_means(ua, s)
        phi, ts, above = _icx_gap(vals, mass, cmass, means)
        thr = -np.minimum(tol_abs, tol_row * np.maximum(above, 1e-300))
        bad = ts[phi < thr]
        if len(bad) == 0:
            return ua, cmass, means, float(phi.min())
        to_split = set()
        for q in np.asarray(bad) ** s:
            j = min(max(int(np.searchsorted(ua, q, side="right")) - 1, 0), len(ua) - 2)
            to_split.update(jj for jj in (j - 1, j, j + 1) if 0 <= jj <= len(ua) - 2)
        new_edges = []
        for j in sorted(to_split):
            if u[j + 1] - u[j] <= 2.0 * MIN_CELL_WIDTH:
                continue
            mid = 0.5 * (u[j] + u[j + 1])
            if u[j] < mid < u[j + 1]:
                new_edges.append(mid)
        if not new_edges or len(u) + len(new_edges) > max_cells:
            break
        u = sorted(set(u) | set(new_edges))
    ua = np.array(u)
    cmass = np.diff(ua)
    means = _cell_means(ua, s)
    phi, _, _ = _icx_gap(vals, mass, cmass, means)
    return ua, cmass, means, float(phi.min())


# ---------------------------------------------------------------------------
# Coupling construction (transport LP)
# ---------------------------------------------------------------------------

@dataclass
class TournamentCoupling:
    """Transport plan from the multiplicity-r win law onto quantile cells of
    the ideal strength source (CDF t^(r/(m-r))).

    Negligible-mass support values (below the consolidation floor) share the
    plan row of the next-larger atom via row_map; their consistency
    requirement is satisfied a fortiori since that row's conditional mean
    covers the larger value."""

    r: int
    m: int
    source: ExactDistribution
    edges: np.ndarray       # quantile-space cell edges, len NC + 1
    cell_masses: np.ndarray
    cell_means: np.ndarray
    plan: np.ndarray        # pi over consolidated rows; rows sum to row masses
    row_cdf: np.ndarray     # conditional CDFs of consolidated rows
    row_map: np.ndarray     # source atom index -> plan row
    icx_gap: float

    def __post_init__(self):
        self._cdf_lists = [row.tolist() for row in self.row_cdf]
        self._vals_list = self.source.values.tolist()
        self._pow = 1.0 / self.r

    def atom_index(self, w: float, tol: float = 1e-9) -> int:
        vals = self._vals_list
        i = bisect.bisect_left(vals, w)
        best, err = -1, math.inf
        for j in (i - 1, i):
            if 0 <= j < len(vals) and abs(vals[j] - w) < err:
                best, err = j, abs(vals[j] - w)
        if err > tol:
            raise ValueError(f"w={w!r} is not a support value of the "
                             f"multiplicity-{self.r} win law")
        return best

    def sample_quantile(self, w: float, rng: random.Random) -> float:
        """Quantile u of the strength draw: cell from the plan's conditional
        law given w, then uniform inside the cell's quantile range."""
        i = int(self.row_map[self.atom_index(w)])
        row = self._cdf_lists[i]
        j = bisect.bisect_left(row, rng.random() * row[-1])
        if j >= len(row):
            j = len(row) - 1
        lo, hi = self.edges[j], self.edges[j + 1]
        return lo + (hi - lo) * rng.random()

    def strength(self, w: float, rng: random.Random) -> float:
        """Strength sample in [0, 1]; unconditionally distributed as the max
        of r independent uniforms."""
        return self.sample_quantile(w, rng) ** self._pow

    @property
    def row_masses(self) -> np.ndarray:
        n_rows = self.plan.shape[0]
        return np.bincount(self.row_map, weights=self.source.masses,
                           minlength=n_rows)

    @property
    def row_values(self) -> np.ndarray:
        """Largest source value mapped to each row (its anchor atom)."""
        n_rows = self.plan.shape[0]
        out = np.zeros(n_rows)
        np.maximum.at(out, self.row_map, self.source.values)
        return out

    def conditional_mean(self, w: float) -> float:
        """Expected strength-quantile value E[b | w]; equals the probability
        that an element with desired win probability w wins its round."""
        g = int(self.row_map[self.atom_index(w)])
        return float(self.plan[g] @ self.cell_means / self.row_masses[g])

    def validate(self, tol: float = 1e-7, mean_tol: float = 1e-7,
                 agg_tol: float = 2e-9):
        """Check the plan's three constraint families: marginals, per-atom
        conditional means (within mean_tol per atom and agg_tol in the
        mass-weighted aggregate), and stochastic monotonicity of rows."""
        pi = self.plan
        rmass, rvals = self.row_masses, self.row_values
        if np.abs(pi.sum(axis=1) - rmass).max() > tol:
            raise AssertionError("row sums do not match source masses")
        if np.abs(pi.sum(axis=0) - self.cell_masses).max() > tol:
            raise AssertionError("column sums do not match cell masses")
        deficit = np.maximum(rvals - (pi @ self.cell_means) / rmass, 0.0)
        if float(deficit.max()) > mean_tol:
            raise AssertionError("conditional mean below source value")
        if float(np.dot(deficit, rmass)) > agg_tol:
            raise AssertionError("aggregate conditional-mean deficit too large")
        if float(np.max(np.diff(self.row_cdf, axis=0))) > tol:
            raise AssertionError("conditional CDFs not stochastically monotone")


def _solve_transport(vals, mass, cmass, means, slack_weight=1e6):
    """Conditional-CDF matrix plus per-atom mean slacks, or None.

    Variables are the row CDFs C[i, j] (last column pinned to 1) and one
    nonnegative slack per mean constraint, so the LP is always solvable;
    the slacks report exactly how far each atom's conditional mean falls
    short and are minimized with a dominant weight.  A quadratic transport
    cost breaks the heavy degeneracy of the ordering constraints and keeps
    every row close to its comonotone band.  Presolve is disabled because
    it rejects models whose feasible region is thinner than its tolerances,
    which is exactly the regime here (the mean constraints are tight up to
    ~1e-13).
    """
    K, NC = len(vals), len(cmass)
    ncvar = K * (NC - 1)
    nvar = ncvar + K

    blocks_r, blocks_c, blocks_d, rhs_ub = [], [], [], []
    row0 = 0
    # within-row CDF ordering: C[i, j] - C[i, j+1] <= 0
    n = K * (NC - 2)
    rows = np.arange(n)
    i_idx = rows // (NC - 2)
    j_idx = rows % (NC - 2)
    blocks_r += [rows, rows]
    blocks_c += [i_idx * (NC - 1) + j_idx, i_idx * (NC - 1) + j_idx + 1]
    blocks_d += [np.ones(n), -np.ones(n)]
    rhs_ub.append(np.zeros(n))
    row0 += n
    # stochastic monotonicity across atoms: C[i+1, j] - C[i, j] <= 0
    n = (K - 1) * (NC - 1)
    rows = row0 + np.arange(n)
    i_idx = np.arange(n) // (NC - 1)
    j_idx = np.arange(n) % (NC - 1)
    blocks_r += [rows, rows]
    blocks_c += [(i_idx + 1) * (NC - 1) + j_idx, i_idx * (NC - 1) + j_idx]
    blocks_d += [np.ones(n), -np.ones(n)]
    rhs_ub.append(np.zeros(n))
    row0 += n
    # conditional means in conditional units, with slack:
    #   sum_j dmu_j C[i, j] - slack_i <= mu_top - a_i
    dmu = means[1:] - means[:-1]
    rows = row0 + np.repeat(np.arange(K), NC - 1)
    cols = np.arange(ncvar)
    blocks_r.append(rows)
    blocks_c.append(cols)
    blocks_d.append(np.tile(dmu, K))
    blocks_r.append(row0 + np.arange(K))
    blocks_c.append(ncvar + np.arange(K))
    blocks_d.append(-np.ones(K))
    rhs_ub.append(means[-1] - vals)
    row0 += K

    A_ub = sp.csr_matrix((np.concatenate(blocks_d),
                          (np.concatenate(blocks_r), np.concatenate(blocks_c))),
                         shape=(row0, nvar))
    b_ub = np.concatenate(rhs_ub)

    # cell-mass balance in incremental form, one row per cell:
    #   sum_i mass_i (C[i, j] - C[i, j-1]) = cmass_j.
    # The cumulative form puts nearly identical right-hand sides on the
    # finest top cells and defeats the solver's scaling.
    eq_rows, eq_cols, eq_data = [], [], []
    for j in range(NC - 1):
        eq_rows.append(np.full(K, j))
        eq_cols.append(np.arange(K) * (NC - 1) + j)
        eq_data.append(mass)
        if j > 0:
            eq_rows.append(np.full(K, j))
            eq_cols.append(np.arange(K) * (NC - 1) + j - 1)
            eq_data.append(-mass)
    A_eq = sp.csr_matrix((np.concatenate(eq_data),
                          (np.concatenate(eq_rows), np.concatenate(eq_cols))),
                         shape=(NC - 1, nvar))
    b_eq = cmass[:-1].copy()

    cost = np.empty(nvar)
    for i in range(K):
        cc = (vals[i] - means) ** 2
        cost[i * (NC - 1):(i + 1) * (NC - 1)] = cc[:-1] - cc[1:]
    cost[ncvar:] = slack_weight

    res = None
    for options in ({}, {"presolve": False}):
        res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                      bounds=[(0.0, 1.0)] * ncvar + [(0.0, None)] * K,
                      method="highs-ds",
                      options={"primal_feasibility_tolerance": 1e-9,
                               "dual_feasibility_tolerance": 1e-9, **options})
        if res.status == 0:
            break
    if res is None or res.status != 0:
        return None, None
    C = np.hstack([res.x[:ncvar].reshape(K, NC - 1), np.ones((K, 1))])
    C = np.maximum.accumulate(np.clip(C, 0.0, 1.0), axis=1)
    return C, res.x[ncvar:]


def _consolidate(source: ExactDistribution, mass_floor: float = 1e-11):
    """Fold atoms with negligible mass into the next-larger atom's row.

    Rounding a support value up only strengthens its consistency
    requirement, and the folded mass (at most K * mass_floor in total) is
    inside the feasibility tolerance; without this step the LP's equality
    columns span seventeen orders of magnitude and the solver fails on
    scaling alone.  Returns (values, masses, row_map).
    """
    vals, mass = source.values, source.masses
    keep = [len(vals) - 1]  # the top atom always anchors a row
    for i in range(len(vals) - 2, -1, -1):
        if mass[i] >= mass_floor:
            keep.append(i)
    keep = np.array(sorted(keep))
    row_map = np.searchsorted(keep, np.arange(len(vals)), side="left")
    row_map = np.minimum(row_map, len(keep) - 1)
    rmass = np.bincount(row_map, weights=mass, minlength=len(keep))
    return vals[keep], rmass, row_map


def build_coupling(source: ExactDistribution, r: int, m: int,
                   n_cells: int = 512, n_cells_max: int = 4096) -> TournamentCoupling:
    """Construct the multiplicity-r coupling by refinement plus LP.

    Starts from n_cells equal-mass quantile cells, splits cells that break
    the increasing-convex-order certificate, and solves the transport LP;
    persistent infeasibility doubles the base grid up to n_cells_max before
    reporting construction failure (a certificate violation or an
    irreducible discretization limit).
    """
    if not (1 <= r <= m - 1):
        raise ValueError(f"r must be in 1..m-1, got {r}")
    vals, mass, row_map = _consolidate(source)
    n = n_cells
    last_gap, last_slack = math.nan, math.nan
    while n <= n_cells_max:
        edges, cmass, means, gap = _refine_cells(vals, mass, r, m, n)
        last_gap = gap
        C, slack = _solve_transport(vals, mass, cmass, means)
        if C is not None:
            last_slack = float(slack.max())
            if last_slack <= 1e-7 and float(np.dot(slack, mass)) <= 1e-9:
                pi = np.diff(np.hstack([np.zeros((len(vals), 1)), C]), axis=1) * mass[:, None]
                coupling = TournamentCoupling(
                    r=r, m=m, source=source, edges=edges, cell_masses=cmass,
                    cell_means=means, plan=pi, row_cdf=C, row_map=row_map,
                    icx_gap=gap)
                coupling.validate()
                return coupling
        n *= 2
    raise CouplingConstructionError(
        f"no feasible plan for r={r} up to {n_cells_max} base cells (icx gap "
        f"{last_gap:.2e}, mean slack {last_slack:.2e}); the sufficiency "
        f"certificate likely fails")


class CouplingSet:
    """Lazy cache of couplings for every multiplicity of one win model."""

    def __init__(self, model: WinModel, n_cells: int = 512):
        self.model = model
        self.n_cells = n_cells
        self._built: dict[int, TournamentCoupling] = {}

    def get(self, r: int) -> TournamentCoupling:
        if r not in self._built:
            source = enumerate_prefix(self.model, r)
            self._built[r] = build_coupling(source, r, self.model.params.m,
                                            self.n_cells)
        return self._built[r]


# ---------------------------------------------------------------------------
# The online selector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoundInput:
    """One round: element multiplicities summing to the arity m."""

    multiplicities: dict

    @classmethod
    def of(cls, elements) -> "RoundInput":
        return cls(multiplicities=dict(Counter(elements)))

    def total(self) -> int:
        return sum(self.multiplicities.values())


class _Element:
    __slots__ = ("xs", "k", "z", "rng", "appearances")

    def __init__(self, rng: random.Random, p: float, log1mp: float, y_max: int):
        self.rng = rng
        self.xs: list[float] = []
        self.k = 0  # number of win-sequence entries consumed
        self.z = min(int(math.log(rng.random()) / log1mp), y_max)
        self.appearances = 0


class OCSState:
    """Sequential m-way selector; one winner per round.

    Win sequences extend lazily from per-element streams seeded by
    (seed, element id), so replaying a script with the same seed is
    reproducible regardless of how rounds interleave elements.
    """

    def __init__(self, model: WinModel, couplings: CouplingSet | None = None,
                 seed: int | str = 0):
        params = model.params
        self.model = model
        self.m = params.m
        self.couplings = couplings if couplings is not None else CouplingSet(model)
        if self.couplings.model is not model:
            if self.couplings.model.params != params:
                raise ValueError("coupling set was built for different parameters")
        self.seed = seed
        self._p = params.p
        self._log1mp = math.log1p(-params.p)
        self._y_max = params.y_max
        self._W = model.W.tolist()
        self._elements: dict = {}
        self._tournament_rng = random.Random(f"{seed}|tournament")
        self.rounds_played = 0

    # -- element plumbing --------------------------------------------------

    def _element(self, eid) -> _Element:
        el = self._elements.get(eid)
        if el is None:
            el = _Element(random.Random(f"{self.seed}|elem|{eid}"),
                          self._p, self._log1mp, self._y_max)
            self._elements[eid] = el
        return el

    def _extend(self, el: _Element, upto: int):
        rng_random = el.rng.random
        W = self._W
        p, y_max = self._p, self._y_max
        xs = el.xs
        z = el.z
        while len(xs) < upto:
            if rng_random() < p:
                xs.append(W[z + 1])
                z = 0
            else:
                xs.append(W[0])
                z = z + 1 if z < y_max else y_max
        el.z = z

    def win_probability(self, eid, r: int) -> float:
        """Desired win probability 1 - prod of (1 - x) over the element's
        next r sequence entries (peek; does not consume)."""
        el = self._element(eid)
        self._extend(el, el.k + r)
        prod = 1.0
        for ell in range(el.k, el.k + r):
            prod *= 1.0 - el.xs[ell]
        return 1.0 - prod

    def consumed(self, eid) -> int:
        """Total multiplicity consumed so far by eid (k(i) - 1 in 1-based terms)."""
        el = self._elements.get(eid)
        return el.k if el is not None else 0

    # -- rounds ------------------------------------------------------------

    def ocs_step(self, round_input) -> object:
        """Play one round; returns the winning element id."""
        if isinstance(round_input, RoundInput):
            mult = round_input.multiplicities
        else:
            mult = dict(Counter(round_input))
        if not mult:
            raise ValueError("round is empty")
        if sum(mult.values()) != self.m:
            raise ValueError(f"multiplicities sum to {sum(mult.values())}, "
                             f"expected m={self.m}")
        winner = None
        for eid, r in mult.items():
            if r == self.m:
                winner = eid
        if winner is None:
            rng = self._tournament_rng
            best = -1.0
            for eid in sorted(mult, key=str):
                r = mult[eid]
                w = self.win_probability(eid, r)
                s = self.couplings.get(r).strength(w, rng)
                if s > best:
                    best = s
                    winner = eid
        for eid, r in mult.items():
            el = self._element(eid)
            el.k += r
            el.appearances += r
        self.rounds_played += 1
        return winner

    def continuous_step(self, probs: dict) -> object | None:
        """One round of the continuous selector.

        probs maps element ids to nonnegative marginals summing to at most 1
        (plus rounding); the slack goes to a persistent dummy element.  The
        multiset is m independent categorical draws, handed to ocs_step.
        Returns the winner, or None when the dummy wins (no selection).
        """
        ids, weights = [], []
        total = 0.0
        for eid, q in probs.items():
            if q < 0.0:
                raise ValueError(f"negative probability for {eid!r}")
            if q > 0.0:
                ids.append(eid)
                weights.append(q)
                total += q
        if total > 1.0 + 1e-12:
            raise ValueError(f"probabilities sum to {total} > 1")
        slack = 1.0 - total
        if slack > 0.0:
            ids.append(DUMMY)
            weights.append(slack)
        cum = []
        acc = 0.0
        for qv in weights:
            acc += qv
            cum.append(acc)
        rng = self._tournament_rng
        draws = [ids[bisect.bisect_left(cum, rng.random() * acc)]
                 for _ in range(self.m)]
        winner = self.ocs_step(draws)
        return None if winner == DUMMY else winner
