"""Competitive-ratio calculus for never-win profiles.

A discrete profile F (convex, log-concave, geometric beyond k*) induces the
continuous profile f(x) = E[F(K)], K ~ Poisson(m x), the dual potential
a(x) = f(x) - int_0^inf e^-t f(t+x) dt, and the ratio
Gamma = 1 - int_0^inf e^-t f(t) dt.  Because F has a geometric tail, all
three admit closed forms as Poisson mixtures of sequences with the same
geometric tail, which this module evaluates exactly; the generic quadrature
versions (gamma_continuous, a_function) are kept as independent reference
implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import gammaln, pdtrc

from .win_distribution import FTable

__all__ = [
    "DiscreteF",
    "CheckResult",
    "RatioReport",
    "f_from_F",
    "f_derivative",
    "a_from_F",
    "gamma_discrete",
    "gamma_fahrbach",
    "gamma_continuous",
    "a_function",
    "r_bound",
    "check_conditions",
]

QUAD_CUTOFF = 40.0  # e^-40 < 5e-18, beyond any tolerance used here


def _poisson_pmf(ks: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """pmf table, shape lam.shape + ks.shape; stable at lam = 0."""
    lam = np.asarray(lam, dtype=float)
    out = np.zeros(lam.shape + ks.shape)
    pos = lam > 0.0
    if np.any(pos):
        lp = np.log(lam[pos])[..., None]
        out[pos] = np.exp(ks * lp - lam[pos][..., None] - gammaln(ks + 1.0))
    if np.any(~pos):
        out[~pos] = (ks == 0).astype(float)
    return out


@dataclass(frozen=True)
class _TailMixture:
    """E[h(K)], K ~ Poisson(m x), for h with geometric tail
    h(k) = tail0 * rho^(k - k_star) for k >= k_star."""

    head: np.ndarray  # h(0 .. k_star - 1)
    tail0: float
    rho: float
    k_star: int
    m: int

    def __call__(self, x):
        x_arr = np.asarray(x, dtype=float)
        lam = self.m * np.atleast_1d(x_arr)
        ks = np.arange(self.k_star)
        total = np.zeros(lam.shape)
        if self.k_star > 0:
            total += _poisson_pmf(ks, lam) @ self.head
        if self.rho == 0.0:
            total += self.tail0 * _poisson_pmf(np.array([self.k_star]), lam)[..., 0]
        else:
            scaled = lam * self.rho
            if self.k_star == 0:
                sf = np.ones_like(lam)
            else:
                sf = pdtrc(self.k_star - 1, scaled)  # Pr[Poisson(scaled) >= k_star]
            total += (self.tail0 / self.rho ** self.k_star
                      * np.exp(-lam * (1.0 - self.rho)) * sf)
        return total.reshape(x_arr.shape) if x_arr.shape else float(total[0])


@dataclass(frozen=True)
class DiscreteF:
    """Never-win profile: head values F(0..k_star), geometric with ratio
    (1 - c) beyond k_star, for rounds of arity m."""

    head: np.ndarray
    c: float
    m: int

    def __post_init__(self):
        head = np.asarray(self.head, dtype=float)
        object.__setattr__(self, "head", head)
        if head[0] != 1.0:
            raise ValueError("F(0) must be 1")
        if np.any(head < 0.0) or np.any(head > 1.0):
            raise ValueError("F values must lie in [0, 1]")
        if not (0.0 <= self.c <= 1.0):
            raise ValueError("c must lie in [0, 1]")
        if self.m < 2:
            raise ValueError("m must be >= 2")

    @property
    def k_star(self) -> int:
        return len(self.head) - 1

    @classmethod
    def trivial(cls, m: int) -> "DiscreteF":
        """The independent-selection profile (1 - 1/m)^n."""
        return cls(head=np.array([1.0]), c=1.0 / m, m=m)

    @classmethod
    def fahrbach(cls, gamma: float, m: int = 2) -> "DiscreteF":
        """Pairwise profile 2^-k (1-gamma)^(k-1)_+ : k_star = 1, c = (1+gamma)/2."""
        if not (0.0 <= gamma <= 1.0):
            raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
        return cls(head=np.array([1.0, 0.5]), c=(1.0 + gamma) / 2.0, m=m)

    @classmethod
    def from_f_table(cls, table: FTable) -> "DiscreteF":
        return cls(head=table.head.copy(), c=1.0 - table.tail_ratio,
                   m=table.params.m)

    def value(self, k: int) -> float:
        if k <= self.k_star:
            return float(self.head[k])
        return float(self.head[self.k_star] * (1.0 - self.c) ** (k - self.k_star))

    def delta(self, k: int, order: int = 1) -> float:
        """Discrete derivative (Delta^order F)(k)."""
        return sum((-1.0) ** (order - i) * math.comb(order, i) * self.value(k + i)
                   for i in range(order + 1))

    # -- closed-form mixtures ------------------------------------------------

    def _mixture(self) -> _TailMixture:
        return _TailMixture(head=self.head[:-1], tail0=float(self.head[-1]),
                            rho=1.0 - self.c, k_star=self.k_star, m=self.m)

    def _derivative_mixture(self, order: int) -> _TailMixture:
        # Delta^l F(k) = (-c)^l F(k) for k >= k_star, so the tail stays geometric.
        head = np.array([self.delta(k, order) for k in range(self.k_star)])
        return _TailMixture(head=head, tail0=(-self.c) ** order * float(self.head[-1]),
                            rho=1.0 - self.c, k_star=self.k_star, m=self.m)

    def _dual_series(self) -> np.ndarray:
        """G(j) = sum_{d >= 0} F(j + d) m^d / (m+1)^(d+1) for j = 0..k_star."""
        m, ks = self.m, self.k_star
        tail = self.head[ks] / (1.0 + m * self.c)  # G(k_star), geometric closed form
        G = np.empty(ks + 1)
        G[ks] = tail
        acc = tail
        for j in range(ks - 1, -1, -1):
            acc = self.head[j] / (m + 1.0) + (m / (m + 1.0)) * acc
            G[j] = acc
        return G

    def _a_mixture(self) -> _TailMixture:
        # a(x) = E[A(K)], A(j) = F(j) - G(j); beyond k_star,
        # A(j) = F(j) * m c / (1 + m c) keeps the geometric tail.
        G = self._dual_series()
        head = self.head[:-1] - G[:-1]
        tail0 = float(self.head[-1]) * self.m * self.c / (1.0 + self.m * self.c)
        return _TailMixture(head=head, tail0=tail0, rho=1.0 - self.c,
                            k_star=self.k_star, m=self.m)


def f_from_F(F: DiscreteF, x):
    """f(x) = E[F(K)], K ~ Poisson(m x); exact via the geometric-tail closed form."""
    if np.any(np.asarray(x) < 0.0):
        raise ValueError("x must be >= 0")
    return F._mixture()(x)


def f_derivative(F: DiscreteF, x, order: int = 1):
    """f^(order)(x) = m^order * E[Delta^order F(K)], K ~ Poisson(m x)."""
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2, or 3")
    return F.m ** order * F._derivative_mixture(order)(x)


def a_from_F(F: DiscreteF, x):
    """Closed form of a(x) = f(x) - int_0^inf e^-t f(t + x) dt.

    Writing the integral as a Poisson mixture shows a(x) = E[A(K)] with
    A(j) = F(j) - sum_{d>=0} F(j+d) m^d/(m+1)^(d+1), which inherits F's
    geometric tail; a(0) equals Gamma by construction.
    """
    if np.any(np.asarray(x) < 0.0):
        raise ValueError("x must be >= 0")
    return F._a_mixture()(x)


def gamma_discrete(F: DiscreteF, m: int | None = None) -> float:
    """Gamma = 1 - sum_{n < k*} m^n/(m+1)^(n+1) F(n)
                 - (m/(m+1))^k* F(k*) / (1 + m c),
    the geometric-tail closure of 1 - sum_n m^n/(m+1)^(n+1) F(n)."""
    if m is not None and m != F.m:
        F = DiscreteF(head=F.head, c=F.c, m=m)
    return 1.0 - float(F._dual_series()[0])


def gamma_fahrbach(gamma: float) -> float:
    """Ratio (3 + 2 gamma) / (6 + 3 gamma) of the pairwise profile."""
    if not (0.0 <= gamma <= 1.0):
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return (3.0 + 2.0 * gamma) / (6.0 + 3.0 * gamma)


def _check_unit_range(f, where: str):
    probe = f(np.array([0.0, 1.0, 5.0, QUAD_CUTOFF]))
    if np.any(np.asarray(probe) < -1e-9) or np.any(np.asarray(probe) > 1.0 + 1e-9):
        raise ValueError(f"{where}: f must map into [0, 1]")


def gamma_continuous(f) -> float:
    """Gamma = 1 - int_0^inf e^-t f(t) dt by adaptive quadrature.

    f is treated as a black box (no closed forms), so this is an independent
    cross-check of gamma_discrete.  The integrand is cut off at t = 40 where
    e^-t < 5e-18 bounds the tail below any tolerance used here.
    """
    _check_unit_range(lambda xs: np.array([f(t) for t in np.atleast_1d(xs)]),
                      "gamma_continuous")
    val, err = integrate.quad(lambda t: math.exp(-t) * f(t), 0.0, QUAD_CUTOFF,
                              epsabs=1e-12, epsrel=1e-12, limit=400)
    if err > 1e-9:
        raise ValueError(f"quadrature did not converge (err={err:.2e})")
    return 1.0 - val


def a_function(f, x: float) -> float:
    """a(x) = f(x) - int_0^inf e^-t f(t + x) dt by adaptive quadrature;
    a(0) = Gamma."""
    if x < 0.0:
        raise ValueError("x must be >= 0")
    val, _ = integrate.quad(lambda t: math.exp(-t) * f(t + x), 0.0, QUAD_CUTOFF,
                            epsabs=1e-12, epsrel=1e-12, limit=400)
    return f(x) - val


def r_bound(F: DiscreteF) -> float:
    """Largest admissible reset rate (-f'(0) - Gamma)/(Gamma + (1 - Gamma) f'(0)).

    A nonpositive denominator means the rate ratio diverges at 0 (the bound
    is vacuous), which happens exactly for the trivial profile."""
    gamma = gamma_discrete(F)
    fp0 = float(f_derivative(F, 0.0, 1))
    denom = gamma + (1.0 - gamma) * fp0
    if denom <= 0.0:
        return math.inf
    return (-fp0 - gamma) / denom


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    residual: float
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RatioReport:
    gamma: float
    checks: tuple

    @property
    def all_pass(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "all_pass": self.all_pass,
            "checks": [
                {"name": c.name, "passed": bool(c.passed), "residual": c.residual,
                 "info": c.info}
                for c in self.checks
            ],
        }


def check_conditions(F: DiscreteF, m: int | None = None,
                     ode_tol: float = 1e-6) -> RatioReport:
    """Evaluate every side condition the competitive-ratio theorem needs.

    Discrete conditions are checked exhaustively on the head (the geometric
    tail satisfies them identically: both-tail pairs reduce to an equality
    and mixed pairs reduce to the c-weighted third-difference inequality).
    The functional conditions on a(x) are checked on a grid over [0, 5]
    (step 0.01) refined near 0 (step 1e-4), where the rate-bound ratio
    attains its infimum.
    """
    if m is not None and m != F.m:
        F = DiscreteF(head=F.head, c=F.c, m=m)
    m = F.m
    ks = F.k_star
    gamma = gamma_discrete(F)
    checks = []

    # convexity of the head
    d2 = np.array([F.delta(k, 2) for k in range(max(ks, 1))])
    checks.append(CheckResult("convexity", bool(np.all(d2 >= -1e-12)),
                              float(d2.min()), {"min_second_difference": float(d2.min())}))

    # log-concavity: consecutive ratios decreasing, seam to the tail included
    ratios = [F.value(k + 1) / F.value(k) for k in range(ks)] + [1.0 - F.c]
    incr = max((ratios[i + 1] - ratios[i] for i in range(len(ratios) - 1)), default=0.0)
    checks.append(CheckResult("log_concavity", incr <= 1e-12, float(incr),
                              {"max_ratio_increase": float(incr)}))

    # pairwise third-difference inequality on head pairs
    worst_pair = -math.inf
    for k1 in range(max(ks, 1)):
        d1_1, d3_1 = F.delta(k1, 1), F.delta(k1, 3)
        d2_1 = F.delta(k1, 2)
        for k2 in range(max(ks, 1)):
            lhs = d3_1 * F.delta(k2, 1) + d1_1 * F.delta(k2, 3)
            rhs = 2.0 * d2_1 * F.delta(k2, 2)
            worst_pair = max(worst_pair, lhs - rhs)
    checks.append(CheckResult("pairwise_log_concavity", worst_pair <= 1e-12,
                              float(worst_pair), {"max_violation": float(worst_pair)}))

    # mixed head/tail case: Delta^3 F(k) + 2c Delta^2 F(k) + c^2 Delta F(k) >= 0
    mixed = np.array([F.delta(k, 3) + 2.0 * F.c * F.delta(k, 2)
                      + F.c ** 2 * F.delta(k, 1) for k in range(max(ks, 1))])
    checks.append(CheckResult("tail_log_concavity", bool(np.all(mixed >= -1e-12)),
                              float(mixed.min()), {"min_value": float(mixed.min())}))

    # arity bound
    mdf0 = m * F.delta(0, 1)
    m_denom = gamma + (1.0 - gamma) * mdf0
    m_rhs = math.inf if m_denom <= 0.0 else (-mdf0 - gamma) / m_denom
    checks.append(CheckResult("m_bound", m <= m_rhs + 1e-12,
                              float(min(m_rhs - m, 1e6)),
                              {"rhs": float(m_rhs), "m": m}))

    # reset-rate bound from the continuous profile
    r_max = r_bound(F)
    checks.append(CheckResult("r_bound", m <= r_max + 1e-12,
                              float(min(r_max - m, 1e6)),
                              {"r_max": float(r_max), "m": m}))

    # functional properties of a on the grid
    grid = np.unique(np.concatenate([np.arange(0.0, 5.0 + 1e-12, 0.01),
                                     np.arange(0.0, 0.05 + 1e-12, 1e-4)]))
    f_vals = f_from_F(F, grid)
    a_vals = a_from_F(F, grid)
    fp_vals = f_derivative(F, grid, 1)

    h_step = 1e-5
    a_prime = np.empty_like(grid)
    inner = grid >= h_step
    a_prime[inner] = (a_from_F(F, grid[inner] + h_step)
                      - a_from_F(F, grid[inner] - h_step)) / (2.0 * h_step)
    edge = ~inner  # second-order one-sided stencil near the boundary
    if np.any(edge):
        a_prime[edge] = (-3.0 * a_from_F(F, grid[edge])
                         + 4.0 * a_from_F(F, grid[edge] + h_step)
                         - a_from_F(F, grid[edge] + 2.0 * h_step)) / (2.0 * h_step)
    ode_res = float(np.max(np.abs(a_prime - fp_vals - a_vals)))
    checks.append(CheckResult("a_ode_residual", ode_res < ode_tol, ode_res,
                              {"max_residual": ode_res}))

    active = f_vals > 1e-9
    strict = float(np.max(a_prime[active])) if np.any(active) else -math.inf
    checks.append(CheckResult("a_decreasing", strict < -1e-12, strict,
                              {"max_a_prime_where_f_positive": strict}))

    lower = float(np.min(a_vals - gamma * f_vals))
    upper = float(np.max(a_vals - gamma))
    checks.append(CheckResult("a_between_gamma_f_and_gamma",
                              lower >= -1e-12 and upper <= 1e-12,
                              min(lower, -upper),
                              {"min_a_minus_gamma_f": lower, "max_a_minus_gamma": upper}))

    # h(x) = (Gamma - a)/(a - f Gamma) nondecreasing, infimum at x -> 0.
    # A vanishing denominator means h = +inf there (trivial profile), which
    # dominates everything and needs no comparison.
    denom = a_vals - f_vals * gamma
    finite = (grid > 0.0) & (denom > 1e-12)
    h_vals = (gamma - a_vals[finite]) / denom[finite]
    h_incr = float(np.min(np.diff(h_vals))) if h_vals.size > 1 else 0.0
    if math.isinf(r_max):
        h_gap = 0.0
    else:
        eps = 1e-3
        h_at = lambda t: float((gamma - a_from_F(F, t))
                               / (a_from_F(F, t) - f_from_F(F, t) * gamma))
        h_limit = 2.0 * h_at(eps) - h_at(2.0 * eps)  # Richardson toward 0
        h_gap = abs(h_limit - r_max)
    checks.append(CheckResult("h_nondecreasing", h_incr >= -1e-12 and h_gap < 1e-4,
                              min(h_incr, 1e-4 - h_gap),
                              {"min_increment": h_incr, "limit_vs_r_bound": h_gap}))

    return RatioReport(gamma=gamma, checks=tuple(checks))
