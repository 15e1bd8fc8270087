"""Strongly convergent primal-dual splitting with Haugazeau projections.

One outer iteration, from the current point x_n = ((u_i), (g_k)) and the
anchor x_0:

1. prox sweep:   a_i = adjoint of the duals;  p_i = prox of u_i - gamma a_i;
                 l_k = oriented jump;         q_k = dual prox of l_k + mu g_k
2. direction:    t_k = q_k - jump(p);  s_i = (u_i - p_i)/gamma + adjoint(l-q)/mu
3. relaxation:   theta = relax * [gamma^-1 sum ||u-p||^2 + mu^-1 sum ||l-q||^2] / tau,
                 tau = sum ||s||^2 + sum ||t||^2
4. half step:    x_half = x_n - theta (s, t)
5. projection:   x_{n+1} = projection of x_0 onto
                 H(x_0, x_n) intersect H(x_n, x_half)  (three-case closed form)

The Kuhn-Tucker residual reported per iteration is
sqrt(gamma^-1 sum ||u-p||^2 + mu^-1 sum ||l-q||^2); it vanishes exactly at
points where the prox sweep is a fixed point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .harmonic import HarmonicLift, adjoint_sum, interface_jumps
from .linalg import InnerProductSpace
from .mesh import IfaceKey, Partition, trace_apply


class AlgorithmFailure(RuntimeError):
    """Geometrically impossible projection state (inconsistent half-spaces).

    Indicates a broken prox or adjoint oracle rather than bad data.
    """


# --- parameter schedules ---------------------------------------------------


def _schedule(value) -> Callable[[int], float]:
    if callable(value):
        return value
    if isinstance(value, (list, tuple, np.ndarray)):
        seq = [float(v) for v in value]

        def at(n, seq=seq):
            return seq[min(n, len(seq) - 1)]

        return at
    v = float(value)
    return lambda n: v


@dataclass
class AlgorithmParams:
    """Step sizes and stopping controls for the outer iteration.

    ``gamma`` (primal prox step) and ``mu_step`` (dual prox step) must stay
    inside [epsilon, 1/epsilon]; the relaxation ``relax`` inside
    [epsilon, 1]. Each accepts a constant, a sequence (last value repeated),
    or a callable of the iteration index.

    ``stop_tol`` is relative: the run stops when the Kuhn-Tucker residual
    falls below stop_tol times the initial residual. ``fixpoint_tol`` guards
    the tau = 0 branch against roundoff, and ``rho_guard`` is the
    collinearity threshold of the projection's three-case formula.
    """

    epsilon: float = 0.01
    gamma: float | Sequence[float] | Callable[[int], float] = 1.0
    mu_step: float | Sequence[float] | Callable[[int], float] = 1.0
    relax: float | Sequence[float] | Callable[[int], float] = 1.0
    max_iters: int = 5000
    stop_tol: float = 1e-8
    fixpoint_tol: float = 1e-12
    rho_guard: float = 1e-14

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if self.stop_tol < 0:
            raise ValueError("stop_tol must be nonnegative")
        # Constants can be validated eagerly; schedules are checked on use.
        for name in ("gamma", "mu_step", "relax"):
            v = getattr(self, name)
            if not callable(v) and np.isscalar(v):
                self._check(name, float(v))

    def _check(self, name: str, v: float) -> float:
        lo = self.epsilon
        hi = 1.0 if name == "relax" else 1.0 / self.epsilon
        if not lo <= v <= hi:
            raise ValueError(
                f"{name} value {v} outside the admissible range [{lo}, {hi}]"
            )
        return v

    def gamma_at(self, n: int) -> float:
        return self._check("gamma", _schedule(self.gamma)(n))

    def mu_at(self, n: int) -> float:
        return self._check("mu_step", _schedule(self.mu_step)(n))

    def relax_at(self, n: int) -> float:
        return self._check("relax", _schedule(self.relax)(n))


# --- the product space and its points ---------------------------------------


@dataclass(eq=False)
class PrimalDualPoint:
    """Element of the product space: one block per subdomain, one per interface.

    Supports +, -, and scalar *, which is all the projection algebra needs.
    """

    space: "ProductSpace"
    primal: list[np.ndarray]
    dual: list[np.ndarray]

    def copy(self) -> "PrimalDualPoint":
        return PrimalDualPoint(
            self.space,
            [u.copy() for u in self.primal],
            [g.copy() for g in self.dual],
        )

    def __add__(self, other: "PrimalDualPoint") -> "PrimalDualPoint":
        return PrimalDualPoint(
            self.space,
            [a + b for a, b in zip(self.primal, other.primal)],
            [a + b for a, b in zip(self.dual, other.dual)],
        )

    def __sub__(self, other: "PrimalDualPoint") -> "PrimalDualPoint":
        return PrimalDualPoint(
            self.space,
            [a - b for a, b in zip(self.primal, other.primal)],
            [a - b for a, b in zip(self.dual, other.dual)],
        )

    def __rmul__(self, c: float) -> "PrimalDualPoint":
        return PrimalDualPoint(
            self.space,
            [c * u for u in self.primal],
            [c * g for g in self.dual],
        )

    __mul__ = __rmul__


class ProductSpace:
    """Direct sum of subdomain energy spaces and interface L2 spaces.

    Inner products reduce blockwise in a fixed order (primal blocks by
    subdomain index, then dual blocks by interface key), which keeps runs
    bitwise reproducible.
    """

    def __init__(
        self,
        energy: list[InnerProductSpace],
        iface_weights: list[np.ndarray],
        keys: list[IfaceKey],
    ):
        self.energy = energy
        self.iface_weights = [np.asarray(w, dtype=float) for w in iface_weights]
        self.keys = list(keys)

    def zeros(self) -> PrimalDualPoint:
        return PrimalDualPoint(
            self,
            [np.zeros(sp.dim) for sp in self.energy],
            [np.zeros(len(w)) for w in self.iface_weights],
        )

    def point(
        self, primal: list[np.ndarray], dual: list[np.ndarray]
    ) -> PrimalDualPoint:
        if len(primal) != len(self.energy) or len(dual) != len(self.iface_weights):
            raise ValueError("block count mismatch")
        return PrimalDualPoint(
            self,
            [np.asarray(u, dtype=float).copy() for u in primal],
            [np.asarray(g, dtype=float).copy() for g in dual],
        )

    def energy_norm_sq(self, i: int, v: np.ndarray) -> float:
        return self.energy[i].norm_sq(v)

    def iface_inner(self, k: int, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(self.iface_weights[k] * a * b))

    def iface_norm_sq(self, k: int, a: np.ndarray) -> float:
        return max(self.iface_inner(k, a, a), 0.0)

    def inner(self, x: PrimalDualPoint, y: PrimalDualPoint) -> float:
        s = 0.0
        for i, spc in enumerate(self.energy):
            s += spc.inner(x.primal[i], y.primal[i])
        for k in range(len(self.iface_weights)):
            s += self.iface_inner(k, x.dual[k], y.dual[k])
        return s

    def norm_sq(self, x: PrimalDualPoint) -> float:
        return max(self.inner(x, x), 0.0)

    def norm(self, x: PrimalDualPoint) -> float:
        return math.sqrt(self.norm_sq(x))


# --- problem bundle ----------------------------------------------------------


@dataclass
class ProblemOracles:
    """Everything the outer iteration needs to run one problem instance.

    ``prox_primal[i]`` maps (v, gamma) to the primal prox on subdomain i;
    ``prox_dual[k]`` maps (x, mu) to the dual prox on interface keys[k].
    ``pool`` optionally holds a ThreadPoolExecutor for the per-subdomain
    solves; reductions stay serial and ordered either way.
    """

    partition: Partition
    lifts: list[HarmonicLift]
    space: ProductSpace
    prox_primal: list[Callable[[np.ndarray, float], np.ndarray]]
    prox_dual: list[Callable[[np.ndarray, float], np.ndarray]]
    loads: list[np.ndarray]
    load_lifts: list[np.ndarray]
    kind: str = "poisson"
    meta: dict = field(default_factory=dict)
    pool: object = None

    def map_subdomains(self, fn, args_list):
        if self.pool is None:
            return [fn(*args) for args in args_list]
        futures = [self.pool.submit(fn, *args) for args in args_list]
        return [f.result() for f in futures]


@dataclass(eq=False)
class IterationReport:
    """Per-iteration record delivered to callbacks and the trace CSV."""

    n: int
    kt_residual: float
    branch: str
    theta: float
    tau: float
    dist0_sq: float
    halfstep_sq: float
    chi: float
    rho: float
    half_point: PrimalDualPoint | None = None
    point: PrimalDualPoint | None = None


# --- Haugazeau projection ----------------------------------------------------


def haugazeau_coefficients(
    alpha: float, chi: float, nu: float, rho: float, rho_guard: float = 1e-14
):
    """Classify the three-case projection formula.

    Arguments are alpha = ||x0-xn||^2, chi = <x0-xn, xn-xh>, nu = ||xn-xh||^2
    and rho = alpha*nu - chi^2 (all in the ambient inner product). Returns the
    branch name plus the coefficients (c0, cn, ch) of the projection as a
    combination c0*x0 + cn*xn + ch*xh.
    """
    floor = rho_guard * alpha * nu
    if rho <= floor:
        if rho < -max(floor, 1e-300):
            raise AlgorithmFailure(
                f"rho = {rho} negative beyond roundoff (alpha={alpha}, nu={nu})"
            )
        # Collinear case; chi < 0 here means the half-spaces are disjoint.
        if chi >= -1e-12 * math.sqrt(max(alpha, 0.0) * max(nu, 0.0)):
            return "case-A", (0.0, 0.0, 1.0)
        raise AlgorithmFailure(
            "inconsistent half-spaces: rho = 0 with chi < 0; "
            "a prox or adjoint oracle is broken"
        )
    if chi * nu >= rho:
        # x0 + (1 + chi/nu)(xh - xn)
        c = 1.0 + chi / nu
        return "case-B", (1.0, -c, c)
    # xn + (nu/rho)(chi (x0-xn) + alpha (xh-xn))
    a = nu / rho * chi
    b = nu / rho * alpha
    return "case-C", (a, 1.0 - a - b, b)


def haugazeau_project(x0, xn, xn_half, inner=None):
    """Project x0 onto H(x0, xn) intersect H(xn, xn_half).

    Works on plain numpy vectors (Euclidean inner product) or
    :class:`PrimalDualPoint` (product-space inner product). Returns
    (projection, branch).
    """
    if inner is None:
        if isinstance(x0, PrimalDualPoint):
            inner = x0.space.inner
        else:
            x0 = np.asarray(x0, dtype=float)
            xn = np.asarray(xn, dtype=float)
            xn_half = np.asarray(xn_half, dtype=float)
            inner = lambda a, b: float(np.dot(a, b))
    d0 = x0 - xn
    dh = xn - xn_half
    alpha = max(inner(d0, d0), 0.0)
    nu = max(inner(dh, dh), 0.0)
    chi = inner(d0, dh)
    rho = alpha * nu - chi * chi
    branch, _ = haugazeau_coefficients(alpha, chi, nu, rho)
    if branch == "case-A":
        out = xn_half.copy() if hasattr(xn_half, "copy") else xn_half
    elif branch == "case-B":
        out = x0 + (1.0 + chi / nu) * (xn_half - xn)
    else:
        out = xn + (nu / rho) * (chi * (x0 - xn) + alpha * (xn_half - xn))
    return out, branch


# --- the outer iteration ------------------------------------------------------


@dataclass(eq=False)
class _Sweep:
    adj: list[np.ndarray]
    p: list[np.ndarray]
    jumps: dict[IfaceKey, np.ndarray]
    q: list[np.ndarray]
    gap_sq: float
    kt_residual: float


def _prox_sweep(
    state: PrimalDualPoint, oracles: ProblemOracles, gamma: float, mu: float
) -> _Sweep:
    part = oracles.partition
    keys = part.keys
    duals = {k: state.dual[idx] for idx, k in enumerate(keys)}

    def per_subdomain(i):
        # Each task only touches subdomain i's factorization, so the thread
        # pool cannot reorder any floating-point reduction.
        lift = oracles.lifts[i]
        a_i = adjoint_sum([lift], duals)[0]
        return a_i, oracles.prox_primal[i](state.primal[i] - gamma * a_i, gamma)

    results = oracles.map_subdomains(per_subdomain, [(i,) for i in range(part.m)])
    adj = [r[0] for r in results]
    p = [r[1] for r in results]
    jumps = interface_jumps(part, state.primal)
    q = [
        oracles.prox_dual[idx](jumps[k] + mu * duals[k], mu)
        for idx, k in enumerate(keys)
    ]
    gap = 0.0
    for i in range(part.m):
        gap += oracles.space.energy_norm_sq(i, state.primal[i] - p[i]) / gamma
    for idx, k in enumerate(keys):
        gap += oracles.space.iface_norm_sq(idx, jumps[k] - q[idx]) / mu
    return _Sweep(
        adj=adj,
        p=p,
        jumps=jumps,
        q=q,
        gap_sq=gap,
        kt_residual=math.sqrt(max(gap, 0.0)),
    )


def kt_residual(
    state: PrimalDualPoint,
    oracles: ProblemOracles,
    params: AlgorithmParams | None = None,
    n: int = 0,
) -> float:
    """Scaled Kuhn-Tucker residual of a point (zero exactly at solutions)."""
    params = params or AlgorithmParams()
    return _prox_sweep(state, oracles, params.gamma_at(n), params.mu_at(n)).kt_residual


def _complete_iteration(
    state: PrimalDualPoint,
    x0: PrimalDualPoint,
    sweep: _Sweep,
    oracles: ProblemOracles,
    params: AlgorithmParams,
    n: int,
    record_points: bool = False,
):
    part = oracles.partition
    space = oracles.space
    keys = part.keys
    gamma = params.gamma_at(n)
    mu = params.mu_at(n)

    t = []
    resid = {}
    for idx, k in enumerate(keys):
        i, j = k
        jump_p = trace_apply(part.trace(i, j), sweep.p[i]) - trace_apply(
            part.trace(j, i), sweep.p[j]
        )
        t.append(sweep.q[idx] - jump_p)
        resid[k] = sweep.jumps[k] - sweep.q[idx]

    def per_subdomain(i):
        s_adj = adjoint_sum([oracles.lifts[i]], resid)[0]
        return (state.primal[i] - sweep.p[i]) / gamma + s_adj / mu

    s = oracles.map_subdomains(per_subdomain, [(i,) for i in range(part.m)])
    tau = 0.0
    for i in range(part.m):
        tau += space.energy_norm_sq(i, s[i])
    for idx in range(len(keys)):
        tau += space.iface_norm_sq(idx, t[idx])

    d0 = x0 - state
    alpha = space.norm_sq(d0)

    fix_scale = max(1.0 / gamma, 1.0 / mu) * (1.0 + space.norm(state))
    if math.sqrt(max(tau, 0.0)) <= params.fixpoint_tol * fix_scale:
        # Prox fixed point: the half step is the point itself and the
        # projection keeps it (case A with xh = xn).
        report = IterationReport(
            n=n,
            kt_residual=sweep.kt_residual,
            branch="fixpoint",
            theta=0.0,
            tau=tau,
            dist0_sq=alpha,
            halfstep_sq=0.0,
            chi=0.0,
            rho=0.0,
        )
        new_state = state.copy()
        if record_points:
            report.half_point = state.copy()
            report.point = new_state
        return new_state, report

    theta = params.relax_at(n) * sweep.gap_sq / tau
    step = space.point(s, t)
    half = state - theta * step

    dh = state - half          # equals theta * step
    nu = space.norm_sq(dh)
    chi = space.inner(d0, dh)
    rho = alpha * nu - chi * chi
    branch, _ = haugazeau_coefficients(alpha, chi, nu, rho, params.rho_guard)
    if branch == "case-A":
        new_state = half.copy()
    elif branch == "case-B":
        new_state = x0 + (1.0 + chi / nu) * (half - state)
    else:
        new_state = state + (nu / rho) * (chi * d0 + alpha * (half - state))

    report = IterationReport(
        n=n,
        kt_residual=sweep.kt_residual,
        branch=branch,
        theta=theta,
        tau=tau,
        dist0_sq=alpha,
        halfstep_sq=nu,
        chi=chi,
        rho=rho,
    )
    if record_points:
        report.half_point = half
        report.point = new_state
    return new_state, report


def iterate_once(
    state: PrimalDualPoint,
    x0: PrimalDualPoint,
    oracles: ProblemOracles,
    params: AlgorithmParams,
    n: int = 0,
    record_points: bool = False,
):
    """One full outer iteration; returns (next point, report)."""
    sweep = _prox_sweep(state, oracles, params.gamma_at(n), params.mu_at(n))
    return _complete_iteration(
        state, x0, sweep, oracles, params, n, record_points=record_points
    )


@dataclass
class RunResult:
    point: PrimalDualPoint
    reports: list[IterationReport]
    converged: bool
    iterations: int
    final_residual: float


def run(
    x0: PrimalDualPoint,
    oracles: ProblemOracles,
    params: AlgorithmParams | None = None,
    callback: Callable[[IterationReport], None] | None = None,
    record_points: bool = False,
) -> RunResult:
    """Run the outer iteration from x0 until the relative residual target.

    Stops when the Kuhn-Tucker residual drops below
    ``params.stop_tol *`` (initial residual); appends a terminal report with
    branch "converged". Hitting ``max_iters`` returns the last point with
    ``converged=False``.
    """
    params = params or AlgorithmParams()
    state = x0.copy()
    reports: list[IterationReport] = []
    threshold = None
    residual = math.inf
    for n in range(params.max_iters + 1):
        sweep = _prox_sweep(state, oracles, params.gamma_at(n), params.mu_at(n))
        residual = sweep.kt_residual
        if threshold is None:
            threshold = params.stop_tol * residual
        if residual <= threshold:
            report = IterationReport(
                n=n,
                kt_residual=residual,
                branch="converged",
                theta=0.0,
                tau=0.0,
                dist0_sq=oracles.space.norm_sq(x0 - state),
                halfstep_sq=0.0,
                chi=0.0,
                rho=0.0,
            )
            if record_points:
                report.half_point = state.copy()
                report.point = state.copy()
            reports.append(report)
            if callback is not None:
                callback(report)
            return RunResult(state, reports, True, n, residual)
        if n == params.max_iters:
            break
        state, report = _complete_iteration(
            state, x0, sweep, oracles, params, n, record_points=record_points
        )
        reports.append(report)
        if callback is not None:
            callback(report)
    return RunResult(state, reports, False, params.max_iters, residual)
