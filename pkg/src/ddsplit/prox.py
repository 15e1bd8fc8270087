"""Proximal maps in the subdomain energy metric and interface L2 metrics.

Four families:

* quadratic Dirichlet energy  (closed form through the cached load lift),
* quadratic energy + obstacle (energy-metric projection via primal-dual
  active sets),
* p-Laplacian energy          (damped Newton on the delta-smoothed integrand),
* interface couplings         (nodal closed forms; exact because the
  interface Gram is diagonal).

Every map here is firmly nonexpansive in its declared metric; the test suite
checks that property directly on random pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .harmonic import HarmonicLift
from .linalg import SolverFailure, SparseSpd
from .mesh import GradientOp

PLAPLACIAN_DELTA = 1e-10


# --- quadratic energy ---------------------------------------------------------


@dataclass
class QuadraticEnergySpec:
    """phi(u) = 1/2 ||u||_G^2 - (energy pairing with the load lift).

    ``load_lift`` is G^{-1} (load vector); the prox then needs no solves:
    prox_{gamma phi}(v) = v/(1+gamma) + gamma/(1+gamma) * load_lift.
    """

    lift: HarmonicLift
    load_lift: np.ndarray


def quadratic_energy_spec(lift: HarmonicLift, load: np.ndarray) -> QuadraticEnergySpec:
    load = np.asarray(load, dtype=float)
    load_lift = lift.solve(load)
    resid = float(np.linalg.norm(lift.gram.matrix @ load_lift - load))
    # Scale-aware bound: for a near-singular Gram (floating subdomain) the
    # lift's nullspace component is huge and the residual cannot even be
    # evaluated below ~ ||G|| * ||lift|| * eps, so that term joins the scale.
    G = lift.gram.matrix
    row_norm = float(np.max(np.abs(G).sum(axis=1))) if G.shape[0] else 0.0
    eval_noise = 64.0 * np.finfo(float).eps * row_norm * float(
        np.max(np.abs(load_lift), initial=0.0)
    )
    scale = 1.0 + float(np.linalg.norm(load))
    if resid > 1e-6 * scale + eval_noise:
        raise SolverFailure(
            "load lift does not satisfy its defining equation", residual=resid / scale
        )
    return QuadraticEnergySpec(lift=lift, load_lift=load_lift)


def prox_quadratic(spec: QuadraticEnergySpec, v: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("prox step must be positive")
    v = np.asarray(v, dtype=float)
    return v / (1.0 + gamma) + (gamma / (1.0 + gamma)) * spec.load_lift


# --- obstacle -------------------------------------------------------------------


@dataclass
class ObstacleSpec:
    """Quadratic energy restricted to the nodal set {w >= lower}."""

    quad: QuadraticEnergySpec
    lower: np.ndarray          # obstacle values at the free dofs


def project_lower_bound(
    gram: SparseSpd,
    target: np.ndarray,
    lower: np.ndarray,
    max_sweeps: int = 50,
) -> np.ndarray:
    """Gram-metric projection onto {w >= lower} by primal-dual active sets.

    Falls back to a projected-gradient loop if the active set cycles (it
    should not for an SPD Gram, but the fallback keeps the contract total).
    """
    target = np.asarray(target, dtype=float)
    lower = np.asarray(lower, dtype=float)
    n = gram.dim
    if target.shape != (n,) or lower.shape != (n,):
        raise ValueError("target/lower shape mismatch with the Gram dimension")
    G = gram.matrix
    active = target < lower
    for _ in range(max_sweeps):
        if not active.any():
            w = target.copy()
        else:
            w = np.empty(n)
            w[active] = lower[active]
            inactive = ~active
            if inactive.any():
                gii = G[inactive][:, inactive]
                rhs = (G @ target)[inactive] - G[inactive][:, active] @ lower[active]
                if gii.shape[0] == 1:
                    w[inactive] = rhs / gii.toarray()[0, 0]
                else:
                    w[inactive] = spla.spsolve(gii.tocsc(), rhs)
        lam = G @ (w - target)
        next_active = (lam + (lower - w)) > 0.0
        if np.array_equal(next_active, active):
            return w
        active = next_active

    # Projected gradient fallback; L bounds the largest Gram eigenvalue.
    L = float(np.max(np.abs(G).sum(axis=1)))
    w = np.maximum(target, lower)
    for _ in range(200 * max(n, 10)):
        step = w - (G @ (w - target)) / L
        w_new = np.maximum(step, lower)
        if np.max(np.abs(w_new - w)) <= 1e-14 * (1.0 + np.max(np.abs(w))):
            return w_new
        w = w_new
    raise SolverFailure("obstacle projection did not converge")


def prox_obstacle(spec: ObstacleSpec, v: np.ndarray, gamma: float) -> np.ndarray:
    """Quadratic prox composed with the energy-metric obstacle projection."""
    target = prox_quadratic(spec.quad, v, gamma)
    return project_lower_bound(spec.quad.lift.gram, target, spec.lower)


# --- p-Laplacian -----------------------------------------------------------------


def p_energy_parts(
    gradop: GradientOp, w: np.ndarray, p: float, delta: float, want_hessian: bool = True
):
    """Value, gradient and (optionally) Hessian of
    w -> sum_e vol_e ((|grad w|_e^2 + delta)^{p/2}) / p."""
    gs = gradop.gradients(w)
    sq = delta + sum(g * g for g in gs)
    vols = gradop.vols
    value = float(np.sum(vols * sq ** (p / 2.0)) / p)
    c1 = vols * sq ** ((p - 2.0) / 2.0)
    grad = np.zeros_like(w)
    for d, D in enumerate(gradop.comps):
        grad += D.T @ (c1 * gs[d])
    if not want_hessian:
        return value, grad, None
    c2 = vols * (p - 2.0) * sq ** ((p - 4.0) / 2.0)
    H = None
    for a, Da in enumerate(gradop.comps):
        for b, Db in enumerate(gradop.comps):
            diag = c2 * gs[a] * gs[b]
            if a == b:
                diag = diag + c1
            block = Da.T @ sp.diags(diag) @ Db
            H = block if H is None else H + block
    H = (H + H.T) * 0.5
    return value, grad, H.tocsr()


@dataclass
class PLaplacianSpec:
    """phi(u) = (1/p) integral (|Du|^2 + delta)^{p/2} - <load, u>.

    delta defaults to PLAPLACIAN_DELTA for p < 2 (the integrand is otherwise
    nonsmooth at zero gradient) and to 0 for p >= 2, where the prox term
    already makes the Newton systems uniformly definite.
    """

    lift: HarmonicLift
    gradop: GradientOp
    load: np.ndarray
    p: float
    delta: float
    quad_lift: np.ndarray = field(init=False)
    inner_tol: float = 1e-12
    max_newton: int = 100

    def __post_init__(self):
        if self.p <= 1.0:
            raise ValueError(f"p must exceed 1, got {self.p}")
        self.load = np.asarray(self.load, dtype=float)
        self.quad_lift = self.lift.solve(self.load)


def plaplacian_spec(
    lift: HarmonicLift,
    gradop: GradientOp,
    load: np.ndarray,
    p: float,
    delta: float | None = None,
) -> PLaplacianSpec:
    if delta is None:
        delta = PLAPLACIAN_DELTA if p < 2.0 else 0.0
    return PLaplacianSpec(lift=lift, gradop=gradop, load=load, p=float(p), delta=float(delta))


def prox_plaplacian(spec: PLaplacianSpec, v: np.ndarray, gamma: float) -> np.ndarray:
    """Damped Newton for the strongly convex inner problem

        min_w gamma (J_p(w) - <load, w>) + 1/2 ||w - v||_G^2 .

    Stops when the inner gradient norm drops below inner_tol * (1 + ||v||_G);
    a line-search stall is accepted only if the gradient is already within
    1000 * inner_tol of that scale, otherwise a SolverFailure is raised.
    """
    if gamma <= 0:
        raise ValueError("prox step must be positive")
    v = np.asarray(v, dtype=float)
    G = spec.lift.gram.matrix
    vnorm = float(np.sqrt(max(v @ (G @ v), 0.0)))
    scale = 1.0 + vnorm

    # p = 2 warm start; exact already when p == 2.
    w = v / (1.0 + gamma) + (gamma / (1.0 + gamma)) * spec.quad_lift

    def objective(w):
        val, _, _ = p_energy_parts(spec.gradop, w, spec.p, spec.delta, want_hessian=False)
        dw = w - v
        return gamma * (val - float(spec.load @ w)) + 0.5 * float(dw @ (G @ dw))

    F = objective(w)
    gnorm = np.inf
    for _ in range(spec.max_newton):
        val, grad_p, hess_p = p_energy_parts(spec.gradop, w, spec.p, spec.delta)
        Fgrad = gamma * (grad_p - spec.load) + G @ (w - v)
        gnorm = float(np.linalg.norm(Fgrad))
        if gnorm <= spec.inner_tol * scale:
            return w
        Hmat = (gamma * hess_p + G).tocsc()
        d = spla.spsolve(Hmat, -Fgrad)
        slope = float(Fgrad @ d)
        if not np.all(np.isfinite(d)) or slope >= 0.0:
            break
        step = 1.0
        accepted = False
        for _bt in range(60):
            w_try = w + step * d
            F_try = objective(w_try)
            if F_try <= F + 1e-4 * step * slope:
                w, F = w_try, F_try
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    if gnorm <= 1e3 * spec.inner_tol * scale:
        return w
    raise SolverFailure(
        f"p-Laplacian prox Newton stalled at gradient norm {gnorm:.3e}",
        residual=gnorm / scale,
    )


# --- interface couplings ----------------------------------------------------------

INTERFACE_KINDS = (
    "equality",
    "cone_plus",
    "cone_minus",
    "membrane_plus",
    "membrane_minus",
    "quadratic",
)


@dataclass(frozen=True)
class InterfaceCouplingSpec:
    """Coupling function on one interface's jump variable.

    kind            psi(jump)
    --------        ------------------------------------------
    equality        indicator of {0}          (transmission)
    cone_plus       indicator of {jump >= 0}  (unilateral, open in +)
    cone_minus      indicator of {jump <= 0}
    membrane_plus   indicator {>= 0} + permeability/2 * ||jump||^2
    membrane_minus  indicator {<= 0} + permeability/2 * ||jump||^2
    quadratic       permeability/2 * ||jump||^2

    The prox in the weighted interface metric is nodal and closed-form: the
    diagonal weights cancel for separable integrands.
    """

    kind: str
    permeability: float = 0.0

    def __post_init__(self):
        if self.kind not in INTERFACE_KINDS:
            raise ValueError(
                f"unknown interface coupling kind {self.kind!r}; "
                f"expected one of {INTERFACE_KINDS}"
            )
        if self.kind in ("membrane_plus", "membrane_minus", "quadratic"):
            if self.permeability < 0:
                raise ValueError("permeability must be nonnegative")


def prox_interface(spec: InterfaceCouplingSpec, x: np.ndarray, mu: float) -> np.ndarray:
    if mu <= 0:
        raise ValueError("prox step must be positive")
    x = np.asarray(x, dtype=float)
    k = spec.kind
    if k == "equality":
        return np.zeros_like(x)
    if k == "cone_plus":
        return np.maximum(x, 0.0)
    if k == "cone_minus":
        return np.minimum(x, 0.0)
    if k == "membrane_plus":
        return np.maximum(x, 0.0) / (1.0 + mu * spec.permeability)
    if k == "membrane_minus":
        return np.minimum(x, 0.0) / (1.0 + mu * spec.permeability)
    # quadratic
    return x / (1.0 + mu * spec.permeability)
