"""Problem wiring: from a partition + problem kind to runnable oracles.

Kinds:

* ``poisson``     quadratic energy per subdomain, equality coupling
* ``plaplacian``  p-Dirichlet energy per subdomain, equality coupling
* ``obstacle``    quadratic energy with a lower-bound obstacle, equality
* ``unilateral``  quadratic energy, one-sided jump cone per interface
* ``membrane``    quadratic energy, semipermeable membrane per interface

Also home to the post-processing helpers: gluing the subdomain fields into
one global nodal field, dual-vs-finite-difference flux reports, and the
obstacle complementarity report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .harmonic import build_lifts, interface_jumps, q_lift
from .linalg import InnerProductSpace
from .mesh import (
    IfaceKey,
    MergedPartition,
    Partition,
    assemble_load,
    gradient_operator,
    merge_partition,
    node_values,
    trace_apply,
)
from .prox import (
    InterfaceCouplingSpec,
    ObstacleSpec,
    plaplacian_spec,
    project_lower_bound,
    prox_interface,
    prox_obstacle,
    prox_plaplacian,
    prox_quadratic,
    quadratic_energy_spec,
)
from .splitting import PrimalDualPoint, ProblemOracles, ProductSpace

KINDS = ("poisson", "plaplacian", "obstacle", "unilateral", "membrane")


@dataclass
class ProblemSpec:
    """Declarative description of one decomposed problem instance.

    ``f`` is a scalar, callable of the coordinates, per-subdomain list of
    nodal arrays, or a single nodal array per subdomain. ``p`` may be a
    float or a per-subdomain list. ``orientations`` maps interface keys to
    +1 (jump >= 0 allowed) or -1; ``permeabilities`` maps keys to the
    membrane constant.
    """

    partition: Partition
    kind: str
    f: object = 0.0
    p: object = 2.0
    obstacle: object = None
    orientations: dict[IfaceKey, int] = field(default_factory=dict)
    permeabilities: dict[IfaceKey, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}; expected one of {KINDS}")
        for key, val in self.orientations.items():
            if val not in (1, -1):
                raise ValueError(f"orientation for interface {key} must be +1 or -1")
        for key, val in self.permeabilities.items():
            if val < 0:
                raise ValueError(f"permeability for interface {key} must be nonnegative")

    def f_for(self, i: int):
        if isinstance(self.f, (list, tuple)):
            return self.f[i]
        return self.f

    def p_for(self, i: int) -> float:
        if isinstance(self.p, (list, tuple)):
            return float(self.p[i])
        return float(self.p)


def _dual_spec(spec: ProblemSpec, key: IfaceKey) -> InterfaceCouplingSpec:
    if spec.kind in ("poisson", "plaplacian", "obstacle"):
        return InterfaceCouplingSpec(kind="equality")
    eps = spec.orientations.get(key, 1)
    if spec.kind == "unilateral":
        return InterfaceCouplingSpec(kind="cone_plus" if eps == 1 else "cone_minus")
    kappa = spec.permeabilities.get(key, 1.0)
    return InterfaceCouplingSpec(
        kind="membrane_plus" if eps == 1 else "membrane_minus",
        permeability=kappa,
    )


def build(spec: ProblemSpec, pool=None) -> tuple[ProblemOracles, PrimalDualPoint]:
    """Assemble lifts, loads and prox closures; returns (oracles, x0 = 0)."""
    part = spec.partition
    lifts = build_lifts(part)
    loads = [
        assemble_load(grid, spec.f_for(i)) for i, grid in enumerate(part.subdomains)
    ]

    prox_primal = []
    quad_specs = []
    meta: dict = {"kind": spec.kind, "spec": spec, "quad_specs": quad_specs}
    if spec.kind in ("poisson", "unilateral", "membrane"):
        for i in range(part.m):
            qs = quadratic_energy_spec(lifts[i], loads[i])
            quad_specs.append(qs)
            prox_primal.append(
                lambda v, gamma, qs=qs: prox_quadratic(qs, v, gamma)
            )
    elif spec.kind == "obstacle":
        if spec.obstacle is None:
            raise ValueError("obstacle problems need an obstacle field")
        lowers = []
        for i, grid in enumerate(part.subdomains):
            qs = quadratic_energy_spec(lifts[i], loads[i])
            quad_specs.append(qs)
            lower = node_values(grid, spec.obstacle)[~grid.dirichlet]
            lowers.append(lower)
            ospec = ObstacleSpec(quad=qs, lower=lower)
            prox_primal.append(
                lambda v, gamma, ospec=ospec: prox_obstacle(ospec, v, gamma)
            )
        meta["lowers"] = lowers
    elif spec.kind == "plaplacian":
        pspecs = []
        for i, grid in enumerate(part.subdomains):
            ps = plaplacian_spec(
                lifts[i], gradient_operator(grid), loads[i], spec.p_for(i)
            )
            pspecs.append(ps)
            prox_primal.append(
                lambda v, gamma, ps=ps: prox_plaplacian(ps, v, gamma)
            )
        meta["plap_specs"] = pspecs

    keys = part.keys
    dual_specs = [_dual_spec(spec, k) for k in keys]
    meta["dual_specs"] = dual_specs
    prox_dual = [
        (lambda x, mu, ds=ds: prox_interface(ds, x, mu)) for ds in dual_specs
    ]

    space = ProductSpace(
        energy=[InnerProductSpace(lift.gram) for lift in lifts],
        iface_weights=[part.interfaces[k].weights for k in keys],
        keys=keys,
    )
    oracles = ProblemOracles(
        partition=part,
        lifts=lifts,
        space=space,
        prox_primal=prox_primal,
        prox_dual=prox_dual,
        loads=loads,
        load_lifts=[lift.solve(load) for lift, load in zip(lifts, loads)],
        kind=spec.kind,
        meta=meta,
        pool=pool,
    )
    return oracles, space.zeros()


def efficient_primal_update(
    oracles: ProblemOracles,
    i: int,
    u_i: np.ndarray,
    gamma: float,
    duals: dict[IfaceKey, np.ndarray],
) -> np.ndarray:
    """Single-solve primal update for quadratic kinds:

        p_i = u_i/(1+gamma) + gamma/(1+gamma) * Q_i(f, (-g_ij), (-g_ji)),

    algebraically equal to prox after the separate adjoint step, one lift
    solve cheaper when load lifts are not cached. Obstacle kinds compose the
    same update with the energy projection.
    """
    if oracles.kind == "plaplacian":
        raise ValueError("the one-solve update only applies to quadratic energies")
    lift = oracles.lifts[i]
    plus = {j: -np.asarray(duals[(i, j)], dtype=float) for j in sorted(lift.plus)}
    minus = {j: -np.asarray(duals[(j, i)], dtype=float) for j in sorted(lift.minus)}
    lifted = q_lift(lift, oracles.loads[i], plus, minus)
    base = u_i / (1.0 + gamma) + (gamma / (1.0 + gamma)) * lifted
    if oracles.kind == "obstacle":
        return project_lower_bound(lift.gram, base, oracles.meta["lowers"][i])
    return base


@dataclass
class GluedSolution:
    """Global nodal field reassembled from the subdomain pieces."""

    merged: MergedPartition
    values: np.ndarray                    # one value per global node
    duals: dict[IfaceKey, np.ndarray]
    max_jump: float

    def free_values(self) -> np.ndarray:
        grid = self.merged.grid
        return self.values[~grid.dirichlet]


def glue(partition: Partition, point: PrimalDualPoint) -> GluedSolution:
    """Average the subdomain fields onto the merged global grid.

    Interface nodes receive the mean of the two sides; the max interface
    jump is reported alongside so callers can judge the averaging error.
    """
    merged = merge_partition(partition)
    n_glob = merged.grid.n_nodes
    acc = np.zeros(n_glob)
    cnt = np.zeros(n_glob)
    for i, grid in enumerate(partition.subdomains):
        nm = merged.node_maps[i]
        for ell in range(grid.n_nodes):
            d = grid.dof_index[ell]
            acc[nm[ell]] += point.primal[i][d] if d >= 0 else 0.0
            cnt[nm[ell]] += 1.0
    values = acc / cnt
    values[merged.grid.dirichlet] = 0.0

    jumps = interface_jumps(partition, point.primal)
    max_jump = max(
        (float(np.max(np.abs(j))) for j in jumps.values() if len(j)), default=0.0
    )
    duals = {
        k: point.dual[idx].copy() for idx, k in enumerate(partition.keys)
    }
    return GluedSolution(merged=merged, values=values, duals=duals, max_jump=max_jump)


@dataclass
class FluxEntry:
    key: IfaceKey
    dual: np.ndarray
    fd_estimate: np.ndarray
    max_abs_diff: float


@dataclass
class DualFluxReport:
    entries: list[FluxEntry]

    @property
    def max_abs_diff(self) -> float:
        return max((e.max_abs_diff for e in self.entries), default=0.0)


def dual_flux_report(
    partition: Partition,
    point: PrimalDualPoint,
    glued: GluedSolution | None = None,
) -> DualFluxReport:
    """Compare converged duals with one-sided normal-derivative estimates.

    The dual on interface (i, j) approximates the outward normal derivative
    seen from subdomain j (normal -x for these geometries), estimated here by
    the first finite-difference column of the glued field inside j. The
    estimate is O(h) accurate, so this is a consistency check, not a tight
    equality.
    """
    if glued is None:
        glued = glue(partition, point)
    entries = []
    for idx, key in enumerate(partition.keys):
        i, j = key
        grid = partition.subdomains[j]
        iface_nodes = grid.interface_nodes[key]
        fd = np.zeros(len(iface_nodes))
        nm = glued.merged.node_maps[j]
        for r, node in enumerate(iface_nodes):
            if grid.dim == 1:
                neighbor = node + 1
            else:
                neighbor = node + 1          # next column, same row (x-fastest ids)
            dx = grid.nodes[neighbor, 0] - grid.nodes[node, 0]
            u0 = glued.values[nm[node]]
            u1 = glued.values[nm[neighbor]]
            fd[r] = -(u1 - u0) / dx
        dual = point.dual[idx]
        entries.append(
            FluxEntry(
                key=key,
                dual=dual.copy(),
                fd_estimate=fd,
                max_abs_diff=float(np.max(np.abs(dual - fd))) if len(fd) else 0.0,
            )
        )
    return DualFluxReport(entries=entries)


def stationarity_residual(
    oracles: ProblemOracles, point: PrimalDualPoint
) -> list[np.ndarray]:
    """Per-subdomain r_i = G_i u_i + (signed interface tractions) - b_i.

    Zero at a Kuhn-Tucker point for quadratic kinds; equals the obstacle
    multiplier for obstacle runs.
    """
    part = oracles.partition
    keys = part.keys
    out = []
    for i, lift in enumerate(oracles.lifts):
        r = lift.gram.matrix @ point.primal[i] - oracles.loads[i]
        for idx, key in enumerate(keys):
            a, b = key
            g = point.dual[idx]
            w = part.interfaces[key].weights
            if a == i:
                r = r + part.trace(i, b).matrix.T @ (w * g)
            elif b == i:
                r = r - part.trace(i, a).matrix.T @ (w * g)
        out.append(r)
    return out


@dataclass
class ComplementarityReport:
    min_multiplier: float      # most negative multiplier entry (want >= -tol)
    max_infeasibility: float   # max of (h - u)_+ (want <= tol)
    max_violation: float       # max |min(u - h, multiplier)| (want <= tol)


def complementarity_report(
    oracles: ProblemOracles, point: PrimalDualPoint
) -> ComplementarityReport:
    """Nodal obstacle Kuhn-Tucker check at the converged point."""
    if oracles.kind != "obstacle":
        raise ValueError("complementarity report only applies to obstacle runs")
    resid = stationarity_residual(oracles, point)
    min_mult = 0.0
    max_infeas = 0.0
    max_viol = 0.0
    for i in range(oracles.partition.m):
        gap = point.primal[i] - oracles.meta["lowers"][i]
        lam = resid[i]
        min_mult = min(min_mult, float(lam.min()) if len(lam) else 0.0)
        if len(gap):
            max_infeas = max(max_infeas, float(np.max(np.maximum(-gap, 0.0))))
            max_viol = max(max_viol, float(np.max(np.abs(np.minimum(gap, lam)))))
    return ComplementarityReport(
        min_multiplier=min_mult,
        max_infeasibility=max_infeas,
        max_violation=max_viol,
    )
