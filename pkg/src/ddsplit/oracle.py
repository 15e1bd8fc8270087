"""Independent reference solvers and Kuhn-Tucker point recovery.

Nothing in here calls the splitting engine. Monolithic solvers work on the
merged global grid; the duals of the decomposed problem are then recovered
from per-subdomain stationarity residuals and the assembled pair is verified
against the KT system before any test trusts it.

The obstacle and p-Laplacian solvers deliberately re-implement their
iteration loops (active set resp. damped Newton) rather than reusing the
prox module's, so the acceptance comparisons cross-check two independently
written code paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .linalg import SolverFailure, SpdFactorization, SparseSpd
from .mesh import (
    MergedPartition,
    SubdomainGrid,
    assemble_load,
    assemble_stiffness,
    gradient_operator,
    merge_partition,
    node_values,
)
from .prox import PLAPLACIAN_DELTA
from .problems import ProblemSpec, stationarity_residual
from .splitting import PrimalDualPoint, ProblemOracles


class OracleError(RuntimeError):
    """A reference computation failed its own verification."""


# --- monolithic solvers -------------------------------------------------------


def monolithic_poisson(grid: SubdomainGrid, f) -> np.ndarray:
    """Direct P1 solve of -Laplace(u) = f with homogeneous Dirichlet data."""
    K = assemble_stiffness(grid)
    b = assemble_load(grid, f)
    return SpdFactorization(K).solve(b)


def monolithic_obstacle(grid: SubdomainGrid, f, lower) -> np.ndarray:
    """Global obstacle QP min 1/2 u'Ku - b'u s.t. u >= lower, by an
    active-set loop written independently of the prox module."""
    K = assemble_stiffness(grid).matrix
    b = assemble_load(grid, f)
    h = node_values(grid, lower)[~grid.dirichlet]
    n = len(b)
    active = np.zeros(n, dtype=bool)
    for _ in range(100):
        w = np.empty(n)
        w[active] = h[active]
        inactive = ~active
        if inactive.any():
            kii = K[inactive][:, inactive]
            rhs = b[inactive] - K[inactive][:, active] @ h[active]
            w[inactive] = spla.spsolve(kii.tocsc(), rhs) if kii.shape[0] > 1 else rhs / kii.toarray()[0, 0]
        lam = K @ w - b
        next_active = (lam + (h - w)) > 0.0
        if np.array_equal(next_active, active):
            return w
        active = next_active
    raise OracleError("monolithic obstacle active-set loop did not settle")


def _p_residual(gradop, w, p, delta, load):
    gs = gradop.gradients(w)
    sq = delta + sum(g * g for g in gs)
    c1 = gradop.vols * sq ** ((p - 2.0) / 2.0)
    r = -load.copy()
    for d, D in enumerate(gradop.comps):
        r += D.T @ (c1 * gs[d])
    return r, gs, sq, c1


def monolithic_plaplacian(
    grid: SubdomainGrid, f, p: float, delta: float | None = None
) -> np.ndarray:
    """Damped Newton with p-continuation for the smoothed p-Dirichlet energy

        min_u (1/p) sum_e vol_e (|grad u|_e^2 + delta)^{p/2} - <b, u>.

    Continuation walks p from 2 to the target so the initial Hessian is
    never the singular zero-gradient one.
    """
    if p <= 1.0:
        raise ValueError(f"p must exceed 1, got {p}")
    if delta is None:
        delta = PLAPLACIAN_DELTA if p < 2.0 else 0.0
    K = assemble_stiffness(grid)
    b = assemble_load(grid, f)
    gradop = gradient_operator(grid)
    u = SpdFactorization(K).solve(b)          # p = 2 start
    scale = 1.0 + float(np.linalg.norm(b))

    if p == 2.0 and delta == 0.0:
        return u

    stages = [2.0 + (p - 2.0) * t for t in (0.25, 0.5, 0.75, 1.0)] if p != 2.0 else [2.0]
    for pk in stages:
        tol = 1e-12 * scale if pk == stages[-1] else 1e-8 * scale

        def value(w, pk=pk):
            gsw = gradop.gradients(w)
            sqw = delta + sum(g * g for g in gsw)
            return float(np.sum(gradop.vols * sqw ** (pk / 2.0)) / pk - b @ w)

        converged = False
        for _ in range(200):
            r, gs, sq, c1 = _p_residual(gradop, u, pk, delta, b)
            gnorm = float(np.linalg.norm(r))
            if gnorm <= tol:
                converged = True
                break
            c2 = gradop.vols * (pk - 2.0) * sq ** ((pk - 4.0) / 2.0)
            H = None
            for a, Da in enumerate(gradop.comps):
                for bb, Db in enumerate(gradop.comps):
                    diag = c2 * gs[a] * gs[bb]
                    if a == bb:
                        diag = diag + c1
                    block = Da.T @ sp.diags(diag) @ Db
                    H = block if H is None else H + block
            H = ((H + H.T) * 0.5).tocsc()
            sigma = 0.0
            d = None
            for _lev in range(10):
                try:
                    mat = H if sigma == 0.0 else (
                        H + sigma * sp.identity(H.shape[0], format="csc")
                    )
                    cand = spla.spsolve(mat, -r)
                except RuntimeError:
                    cand = np.array([np.nan])
                if np.all(np.isfinite(cand)) and float(r @ cand) < 0.0:
                    d = cand
                    break
                sigma = max(10.0 * sigma, 1e-10 * float(np.max(H.diagonal())))
            if d is None:
                break
            F0 = value(u)
            slope = float(r @ d)
            step = 1.0
            stepped = False
            for _bt in range(60):
                if value(u + step * d) <= F0 + 1e-4 * step * slope:
                    u = u + step * d
                    stepped = True
                    break
                step *= 0.5
            if not stepped:
                break
        if not converged:
            # A stall with an already-tiny gradient is acceptable on
            # intermediate continuation stages; the final stage must meet tol.
            r, *_ = _p_residual(gradop, u, pk, delta, b)
            if float(np.linalg.norm(r)) > max(tol, 1e-9 * scale):
                raise OracleError(f"p-Laplacian Newton stalled at stage p={pk}")
    return u


def energy_distance(grid: SubdomainGrid, u: np.ndarray, v: np.ndarray) -> float:
    """Stiffness-norm distance of two free-dof fields on the same grid."""
    K = assemble_stiffness(grid).matrix
    d = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    return float(np.sqrt(max(d @ (K @ d), 0.0)))


# --- projection QP oracle -------------------------------------------------------


def qp_project_two_halfspaces(x0, halfspace1, halfspace2, tol: float = 1e-10):
    """Project x0 onto {x: a1.x <= d1} intersect {x: a2.x <= d2}.

    Brute-force active-set enumeration: solve the equality-constrained
    least-distance problem for all four candidate active sets, keep the
    feasible candidates, return the closest one. Raises if the intersection
    is empty (no candidate feasible).
    """
    x0 = np.asarray(x0, dtype=float)
    a1, d1 = np.asarray(halfspace1[0], dtype=float), float(halfspace1[1])
    a2, d2 = np.asarray(halfspace2[0], dtype=float), float(halfspace2[1])
    A = np.vstack([a1, a2])
    d = np.array([d1, d2])
    scale = 1.0 + float(np.linalg.norm(x0)) + float(np.linalg.norm(A))

    candidates = []
    for subset in ((), (0,), (1,), (0, 1)):
        if not subset:
            x = x0.copy()
        else:
            As = A[list(subset)]
            ds = d[list(subset)]
            lam, *_ = np.linalg.lstsq(As @ As.T, As @ x0 - ds, rcond=None)
            x = x0 - As.T @ lam
        if np.all(A @ x <= d + tol * scale):
            candidates.append(x)
    if not candidates:
        raise OracleError("half-space intersection appears empty")
    dists = [float(np.linalg.norm(x - x0)) for x in candidates]
    return candidates[int(np.argmin(dists))]


def haugazeau_reference(x0, xn, xh):
    """Euclidean reference projection for the Haugazeau update: project x0
    onto H(x0, xn) intersect H(xn, xh) with H(a, b) = {x: <x-b, a-b> <= 0}."""
    x0 = np.asarray(x0, dtype=float)
    xn = np.asarray(xn, dtype=float)
    xh = np.asarray(xh, dtype=float)
    a1 = x0 - xn
    a2 = xn - xh
    return qp_project_two_halfspaces(
        x0, (a1, float(a1 @ xn)), (a2, float(a2 @ xh))
    )


# --- Kuhn-Tucker point recovery ---------------------------------------------------


def _merged_source(oracles: ProblemOracles, merged: MergedPartition):
    """Global nodal source array equivalent to the per-subdomain sources."""
    spec: ProblemSpec = oracles.meta["spec"]
    part = oracles.partition
    vals = np.zeros(merged.grid.n_nodes)
    for i, grid in enumerate(part.subdomains):
        local = node_values(grid, spec.f_for(i))
        vals[merged.node_maps[i]] = local
    return vals


def _restrict(oracles: ProblemOracles, merged: MergedPartition, u_glob: np.ndarray):
    out = []
    for i in range(oracles.partition.m):
        dm = merged.dof_maps[i]
        out.append(u_glob[dm])
    return out


def _recover_duals(
    oracles: ProblemOracles, residuals: list[np.ndarray]
) -> list[np.ndarray]:
    """Duals from the designated (left) side's stationarity rows.

    residuals[i] must hold (energy operator applied to u_i) - b_i - lambda_i;
    on interface (i,j) the left side's row reads  resid + weight * g = 0.
    Pinned interface nodes keep g = 0.
    """
    part = oracles.partition
    duals = []
    for key in part.keys:
        i, j = key
        grid = part.subdomains[i]
        iface = part.interfaces[key]
        g = np.zeros(iface.n_nodes)
        for r, node in enumerate(grid.interface_nodes[key]):
            dof = grid.dof_index[node]
            if dof >= 0:
                g[r] = -residuals[i][dof] / iface.weights[r]
        duals.append(g)
    return duals


def _quadratic_residuals(oracles, u_subs, multipliers=None):
    out = []
    for i, lift in enumerate(oracles.lifts):
        r = lift.gram.matrix @ u_subs[i] - oracles.loads[i]
        if multipliers is not None:
            r = r - multipliers[i]
        out.append(r)
    return out


def _plap_residuals(oracles, u_subs):
    from .prox import p_energy_parts

    out = []
    for i, ps in enumerate(oracles.meta["plap_specs"]):
        _, grad, _ = p_energy_parts(ps.gradop, u_subs[i], ps.p, ps.delta, want_hessian=False)
        out.append(grad - oracles.loads[i])
    return out


def kt_point(oracles: ProblemOracles, tol: float = 1e-7) -> PrimalDualPoint:
    """Construct and verify a Kuhn-Tucker point of the decomposed problem.

    Quadratic/equality kinds go through the merged monolithic solve;
    unilateral/membrane kinds (1D point interfaces) enumerate the
    tied/open branch per interface. The returned point passes
    :func:`verify_kt_point` at the given tolerance.
    """
    kind = oracles.kind
    part = oracles.partition
    merged = merge_partition(part)
    spec: ProblemSpec = oracles.meta["spec"]

    if kind in ("unilateral", "membrane"):
        point = _variant_kt_point(oracles)
    else:
        source = _merged_source(oracles, merged)
        if kind == "poisson":
            u_glob = monolithic_poisson(merged.grid, source)
            u_subs = _restrict(oracles, merged, u_glob)
            residuals = _quadratic_residuals(oracles, u_subs)
        elif kind == "obstacle":
            u_glob = monolithic_obstacle(merged.grid, source, spec.obstacle)
            u_subs = _restrict(oracles, merged, u_glob)
            K = assemble_stiffness(merged.grid).matrix
            b = assemble_load(merged.grid, source)
            lam_glob = K @ u_glob - b
            multipliers = _split_multiplier(oracles, merged, lam_glob)
            residuals = _quadratic_residuals(oracles, u_subs, multipliers)
        elif kind == "plaplacian":
            ps = {float(spec.p_for(i)) for i in range(part.m)}
            if len(ps) != 1:
                raise NotImplementedError(
                    "the monolithic oracle only covers a uniform exponent"
                )
            u_glob = monolithic_plaplacian(merged.grid, source, ps.pop())
            u_subs = _restrict(oracles, merged, u_glob)
            residuals = _plap_residuals(oracles, u_subs)
        else:
            raise ValueError(f"no oracle for kind {kind!r}")
        duals = _recover_duals(oracles, residuals)
        point = oracles.space.point(u_subs, duals)

    worst = verify_kt_point(oracles, point)
    if worst > tol:
        raise OracleError(
            f"recovered point violates the KT system by {worst:.3e} (tol {tol:g})"
        )
    return point


def _split_multiplier(oracles, merged, lam_glob):
    """Share the global obstacle multiplier between subdomains: interface
    nodes get half per side, interior nodes their full value."""
    part = oracles.partition
    counts = np.zeros(merged.grid.n_dofs)
    for i, grid in enumerate(part.subdomains):
        dm = merged.dof_maps[i]
        for d in range(grid.n_dofs):
            counts[dm[d]] += 1.0
    multipliers = []
    for i, grid in enumerate(part.subdomains):
        dm = merged.dof_maps[i]
        multipliers.append(lam_glob[dm] / counts[dm])
    return multipliers


def _variant_kt_point(oracles: ProblemOracles) -> PrimalDualPoint:
    """Tied/open branch enumeration for 1D unilateral and membrane couplings."""
    part = oracles.partition
    spec: ProblemSpec = oracles.meta["spec"]
    keys = part.keys
    if any(grid.dim != 1 for grid in part.subdomains):
        raise NotImplementedError("variant enumeration covers 1D partitions")
    if any(part.interfaces[k].n_nodes != 1 for k in keys):
        raise NotImplementedError("variant enumeration expects point interfaces")

    offsets = np.cumsum([0] + [lift.n_dofs for lift in oracles.lifts])
    n_total = offsets[-1]

    def iface_dof(i, key):
        grid = part.subdomains[i]
        node = grid.interface_nodes[key][0]
        return offsets[i] + grid.dof_index[node]

    tol = 1e-9
    for branches in product(("tied", "open"), repeat=len(keys)):
        # Union columns of tied interfaces via representative mapping.
        col = np.arange(n_total)
        for k_idx, key in enumerate(keys):
            if branches[k_idx] == "tied":
                i, j = key
                di, dj = iface_dof(i, key), iface_dof(j, key)
                root = min(col[di], col[dj])
                col[col == col[di]] = root
                col[col == col[dj]] = root
        uniq, colmap = np.unique(col, return_inverse=True)
        n_red = len(uniq)
        A = np.zeros((n_red, n_red))
        rhs = np.zeros(n_red)
        for i, lift in enumerate(oracles.lifts):
            gi = lift.gram.dense()
            idx = colmap[offsets[i]: offsets[i + 1]]
            A[np.ix_(idx, idx)] += gi
            np.add.at(rhs, idx, oracles.loads[i])
        for k_idx, key in enumerate(keys):
            if branches[k_idx] == "open" and spec.kind == "membrane":
                kappa = spec.permeabilities.get(key, 1.0)
                i, j = key
                di = colmap[iface_dof(i, key)]
                dj = colmap[iface_dof(j, key)]
                A[di, di] += kappa
                A[dj, dj] += kappa
                A[di, dj] -= kappa
                A[dj, di] -= kappa
        try:
            u_red = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            continue
        u_subs = [u_red[colmap[offsets[i]: offsets[i + 1]]] for i in range(part.m)]

        # Duals per interface and branch admissibility.
        ok = True
        duals = []
        for k_idx, key in enumerate(keys):
            i, j = key
            eps = spec.orientations.get(key, 1)
            ui = u_subs[i][part.subdomains[i].dof_index[part.subdomains[i].interface_nodes[key][0]]]
            uj = u_subs[j][part.subdomains[j].dof_index[part.subdomains[j].interface_nodes[key][0]]]
            jump = ui - uj
            if branches[k_idx] == "tied":
                r = oracles.lifts[i].gram.matrix @ u_subs[i] - oracles.loads[i]
                d_i = part.subdomains[i].dof_index[part.subdomains[i].interface_nodes[key][0]]
                g = -float(r[d_i]) / part.interfaces[key].weights[0]
                if eps * g > tol:
                    ok = False
                    break
            else:
                if eps * jump < -tol:
                    ok = False
                    break
                if spec.kind == "membrane":
                    g = spec.permeabilities.get(key, 1.0) * jump
                else:
                    g = 0.0
            duals.append(np.array([g]))
        if not ok:
            continue
        return oracles.space.point(u_subs, duals)
    raise OracleError("no tied/open branch assignment satisfies the KT conditions")


def verify_kt_point(oracles: ProblemOracles, point: PrimalDualPoint) -> float:
    """Largest scaled violation of the KT system at a candidate point.

    Covers subdomain stationarity (with the obstacle multiplier where it
    applies) and the interface coupling conditions of the problem kind.
    """
    from .harmonic import interface_jumps

    part = oracles.partition
    spec: ProblemSpec = oracles.meta["spec"]
    kind = oracles.kind
    worst = 0.0

    if kind == "plaplacian":
        base = _plap_residuals(oracles, point.primal)
        resid = []
        for i in range(part.m):
            r = base[i].copy()
            for idx, key in enumerate(part.keys):
                a, b = key
                g = point.dual[idx]
                w = part.interfaces[key].weights
                if a == i:
                    r += part.trace(i, b).matrix.T @ (w * g)
                elif b == i:
                    r -= part.trace(i, a).matrix.T @ (w * g)
            resid.append(r)
    else:
        resid = stationarity_residual(oracles, point)

    for i, r in enumerate(resid):
        scale = 1.0 + float(np.max(np.abs(oracles.loads[i]), initial=0.0)) + float(
            np.max(np.abs(oracles.lifts[i].gram.matrix @ point.primal[i]), initial=0.0)
        )
        if kind == "obstacle":
            lam = r
            gap = point.primal[i] - oracles.meta["lowers"][i]
            worst = max(worst, float(np.max(-lam, initial=0.0)) / scale)
            worst = max(worst, float(np.max(-gap, initial=0.0)) / scale)
            worst = max(
                worst,
                float(np.max(np.abs(np.minimum(gap, lam)), initial=0.0)) / scale,
            )
        else:
            worst = max(worst, float(np.max(np.abs(r), initial=0.0)) / scale)

    jumps = interface_jumps(part, point.primal)
    for idx, key in enumerate(part.keys):
        jump = jumps[key]
        g = point.dual[idx]
        scale = 1.0 + float(np.max(np.abs(g), initial=0.0)) + float(
            np.max(np.abs(jump), initial=0.0)
        )
        if kind in ("poisson", "plaplacian", "obstacle"):
            worst = max(worst, float(np.max(np.abs(jump), initial=0.0)) / scale)
        else:
            eps = spec.orientations.get(key, 1)
            worst = max(worst, float(np.max(-eps * jump, initial=0.0)) / scale)
            if kind == "unilateral":
                worst = max(worst, float(np.max(eps * g, initial=0.0)) / scale)
                worst = max(worst, float(np.max(np.abs(g * jump), initial=0.0)) / scale)
            else:
                kappa = spec.permeabilities.get(key, 1.0)
                open_part = np.where(eps * jump > 1e-12 * scale)
                law = g[open_part] - kappa * jump[open_part]
                worst = max(worst, float(np.max(np.abs(law), initial=0.0)) / scale)
                closed = np.where(eps * jump <= 1e-12 * scale)
                worst = max(worst, float(np.max(eps * g[closed], initial=0.0)) / scale)
    return worst
