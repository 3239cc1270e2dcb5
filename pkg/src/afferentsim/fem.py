"""Quasi-static plane-strain solver with rigid-indenter contact.

Each time step is an independent linear static solve: the indenter is a
rigid circle whose instantaneous depth prescribes vertical displacements
on the surface nodes it overlaps (frictionless active set); the bottom
boundary is fixed.  Units are mm / MPa internally (1 MPa = 1 N/mm^2);
von Mises traces are exported in Pa because the neural constants are
Pa-based.

Assembly uses 4-node bilinear isoparametric quads with 2x2 Gauss
quadrature.  Factorizations are cached per constrained-DOF set: the
active set takes only a handful of distinct values over a vibration
cycle, so refactorization is rare.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import InvertedElementError, NumericalError, ValidationError
from .mesh import AFFERENT_TYPES, Mesh

# --------------------------------------------------------------------------
# element machinery

_G = 1.0 / np.sqrt(3.0)
# Gauss points ordered like the reference corners (-,-), (+,-), (+,+), (-,+).
GAUSS_POINTS = np.array([[-_G, -_G], [_G, -_G], [_G, _G], [-_G, _G]])
GAUSS_WEIGHTS = np.ones(4)


def shape_functions(xi: float, eta: float) -> np.ndarray:
    return 0.25 * np.array(
        [
            (1 - xi) * (1 - eta),
            (1 + xi) * (1 - eta),
            (1 + xi) * (1 + eta),
            (1 - xi) * (1 + eta),
        ]
    )


def shape_gradients(xi: float, eta: float) -> np.ndarray:
    """(2, 4): rows d/dxi, d/deta."""
    return 0.25 * np.array(
        [
            [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
            [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)],
        ]
    )


_DN = np.stack([shape_gradients(x, e) for x, e in GAUSS_POINTS])  # (4, 2, 4)

# Gauss -> corner extrapolation: bilinear basis anchored at the Gauss points,
# evaluated at the corners (i.e. shape functions at sqrt(3) * corner coords).
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
EXTRAPOLATION = np.stack(
    [shape_functions(np.sqrt(3.0) * x, np.sqrt(3.0) * e) for x, e in _CORNERS]
)  # (4 corners, 4 gauss)


def plane_strain_d(elastic_modulus: float, poisson_ratio: float) -> np.ndarray:
    e, nu = elastic_modulus, poisson_ratio
    c = e / ((1 + nu) * (1 - 2 * nu))
    return c * np.array(
        [
            [1 - nu, nu, 0.0],
            [nu, 1 - nu, 0.0],
            [0.0, 0.0, (1 - 2 * nu) / 2.0],
        ]
    )


def von_mises(stress: np.ndarray) -> np.ndarray:
    """Equivalent stress from [s_xx, s_yy, s_zz, t_xy] along the last axis.

    sqrt(1/2 [(s_xx-s_yy)^2 + (s_yy-s_zz)^2 + (s_zz-s_xx)^2 + 6 t_xy^2]);
    the out-of-plane shears vanish in plane strain.
    """
    s = np.asarray(stress, dtype=float)
    sxx, syy, szz, txy = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    return np.sqrt(
        0.5 * ((sxx - syy) ** 2 + (syy - szz) ** 2 + (szz - sxx) ** 2 + 6.0 * txy**2)
    )


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class IndenterSpec:
    """Rigid circular indenter driven by a displacement trace.

    displacement_trace holds the vibration in mm at step dt_ms; the
    instantaneous depth below the undeformed surface at step k is
    pre_indentation_mm + displacement_trace[k] (negative depth = lifted).
    """

    diameter_mm: float
    center_x_mm: float = 0.0
    pre_indentation_mm: float = 0.0
    displacement_trace: np.ndarray = field(default_factory=lambda: np.zeros(1))
    dt_ms: float = 0.5

    def validate(self) -> None:
        if not self.diameter_mm > 0:
            raise ValidationError(f"diameter_mm must be > 0, got {self.diameter_mm}")
        if not self.dt_ms > 0:
            raise ValidationError(f"dt_ms must be > 0, got {self.dt_ms}")
        trace = np.asarray(self.displacement_trace, dtype=float)
        if trace.ndim != 1 or trace.size == 0:
            raise ValidationError("displacement_trace must be a non-empty 1-D array")
        if not np.isfinite(trace).all():
            raise ValidationError("displacement_trace contains non-finite values")


@dataclass(frozen=True)
class StressTrace:
    """von Mises stress (Pa) at one node, sampled at fixed dt (ms)."""

    afferent_type: str
    node_id: int
    dt_ms: float
    values: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def duration_ms(self) -> float:
        return (self.n_steps - 1) * self.dt_ms

    def to_csv(self, path, provenance: str | None = None) -> None:
        with open(path, "w") as fh:
            fh.write("# afferent,node,dt_ms\n")
            fh.write(f"# {self.afferent_type},{self.node_id},{self.dt_ms!r}\n")
            if provenance:
                fh.write(f"# provenance: {provenance}\n")
            fh.write("t_ms,sigma_pa\n")
            for k, v in enumerate(self.values):
                fh.write(f"{k * self.dt_ms!r},{float(v)!r}\n")

    @classmethod
    def from_csv(cls, path) -> "StressTrace":
        meta = None
        values = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("#"):
                    body = line[1:].strip()
                    if meta is None and not body.startswith(("afferent", "provenance")):
                        meta = body.split(",")
                    continue
                if not line or line.startswith("t_ms"):
                    continue
                values.append(float(line.split(",")[1]))
        if meta is None or len(meta) != 3:
            raise ValidationError(f"{path}: missing '# afferent,node,dt_ms' metadata")
        return cls(
            afferent_type=meta[0],
            node_id=int(meta[1]),
            dt_ms=float(meta[2]),
            values=np.array(values),
        )


@dataclass
class IndentationResult:
    stress_traces: dict[str, StressTrace]
    deflection_x_mm: np.ndarray | None = None
    deflection_mm: np.ndarray | None = None  # (n_steps, n_samples)


# --------------------------------------------------------------------------
# assembly


class StiffnessSystem:
    """Assembled global stiffness plus per-element data for stress recovery."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.ndof = 2 * mesh.n_nodes
        self._factor_cache: dict[tuple, object] = {}
        self._factor_order: list[tuple] = []
        self.max_cached_factors = 64

        d_table = np.stack(
            [plane_strain_d(m.elastic_modulus_mpa, m.poisson_ratio) for m in mesh.materials]
        )
        self.nu_by_element = np.array(
            [mesh.materials[i].poisson_ratio for i in mesh.element_material]
        )
        self.d_by_element = d_table[mesh.element_material]  # (m, 3, 3)

        coords = mesh.nodes[mesh.elements]  # (m, 4, 2)
        m = mesh.n_elements
        self.B = np.empty((m, 4, 3, 8))
        self.detjw = np.empty((m, 4))
        ke = np.zeros((m, 8, 8))
        for g in range(4):
            dn = _DN[g]  # (2, 4)
            jac = np.einsum("rk,mkc->mrc", dn, coords)  # (m, 2, 2)
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            if not (det > 0).all():
                bad = int(np.flatnonzero(det <= 0)[0])
                raise InvertedElementError(
                    f"non-positive Jacobian at Gauss point {g} of element {bad}"
                )
            inv = np.empty_like(jac)
            inv[:, 0, 0] = jac[:, 1, 1]
            inv[:, 0, 1] = -jac[:, 0, 1]
            inv[:, 1, 0] = -jac[:, 1, 0]
            inv[:, 1, 1] = jac[:, 0, 0]
            inv /= det[:, None, None]
            dnxy = np.einsum("mrc,ck->mrk", inv, dn)  # (m, 2, 4)
            b = np.zeros((m, 3, 8))
            b[:, 0, 0::2] = dnxy[:, 0]
            b[:, 1, 1::2] = dnxy[:, 1]
            b[:, 2, 0::2] = dnxy[:, 1]
            b[:, 2, 1::2] = dnxy[:, 0]
            self.B[:, g] = b
            self.detjw[:, g] = det * GAUSS_WEIGHTS[g]
            ke += np.einsum(
                "mji,mjk,mkl,m->mil", b, self.d_by_element, b, self.detjw[:, g]
            )

        edof = np.empty((m, 8), dtype=np.int64)
        edof[:, 0::2] = 2 * mesh.elements
        edof[:, 1::2] = 2 * mesh.elements + 1
        rows = np.repeat(edof, 8, axis=1).ravel()
        cols = np.tile(edof, (1, 8)).ravel()
        self.K = sp.coo_matrix(
            (ke.ravel(), (rows, cols)), shape=(self.ndof, self.ndof)
        ).tocsc()
        self.edof = edof

    def factorization(self, fixed: np.ndarray, free: np.ndarray):
        key = tuple(fixed.tolist())
        hit = self._factor_cache.get(key)
        if hit is not None:
            return hit
        kff = self.K[free][:, free].tocsc()
        try:
            lu = splu(kff)
        except RuntimeError as exc:
            raise NumericalError(
                f"stiffness factorization failed with {len(fixed)} constrained DOFs: {exc}"
            ) from exc
        if len(self._factor_order) >= self.max_cached_factors:
            oldest = self._factor_order.pop(0)
            self._factor_cache.pop(oldest, None)
        self._factor_cache[key] = lu
        self._factor_order.append(key)
        return lu


def assemble_stiffness(mesh: Mesh) -> StiffnessSystem:
    return StiffnessSystem(mesh)


# --------------------------------------------------------------------------
# constraints and solves


def bottom_constraints(mesh: Mesh) -> dict[int, float]:
    """Fix both DOFs of every node on the bottom boundary (the bone)."""
    y_min = mesh.nodes[:, 1].min()
    out: dict[int, float] = {}
    for n in np.flatnonzero(np.abs(mesh.nodes[:, 1] - y_min) < 1e-12):
        out[2 * int(n)] = 0.0
        out[2 * int(n) + 1] = 0.0
    return out


def contact_active_set(
    mesh: Mesh, indenter: IndenterSpec, depth_mm: float
) -> dict[int, float]:
    """Vertical-gap active set against the rigid circle at the given depth.

    Gaps are evaluated on the undeformed surface; every surface node with a
    non-positive gap gets its vertical DOF prescribed to the circle profile
    (horizontal DOF free).  depth < 0 means the indenter is above the
    surface: empty set.
    """
    if depth_mm < 0:
        return {}
    radius = indenter.diameter_mm / 2.0
    xs = mesh.nodes[mesh.surface_nodes, 0] - indenter.center_x_mm
    inside = np.abs(xs) <= radius + 1e-12
    out: dict[int, float] = {}
    for node, x in zip(mesh.surface_nodes[inside], xs[inside]):
        profile = (radius - depth_mm) - np.sqrt(max(radius**2 - x**2, 0.0))
        if profile <= 1e-12:  # gap to the undeformed surface (y = 0)
            out[2 * int(node) + 1] = profile
    return out


def solve_step(
    system: StiffnessSystem,
    constraints: dict[int, float],
    forces: np.ndarray | None = None,
) -> np.ndarray:
    """Solve K u = f with prescribed-displacement elimination.

    Raises NumericalError if the free-DOF residual exceeds 1e-8 relative.
    """
    ndof = system.ndof
    if not constraints:
        raise ValidationError("solve_step needs constraints to remove rigid-body modes")
    fixed = np.fromiter(sorted(constraints), dtype=np.int64)
    vals = np.array([constraints[d] for d in fixed])
    mask = np.ones(ndof, dtype=bool)
    mask[fixed] = False
    free = np.flatnonzero(mask)

    f = np.zeros(ndof) if forces is None else np.asarray(forces, dtype=float)
    u = np.zeros(ndof)
    u[fixed] = vals
    rhs = f[free] - (system.K @ u)[free]

    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm > 0.0:
        lu = system.factorization(fixed, free)
        u[free] = lu.solve(rhs)
        residual = np.linalg.norm((system.K @ u - f)[free])
        if not np.isfinite(residual) or residual > 1e-8 * rhs_norm:
            raise NumericalError(
                f"solve residual {residual:.3e} exceeds 1e-8 relative "
                f"({len(fixed)} constrained DOFs)"
            )
    return u


# --------------------------------------------------------------------------
# stress recovery


def recover_stress(
    system: StiffnessSystem, u: np.ndarray, node_ids: np.ndarray | None = None
) -> np.ndarray:
    """Nodal stress [s_xx, s_yy, s_zz, t_xy] in MPa.

    Gauss-point stresses are extrapolated to element corners with the
    bilinear basis and averaged over all elements sharing each node.  When
    node_ids is given, only elements touching those nodes are visited; the
    element visit order is preserved, so the restricted result is
    bit-identical to the full-field values at the selected nodes.
    """
    mesh = system.mesh
    if node_ids is None:
        elem_idx = np.arange(mesh.n_elements)
        targets = np.arange(mesh.n_nodes)
    else:
        targets = np.asarray(node_ids, dtype=np.int64)
        touching = np.isin(mesh.elements, targets).any(axis=1)
        elem_idx = np.flatnonzero(touching)

    elems = mesh.elements[elem_idx]
    ue = u[system.edof[elem_idx]]  # (me, 8)
    eps = np.einsum("egij,ej->egi", system.B[elem_idx], ue)  # (me, 4, 3)
    sig = np.einsum("eij,egj->egi", system.d_by_element[elem_idx], eps)  # (me, 4, 3)
    szz = system.nu_by_element[elem_idx][:, None] * (sig[..., 0] + sig[..., 1])
    gauss = np.concatenate([sig[..., :2], szz[..., None], sig[..., 2:]], axis=2)
    corner = np.einsum("cg,egk->eck", EXTRAPOLATION, gauss)  # (me, 4, 4)

    sums = np.zeros((mesh.n_nodes, 4))
    counts = np.zeros(mesh.n_nodes)
    np.add.at(sums, elems.ravel(), corner.reshape(-1, 4))
    np.add.at(counts, elems.ravel(), 1.0)
    return sums[targets] / counts[targets, None]


def surface_deflection(
    mesh: Mesh, u: np.ndarray, spacing_mm: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """Downward surface deflection sampled from the center outward (x >= 0)."""
    xs = mesh.nodes[mesh.surface_nodes, 0]
    defl = -u[2 * mesh.surface_nodes + 1]
    half_width = xs.max()
    r = np.arange(0.0, half_width + spacing_mm / 2.0, spacing_mm)
    return r, np.interp(r, xs, defl)


# --------------------------------------------------------------------------
# time stepping


def run_indentation(
    mesh: Mesh,
    indenter: IndenterSpec,
    system: StiffnessSystem | None = None,
    record_deflection: bool = False,
    deflection_spacing_mm: float = 0.5,
) -> IndentationResult:
    """Step the indenter through its displacement trace.

    For each step: place the circle at pre_indentation + trace[k], rebuild
    the active set, solve, and record von Mises stress (Pa) at each afferent
    node.  Steps where nothing is prescribed (indenter lifted) are exactly
    zero and skip the solver.
    """
    indenter.validate()
    if set(mesh.afferent_nodes) != set(AFFERENT_TYPES):
        raise ValidationError(
            f"mesh.afferent_nodes must cover {AFFERENT_TYPES}, "
            f"got {sorted(mesh.afferent_nodes)}"
        )
    if system is None:
        system = assemble_stiffness(mesh)

    trace = np.asarray(indenter.displacement_trace, dtype=float)
    n_steps = trace.size
    afferent_ids = np.array([mesh.afferent_nodes[t] for t in AFFERENT_TYPES])
    vm = np.zeros((n_steps, len(AFFERENT_TYPES)))

    base = bottom_constraints(mesh)
    defl_r = None
    defl = None
    if record_deflection:
        defl_r, probe = surface_deflection(mesh, np.zeros(system.ndof), deflection_spacing_mm)
        defl = np.zeros((n_steps, defl_r.size))

    for k in range(n_steps):
        depth = indenter.pre_indentation_mm + trace[k]
        active = contact_active_set(mesh, indenter, depth)
        if active and any(v != 0.0 for v in active.values()):
            constraints = dict(base)
            constraints.update(active)
            try:
                u = solve_step(system, constraints)
            except NumericalError as exc:
                raise NumericalError(f"step {k} (depth {depth:.6f} mm): {exc}") from exc
            stress = recover_stress(system, u, afferent_ids)
            vm[k] = von_mises(stress)
            if record_deflection:
                defl[k] = surface_deflection(mesh, u, deflection_spacing_mm)[1]
        # else: indenter lifted or exactly grazing -> zero field

    traces = {
        atype: StressTrace(
            afferent_type=atype,
            node_id=int(afferent_ids[i]),
            dt_ms=indenter.dt_ms,
            values=vm[:, i] * 1.0e6,  # MPa -> Pa for the neural stage
        )
        for i, atype in enumerate(AFFERENT_TYPES)
    }
    return IndentationResult(
        stress_traces=traces, deflection_x_mm=defl_r, deflection_mm=defl
    )
