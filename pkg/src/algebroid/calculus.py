"""Pointwise tensor calculus for anchored bundles and Lie algebroids with
connections: compatibility tensor (frame and covariant forms), connection and
induced-connection curvatures, Killing residuals in both formulations,
generalized Riemannian / symplectic / Poisson residuals, the Koszul
perturbation test, and the covariantly-constant-frame probe.

Index conventions used throughout (all arrays numpy, all evaluations at a
single chart point):

    rho[a, i]          anchor components rho_a^i
    drho[a, i, j]      d_j rho_a^i
    C[a, b, c]         structure functions, [e_a, e_b] = C[a,b,c] e_c
    omega[a, b, i]     connection forms, nabla e_a = omega[a,b,i] dx^i (x) e_b
    g[i, j], dg[i,j,k] metric and d_k g_{ij}
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exprjet import eval_jet
from .spec_model import (
    AlgebroidSpec, CheckReport, report_from_residuals,
    eval_anchor, eval_connection, eval_metric, eval_psi, eval_structure,
    eval_symplectic, eval_poisson, eval_two_form, _require_lie,
)

__all__ = [
    "TensorSample", "GeneralizedResiduals", "FrameSamples",
    "SingularMetricError", "FlatnessGateError",
    "christoffel", "a_torsion", "connection_curvature",
    "compatibility_tensor_frame", "compatibility_tensor_covariant",
    "killing_residual_frame", "killing_residual_sym", "dual_a_connection",
    "a_curvature", "tau_intertwine_check", "generalized_residuals",
    "structure_residual", "symplectic_closedness_residual",
    "koszul_delta_check", "flat_frame_probe",
]


class SingularMetricError(Exception):
    """Metric failed the leading-minor positivity test at a point."""


class FlatnessGateError(Exception):
    """Connection curvature exceeds the flatness gate for frame transport."""


@dataclass(frozen=True)
class TensorSample:
    """Dense components of one evaluated tensor with typed index slots.

    Slot tags: 'frame_up', 'frame_down', 'coord_up', 'coord_down'.
    """

    signature: tuple[str, ...]
    components: np.ndarray
    point: tuple[float, ...]

    def __post_init__(self):
        if self.components.ndim != len(self.signature):
            raise ValueError("component array rank does not match signature")

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.components))) if self.components.size else 0.0


@dataclass(frozen=True)
class GeneralizedResiduals:
    """Symmetric and antisymmetric blocks of the combined bilinear residual,
    one (n, n) sample per frame index; the stated symmetries hold exactly."""

    sym: np.ndarray      # [a, i, j], symmetric in (i, j)
    skew: np.ndarray     # [a, i, j], antisymmetric in (i, j)
    point: tuple[float, ...]

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(self.sym))), float(np.max(np.abs(self.skew))))


def _pt(p) -> tuple[float, ...]:
    return tuple(float(x) for x in np.asarray(p, dtype=float))


# --------------------------------------------------------------------------
# Array-level kernels (shared with the free-algebroid extension)


def lie_derivative_cov2(rho, drho, T, dT):
    """(L_{rho_a} T)_{ij} for a covariant 2-tensor, all frame rows at once."""
    return (np.einsum("ak,ijk->aij", rho, dT)
            + np.einsum("aki,kj->aij", drho, T)
            + np.einsum("akj,ik->aij", drho, T))


def curvature_components(omega, domega):
    """F[a,c,i,j] = F^c_{a,ij} = d_i omega^c_{a,j} - d_j omega^c_{a,i}
    + omega^q_{a,j} omega^c_{q,i} - omega^q_{a,i} omega^c_{q,j}."""
    d1 = np.swapaxes(domega, 2, 3)           # d1[a,c,i,j] = d_i omega^c_{a,j}
    quad = np.einsum("aqj,qci->acij", omega, omega)
    return d1 - np.swapaxes(d1, 2, 3) + quad - np.swapaxes(quad, 2, 3)


def a_torsion_components(rho, omega, C):
    """AT[a,b,c] = rho_a^j omega^c_{b,j} - rho_b^j omega^c_{a,j} - C^c_{ab}."""
    t = np.einsum("aj,bcj->abc", rho, omega)
    return t - t.transpose(1, 0, 2) - C


def s_frame_components(rho, drho, C, dC, omega, domega):
    """S[c,a,b,i] from the local-frame expansion of the splitting curvature."""
    lie = (np.einsum("aj,bcij->cabi", rho, domega)
           + np.einsum("aji,bcj->cabi", drho, omega))
    quad = np.einsum("qj,bcj,aqi->cabi", rho, omega, omega)
    mix = np.einsum("bqi,aqc->cabi", omega, C)
    asym = (lie - lie.transpose(0, 2, 1, 3)
            - (quad - quad.transpose(0, 2, 1, 3))
            + (mix - mix.transpose(0, 2, 1, 3)))
    nabla_bracket = (dC.transpose(2, 0, 1, 3)
                     + np.einsum("abq,qci->cabi", C, omega))
    return asym - nabla_bracket


def s_covariant_components(rho, drho, C, dC, omega, domega):
    """S[c,a,b,i] from the tensorial identity: covariant derivative of the
    A-torsion plus the antisymmetrized anchor-curvature contraction."""
    AT = a_torsion_components(rho, omega, C)
    dAT = (np.einsum("aji,bcj->abci", drho, omega)
           + np.einsum("aj,bcji->abci", rho, domega))
    dAT = dAT - dAT.transpose(1, 0, 2, 3) - dC
    F = curvature_components(omega, domega)
    cov = (dAT.transpose(2, 0, 1, 3)
           + np.einsum("qci,abq->cabi", omega, AT)
           - np.einsum("aqi,qbc->cabi", omega, AT)
           - np.einsum("bqi,aqc->cabi", omega, AT))
    anchor_F = np.einsum("aj,bcji->cabi", rho, F)
    return cov + anchor_F - anchor_F.transpose(0, 2, 1, 3)


def killing_frame_components(rho, drho, g, dg, omega):
    """K[a,i,j] = (L_{rho_a} g)_{ij} - omega^b_{a,i} (i_{rho_b} g)_j
    - omega^b_{a,j} (i_{rho_b} g)_i."""
    lie = lie_derivative_cov2(rho, drho, g, dg)
    rbar = np.einsum("ak,kj->aj", rho, g)
    vee = np.einsum("abi,bj->aij", omega, rbar)
    return lie - vee - np.swapaxes(vee, 1, 2)


def christoffel_components(g, dg):
    minors = [float(np.linalg.det(g[:k, :k])) for k in range(1, g.shape[0] + 1)]
    if min(minors) <= 0.0:
        raise SingularMetricError(f"leading minors not all positive: {minors}")
    ginv = np.linalg.inv(g)
    gamma = 0.5 * (np.einsum("kl,jli->kij", ginv, dg)
                   + np.einsum("kl,ilj->kij", ginv, dg)
                   - np.einsum("kl,ijl->kij", ginv, dg))
    return gamma, ginv


def tau_coefficients(rho, drho, omega):
    """Theta[a,i,j] with tau-nabla_{e_a} d_j = Theta[a,i,j] d_i; equals
    [rho_a, d_j] + rho(nabla_{d_j} e_a) = (-d_j rho_a^i + omega^b_{a,j} rho_b^i) d_i."""
    return -drho + np.einsum("abj,bi->aij", omega, rho)


# --------------------------------------------------------------------------
# Operations on specs


def christoffel(spec: AlgebroidSpec, p) -> TensorSample:
    """Levi-Civita coefficients Gamma^k_{ij} of the spec metric at p."""
    g, dg = eval_metric(spec, p, order=1)
    gamma, _ = christoffel_components(g, dg)
    return TensorSample(("coord_up", "coord_down", "coord_down"), gamma, _pt(p))


def a_torsion(spec: AlgebroidSpec, p) -> TensorSample:
    """A-torsion of nabla_{rho(.)}; components AT^c_{ab}, stored [a,b,c]."""
    _require_lie(spec, "a_torsion")
    rho = eval_anchor(spec, p, order=0)
    omega = eval_connection(spec, p, order=0)
    C = eval_structure(spec, p, order=0)
    return TensorSample(("frame_down", "frame_down", "frame_up"),
                        a_torsion_components(rho, omega, C), _pt(p))


def connection_curvature(spec: AlgebroidSpec, p) -> TensorSample:
    """Curvature F^b_{a,ij} of the connection, stored [a,b,i,j]."""
    omega, domega = eval_connection(spec, p, order=1)
    return TensorSample(("frame_down", "frame_up", "coord_down", "coord_down"),
                        curvature_components(omega, domega), _pt(p))


def _frame_arrays_order1(spec, p):
    rho, drho = eval_anchor(spec, p, order=1)
    C, dC = eval_structure(spec, p, order=1)
    omega, domega = eval_connection(spec, p, order=1)
    return rho, drho, C, dC, omega, domega


def compatibility_tensor_frame(spec: AlgebroidSpec, p) -> TensorSample:
    """Compatibility tensor S^c_{ab,i} by the local-frame formula."""
    _require_lie(spec, "compatibility_tensor_frame")
    S = s_frame_components(*_frame_arrays_order1(spec, p))
    return TensorSample(("frame_up", "frame_down", "frame_down", "coord_down"),
                        S, _pt(p))


def compatibility_tensor_covariant(spec: AlgebroidSpec, p) -> TensorSample:
    """Compatibility tensor S^c_{ab,i} via nabla(AT) plus anchor-curvature."""
    _require_lie(spec, "compatibility_tensor_covariant")
    S = s_covariant_components(*_frame_arrays_order1(spec, p))
    return TensorSample(("frame_up", "frame_down", "frame_down", "coord_down"),
                        S, _pt(p))


def killing_residual_frame(spec: AlgebroidSpec, p) -> TensorSample:
    """Extended Killing equation residual K_{a,ij}, symmetric in (i, j)."""
    rho, drho = eval_anchor(spec, p, order=1)
    g, dg = eval_metric(spec, p, order=1)
    omega = eval_connection(spec, p, order=0)
    K = killing_frame_components(rho, drho, g, dg, omega)
    return TensorSample(("frame_down", "coord_down", "coord_down"), K, _pt(p))


def killing_residual_sym(spec: AlgebroidSpec, p) -> TensorSample:
    """Symmetrized covariant derivative of rho-bar (the metric dual of the
    anchor); vanishing is equivalent to the frame Killing equations."""
    rho, drho = eval_anchor(spec, p, order=1)
    g, dg = eval_metric(spec, p, order=1)
    omega = eval_connection(spec, p, order=0)
    gamma, _ = christoffel_components(g, dg)
    rbar = np.einsum("jk,ak->aj", g, rho)
    drbar = (np.einsum("jki,ak->aji", dg, rho)
             + np.einsum("jk,aki->aji", g, drho))     # d_i rbar_{a,j}
    M = (drbar.transpose(0, 2, 1)                      # [a, i, j]
         - np.einsum("kij,ak->aij", gamma, rbar)
         - np.einsum("abi,bj->aij", omega, rbar))
    sym = 0.5 * (M + M.transpose(0, 2, 1))
    return TensorSample(("frame_down", "coord_down", "coord_down"), sym, _pt(p))


def dual_coefficients(C: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Dual of an A-connection given by coefficients E[a,b,c]."""
    return C + E.transpose(1, 0, 2)


def dual_a_connection(spec: AlgebroidSpec, p) -> TensorSample:
    """Coefficients D^c_{ab} of the dual A-connection [s,s'] + nabla_{rho(s')}s,
    stored [a,b,c].  Asserts reflexivity of the duality and that the dual's
    A-torsion is the exact negative of the original one."""
    _require_lie(spec, "dual_a_connection")
    rho = eval_anchor(spec, p, order=0)
    omega = eval_connection(spec, p, order=0)
    C = eval_structure(spec, p, order=0)
    N = np.einsum("aj,bcj->abc", rho, omega)       # nabla_{rho_a} e_b coefficients
    D = dual_coefficients(C, N)
    # association-safe evaluation keeps both identities exact in floats:
    # C + C^T vanishes entrywise because mirror entries are stored negations
    double_dual = (C + C.transpose(1, 0, 2)) + N
    if not np.array_equal(double_dual, N):
        raise AssertionError("dual A-connection reflexivity violated")
    M = N.transpose(1, 0, 2)
    dual_torsion = C + (M - M.transpose(1, 0, 2))
    original_torsion = (M.transpose(1, 0, 2) - M) - C
    if not np.array_equal(dual_torsion, -original_torsion):
        raise AssertionError("dual A-connection torsion is not the exact opposite")
    return TensorSample(("frame_down", "frame_down", "frame_up"), D, _pt(p))


def a_curvature(spec: AlgebroidSpec, p, which: str) -> TensorSample:
    """A-curvature of an induced A-connection.

    which='alpha': curvature of the dual connection on the bundle itself,
    components R^d_{abc} stored [d,a,b,c].  which='tau': curvature of the
    induced A-connection on coordinate vector fields, components R^i_{ab,j}
    stored [i,a,b,j].  Both vanish whenever the compatibility tensor does.
    """
    _require_lie(spec, "a_curvature")
    if which == "alpha":
        rho, drho = eval_anchor(spec, p, order=1)
        C, dC = eval_structure(spec, p, order=1)
        omega, domega = eval_connection(spec, p, order=1)
        D = C + np.einsum("bj,acj->abc", rho, omega)
        dD = (dC + np.einsum("bji,acj->abci", drho, omega)
              + np.einsum("bj,acji->abci", rho, domega))
        rhoD = np.einsum("ai,bcdi->abcd", rho, dD)
        R = (rhoD - rhoD.transpose(1, 0, 2, 3)
             + np.einsum("bce,aed->abcd", D, D)
             - np.einsum("ace,bed->abcd", D, D)
             - np.einsum("abe,ecd->abcd", C, D))
        return TensorSample(("frame_up", "frame_down", "frame_down", "frame_down"),
                            R.transpose(3, 0, 1, 2), _pt(p))
    if which == "tau":
        rho, drho, d2rho = eval_anchor(spec, p, order=2)
        C = eval_structure(spec, p, order=0)
        omega, domega = eval_connection(spec, p, order=1)
        theta = tau_coefficients(rho, drho, omega)
        dtheta = (-d2rho + np.einsum("abjk,bi->aijk", domega, rho)
                  + np.einsum("abj,bik->aijk", omega, drho))
        rho_theta = np.einsum("ak,bijk->abij", rho, dtheta)
        R = (rho_theta - rho_theta.transpose(1, 0, 2, 3)
             + np.einsum("bkj,aik->abij", theta, theta)
             - np.einsum("akj,bik->abij", theta, theta)
             - np.einsum("abe,eij->abij", C, theta))
        return TensorSample(("coord_up", "frame_down", "frame_down", "coord_down"),
                            R.transpose(2, 0, 1, 3), _pt(p))
    raise ValueError(f"which must be 'alpha' or 'tau', got {which!r}")


def tau_intertwine_residual(spec: AlgebroidSpec, p) -> float:
    """max |(tau-nabla_{e_a} rho(e_b))^i - rho(alpha-nabla_{e_a} e_b)^i|."""
    rho, drho = eval_anchor(spec, p, order=1)
    C = eval_structure(spec, p, order=0)
    omega = eval_connection(spec, p, order=0)
    bracket = np.einsum("aj,bij->abi", rho, drho)
    bracket = bracket - bracket.transpose(1, 0, 2)
    lhs = bracket + np.einsum("bj,acj,ci->abi", rho, omega, rho)
    D = C + np.einsum("bj,acj->abc", rho, omega)
    rhs = np.einsum("abc,ci->abi", D, rho)
    return float(np.max(np.abs(lhs - rhs)))


def tau_intertwine_check(spec: AlgebroidSpec, points,
                         tolerance: float = 1e-10) -> CheckReport:
    _require_lie(spec, "tau_intertwine_check")
    residuals = [tau_intertwine_residual(spec, p) for p in points]
    return report_from_residuals("tau_intertwine", residuals, points, tolerance)


def generalized_residuals(spec: AlgebroidSpec, p) -> GeneralizedResiduals:
    """Residuals of the coupled compatibility equations for Phi = g + B with
    the endomorphism-valued 1-form psi (absent psi is treated as zero)."""
    if spec.metric is None or spec.two_form is None:
        raise ValueError("generalized residuals need both metric and two_form")
    rho, drho = eval_anchor(spec, p, order=1)
    g, dg = eval_metric(spec, p, order=1)
    B, dB = eval_two_form(spec, p, order=1)
    omega = eval_connection(spec, p, order=0)
    n = spec.dimension
    psi = eval_psi(spec, p, order=0) if spec.psi is not None \
        else np.zeros((spec.rank, spec.rank, n))

    rbar_g = np.einsum("ak,kj->aj", rho, g)
    rbar_B = np.einsum("ak,kj->aj", rho, B)

    sym = killing_frame_components(rho, drho, g, dg, omega)
    psi_vee = np.einsum("abi,bj->aij", psi, rbar_B)
    sym = sym - (psi_vee + np.swapaxes(psi_vee, 1, 2))

    lie_B = lie_derivative_cov2(rho, drho, B, dB)
    om_wedge = np.einsum("abi,bj->aij", omega, rbar_B)
    psi_wedge = np.einsum("abi,bj->aij", psi, rbar_g)
    skew = (lie_B - (om_wedge - np.swapaxes(om_wedge, 1, 2))
            - (psi_wedge - np.swapaxes(psi_wedge, 1, 2)))
    return GeneralizedResiduals(sym=sym, skew=skew, point=_pt(p))


def symplectic_closedness_residual(spec: AlgebroidSpec, p) -> float:
    """max |d_{[i} Omega_{jk]}| (identically zero for n = 2)."""
    _, dOm = eval_symplectic(spec, p, order=1)
    t = dOm.transpose(2, 0, 1)             # t[i,j,k] = d_i Omega_{jk}
    dOmega = t + t.transpose(1, 2, 0) + t.transpose(2, 0, 1)
    return float(np.max(np.abs(dOmega)))


def structure_residual(spec: AlgebroidSpec, p, kind: str) -> TensorSample:
    """tau-nabla residual of the symplectic form (covariant slots) or the
    Poisson bivector (contravariant slots, left/right contraction placement)."""
    rho, drho = eval_anchor(spec, p, order=1)
    omega = eval_connection(spec, p, order=0)
    if kind == "symplectic":
        Om, dOm = eval_symplectic(spec, p, order=1)
        lie = lie_derivative_cov2(rho, drho, Om, dOm)
        iota = np.einsum("bk,kj->bj", rho, Om)
        wedge = np.einsum("abi,bj->aij", omega, iota)
        res = lie - (wedge - np.swapaxes(wedge, 1, 2))
        return TensorSample(("frame_down", "coord_down", "coord_down"), res, _pt(p))
    if kind == "poisson":
        P, dP = eval_poisson(spec, p, order=1)
        lie = (np.einsum("ak,ijk->aij", rho, dP)
               - np.einsum("aik,kj->aij", drho, P)
               - np.einsum("ajk,ik->aij", drho, P))
        left = np.einsum("bi,abk,kj->aij", rho, omega, P)
        right = np.einsum("ik,abk,bj->aij", P, omega, rho)
        return TensorSample(("frame_down", "coord_up", "coord_up"),
                            lie + left + right, _pt(p))
    raise ValueError(f"kind must be 'symplectic' or 'poisson', got {kind!r}")


def koszul_delta_residual(spec: AlgebroidSpec, psi_candidate, p) -> float:
    """Koszul obstruction for perturbing the connection by psi: symmetrized
    contraction of psi against the metric dual of the anchor."""
    if spec.metric is None:
        raise ValueError("Koszul delta test needs a metric")
    r, n = spec.rank, spec.dimension
    if (len(psi_candidate) != r or any(len(row) != r for row in psi_candidate)
            or any(len(row[b]) != n for row in psi_candidate for b in range(r))):
        raise ValueError(f"psi candidate must have shape ({r}, {r}, {n})")
    rho = eval_anchor(spec, p, order=0)
    g = eval_metric(spec, p, order=0)
    rbar = np.einsum("ak,kj->aj", rho, g)
    psi = np.zeros((r, r, n))
    for a in range(r):
        for b in range(r):
            for i in range(n):
                psi[a, b, i] = eval_jet(psi_candidate[a][b][i], p, order=0, n=n).value
    half = np.einsum("abi,bj->aij", psi, rbar)
    delta = 0.5 * (half + np.swapaxes(half, 1, 2))
    return float(np.max(np.abs(delta)))


def koszul_delta_check(spec: AlgebroidSpec, psi_candidate, points,
                       tolerance: float = 1e-9) -> CheckReport:
    residuals = [koszul_delta_residual(spec, psi_candidate, p) for p in points]
    return report_from_residuals("koszul_delta", residuals, points, tolerance)


# --------------------------------------------------------------------------
# Covariantly constant frame probe


@dataclass(frozen=True)
class FrameSamples:
    """Parallel-transported frames on an axis-aligned grid around a basepoint.

    ``frames[k]`` is the transport matrix U at ``points[k]``; transported
    sections are e~_a = U[:, a]-weighted combinations of the original frame.
    """

    offsets: tuple[tuple[int, ...], ...]
    points: np.ndarray        # (num_nodes, n)
    frames: np.ndarray        # (num_nodes, r, r)


def _transport_segment(spec, q0, q1, U0, substeps):
    """RK4 for dU/dt = -omega(gamma')U along the straight segment q0 -> q1."""
    dx = np.asarray(q1, dtype=float) - np.asarray(q0, dtype=float)

    def rhs(t, U):
        omega = eval_connection(spec, q0 + t * dx, order=0)
        W = np.einsum("i,qai->aq", dx, omega)
        return -W @ U

    U = U0.copy()
    h = 1.0 / substeps
    for k in range(substeps):
        t = k * h
        k1 = rhs(t, U)
        k2 = rhs(t + h / 2.0, U + h / 2.0 * k1)
        k3 = rhs(t + h / 2.0, U + h / 2.0 * k2)
        k4 = rhs(t + h, U + h * k3)
        U = U + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return U


def _grid_offsets(chart, basepoint, grid_steps):
    deltas, ranges = [], []
    for (lo, hi), x in zip(chart.domain, basepoint):
        delta = (hi - lo) / (2.0 * grid_steps)
        k_minus = min(grid_steps, int(np.floor((x - lo) / delta + 1e-12)))
        k_plus = min(grid_steps, int(np.floor((hi - x) / delta + 1e-12)))
        deltas.append(delta)
        ranges.append(range(-k_minus, k_plus + 1))
    return np.array(deltas), ranges


def _transport_grid(spec, basepoint, deltas, ranges, axis_order, substeps):
    """Fill U on the whole grid, transporting axis by axis in ``axis_order``."""
    r = spec.rank
    frames = {tuple(0 for _ in deltas): np.eye(r)}

    def node_point(offset):
        return basepoint + deltas * np.array(offset, dtype=float)

    filled_axes = []
    for axis in axis_order:
        base_offsets = list(frames.keys())
        for start in base_offsets:
            if any(start[ax] != 0 for ax in axis_order
                   if ax not in filled_axes and ax != axis):
                continue
            for direction in (1, -1):
                prev = start
                ks = [k for k in ranges[axis] if k * direction > 0]
                ks.sort(key=abs)
                for k in ks:
                    offset = list(prev)
                    offset[axis] = k
                    offset = tuple(offset)
                    frames[offset] = _transport_segment(
                        spec, node_point(prev), node_point(offset),
                        frames[prev], substeps)
                    prev = offset
        filled_axes.append(axis)
    return frames


def flat_frame_probe(spec: AlgebroidSpec, basepoint, grid_steps: int = 4,
                     substeps: int = 8, flat_tolerance: float = 1e-7,
                     tolerance: float = 1e-6,
                     killing_tolerance: float = 1e-7):
    """Build a covariantly constant frame around ``basepoint`` by parallel
    transport along axis-aligned grid paths, then check that the transformed
    structure functions are constant over the grid; when the spec carries a
    metric that passes the Killing check, also monitor the metric Lie
    derivative along each transported flat section.

    Returns ``(FrameSamples, [CheckReport, ...])``: structure constancy, path
    independence, and (when applicable) the flat-section Killing residual.
    """
    _require_lie(spec, "flat_frame_probe")
    basepoint = np.asarray(basepoint, dtype=float)
    if not spec.chart.contains(basepoint):
        raise ValueError(f"basepoint {tuple(basepoint)} outside chart domain")
    n = spec.dimension

    deltas, ranges = _grid_offsets(spec.chart, basepoint, grid_steps)
    offsets = sorted(set(np.ndindex(*[len(rg) for rg in ranges])))
    offsets = [tuple(rg[k] for rg, k in zip(ranges, idx)) for idx in offsets]
    points = {off: basepoint + deltas * np.array(off, dtype=float)
              for off in offsets}

    # flatness gate
    worst_F = max(connection_curvature(spec, q).max_abs() for q in points.values())
    if worst_F > flat_tolerance:
        raise FlatnessGateError(
            f"connection curvature {worst_F:.3e} exceeds gate {flat_tolerance:.1e}")

    axis_order = list(range(n))
    frames = _transport_grid(spec, basepoint, deltas, ranges, axis_order, substeps)
    frames_rev = _transport_grid(spec, basepoint, deltas, ranges,
                                 axis_order[::-1], substeps)

    ordered = [off for off in offsets if off in frames]
    samples = FrameSamples(
        offsets=tuple(ordered),
        points=np.array([points[off] for off in ordered]),
        frames=np.array([frames[off] for off in ordered]),
    )

    path_dev = [float(np.max(np.abs(frames[off] - frames_rev[off])))
                for off in ordered]
    grid_pts = [points[off] for off in ordered]
    reports = []

    # transformed structure functions, using covariant constancy of the frame
    def transformed_structure(q, U):
        rho = eval_anchor(spec, q, order=0)
        C = eval_structure(spec, q, order=0)
        omega = eval_connection(spec, q, order=0)
        Uinv = np.linalg.inv(U)
        rho_t = np.einsum("pa,pi->ai", U, rho)          # anchors of e~_a
        core = np.einsum("pa,qb,pqe->abe", U, U, C)
        corr = np.einsum("ai,qei,qb->abe", rho_t, omega, U)
        total = core - corr + np.einsum("bi,qei,qa->abe", rho_t, omega, U)
        return np.einsum("abe,ec->abc", total, Uinv.T)

    C_base = transformed_structure(basepoint, np.eye(spec.rank))
    const_res = [float(np.max(np.abs(transformed_structure(points[off],
                                                           frames[off]) - C_base)))
                 for off in ordered]
    reports.append(report_from_residuals("flat_frame_structure_constancy",
                                         const_res, grid_pts, tolerance))
    reports.append(report_from_residuals("flat_frame_path_independence",
                                         path_dev, grid_pts, tolerance))

    if spec.metric is not None:
        killing_worst = max(killing_residual_frame(spec, q).max_abs()
                            for q in grid_pts)
        if killing_worst <= killing_tolerance:
            res = []
            for off in ordered:
                q, U = points[off], frames[off]
                rho, drho = eval_anchor(spec, q, order=1)
                g, dg = eval_metric(spec, q, order=1)
                omega = eval_connection(spec, q, order=0)
                v = np.einsum("pa,pk->ak", U, rho)
                # d_i v^k via nabla e~ = 0: d_i U^p_a = -omega^p_{q,i} U^q_a
                dv = (-np.einsum("qpi,qa,pk->aki", omega, U, rho)
                      + np.einsum("pa,pki->aki", U, drho))
                lie = (np.einsum("ak,ijk->aij", v, dg)
                       + np.einsum("aki,kj->aij", dv, g)
                       + np.einsum("akj,ik->aij", dv, g))
                res.append(float(np.max(np.abs(lie))))
            reports.append(report_from_residuals("flat_section_killing",
                                                 res, grid_pts, tolerance))

    return samples, reports
