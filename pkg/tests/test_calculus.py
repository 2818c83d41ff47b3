import numpy as np
import pytest

from algebroid import calculus as ca
from algebroid.exprjet import parse_expr
from algebroid.spec_model import (
    eval_anchor, eval_connection, eval_metric, eval_structure, sample_points,
)

from conftest import LIE_FIXTURES, METRIC_FIXTURES, fixture_doc, load_doc


def _fd_arrays(spec, p, h=1e-5):
    """Order-1 frame arrays with all derivatives from central differences."""
    n, r = spec.dimension, spec.rank

    def at(point):
        rho = eval_anchor(spec, point, order=0)
        C = eval_structure(spec, point, order=0)
        omega = eval_connection(spec, point, order=0)
        return rho, C, omega

    rho, C, omega = at(p)
    drho = np.zeros((r, n, n))
    dC = np.zeros((r, r, r, n))
    domega = np.zeros((r, r, n, n))
    for j in range(n):
        shift = np.zeros(n)
        shift[j] = h
        rp, Cp, op = at(p + shift)
        rm, Cm, om = at(p - shift)
        drho[:, :, j] = (rp - rm) / (2 * h)
        dC[:, :, :, j] = (Cp - Cm) / (2 * h)
        domega[:, :, :, j] = (op - om) / (2 * h)
    return rho, drho, C, dC, omega, domega


# --------------------------------------------------------------------------
# Christoffel symbols


def test_christoffel_flat_metric(spec_of):
    spec = spec_of("fx_action_so2")
    gamma = ca.christoffel(spec, (0.7, -0.3)).components
    assert np.array_equal(gamma, np.zeros((2, 2, 2)))


def test_christoffel_hand_values(spec_of):
    # g = (1+y^2) dx^2 + dy^2 at (0, 1)
    spec = spec_of("fx_nonriem_fol")
    gamma = ca.christoffel(spec, (0.0, 1.0)).components
    assert gamma[1, 0, 0] == pytest.approx(-1.0, abs=1e-14)
    assert gamma[0, 0, 1] == pytest.approx(0.5, abs=1e-14)
    assert np.array_equal(gamma, gamma.transpose(0, 2, 1))


def test_christoffel_matches_metric_finite_differences(spec_of, points_of):
    spec = spec_of("fx_so3_sphere")
    h = 1e-5
    n = spec.dimension
    for p in points_of(spec, 10):
        g = eval_metric(spec, p, order=0)
        dg = np.zeros((n, n, n))
        for k in range(n):
            shift = np.zeros(n)
            shift[k] = h
            dg[:, :, k] = (eval_metric(spec, p + shift, order=0)
                           - eval_metric(spec, p - shift, order=0)) / (2 * h)
        gamma_fd, _ = ca.christoffel_components(g, dg)
        gamma = ca.christoffel(spec, p).components
        assert float(np.max(np.abs(gamma - gamma_fd))) <= 1e-6


def test_christoffel_singular_metric_error(points_of):
    doc = fixture_doc("fx_action_so2")
    doc["metric"] = [["x", "0"], ["0", "1"]]
    doc["chart"]["domain"] = [[-2.0, 2.0], [-2.0, 2.0]]
    spec = load_doc(doc)
    with pytest.raises(ca.SingularMetricError):
        ca.christoffel(spec, (-0.5, 0.0))


# --------------------------------------------------------------------------
# A-torsion, curvature of the connection


def test_a_torsion_rank_one_vanishes(spec_of):
    spec = spec_of("fx_action_so2")
    assert ca.a_torsion(spec, (0.3, 0.8)).max_abs() == 0.0


def test_a_torsion_bundle_of_lie_algebras(spec_of):
    # rho = 0 so the torsion is minus the structure functions
    spec = spec_of("fx_bla")
    at = ca.a_torsion(spec, (1.3, 0.4)).components
    assert at[0, 1, 2] == -1.3
    assert at[1, 0, 2] == 1.3
    C = eval_structure(spec, (1.3, 0.4))
    assert np.array_equal(at, -C)


def test_a_torsion_so3(spec_of):
    spec = spec_of("fx_so3_sphere")
    at = ca.a_torsion(spec, (0.2, -0.1)).components
    C = eval_structure(spec, (0.2, -0.1))
    assert np.array_equal(at, -C)
    assert at[0, 1, 2] == -1.0


def test_curvature_constant_connection_vanishes():
    doc = fixture_doc("fx_omega_xdy")
    doc["connection"] = [[["3", "-2"]]]
    spec = load_doc(doc)
    assert ca.connection_curvature(spec, (0.5, 0.5)).max_abs() == 0.0


def test_curvature_x_dy(spec_of):
    spec = spec_of("fx_omega_xdy")
    F = ca.connection_curvature(spec, (0.7, -1.1)).components
    assert F[0, 0, 0, 1] == 1.0
    assert F[0, 0, 1, 0] == -1.0


def test_flat_connection_curvature_and_transport(spec_of):
    # omega = d(xy) is gauge-trivial: F = 0 and the transported frame is
    # covariantly constant across the grid (checked by finite differences,
    # so the bound is the O(h^2) truncation error at the grid spacing)
    spec = spec_of("fx_flat_exp")
    points = sample_points(spec.chart, 50, 42)
    assert max(ca.connection_curvature(spec, p).max_abs() for p in points) <= 1e-8
    samples, _ = ca.flat_frame_probe(spec, (0.0, 0.0), grid_steps=8)
    by_offset = {off: k for k, off in enumerate(samples.offsets)}
    h = samples.points[by_offset[(1, 0)]][0] - samples.points[by_offset[(0, 0)]][0]
    checked = 0
    for (ox, oy), k in by_offset.items():
        right = by_offset.get((ox + 1, oy))
        left = by_offset.get((ox - 1, oy))
        if right is None or left is None:
            continue
        dU = (samples.frames[right] - samples.frames[left]) / (2 * h)
        omega = eval_connection(spec, samples.points[k], order=0)
        expected = -(omega[:, :, 0].T @ samples.frames[k])
        assert float(np.max(np.abs(dU - expected))) <= h * h
        checked += 1
    assert checked > 50


# --------------------------------------------------------------------------
# Compatibility tensor


def test_s_frame_action_algebroid_is_cartan(spec_of, points_of):
    spec = spec_of("fx_action_so2")
    for p in points_of(spec, 50):
        assert ca.compatibility_tensor_frame(spec, p).max_abs() == 0.0


def test_s_frame_bla_nonconstant(spec_of):
    spec = spec_of("fx_bla")
    S = ca.compatibility_tensor_frame(spec, (1.7, 0.2)).components
    assert S[2, 0, 1, 0] == -1.0
    assert S[2, 1, 0, 0] == 1.0
    mask = np.ones_like(S, dtype=bool)
    mask[2, 0, 1, 0] = mask[2, 1, 0, 0] = False
    assert float(np.max(np.abs(S[mask]))) == 0.0


def test_s_frame_bla_constant_is_cartan(spec_of, points_of):
    spec = spec_of("fx_bla_const")
    for p in points_of(spec, 50):
        assert ca.compatibility_tensor_frame(spec, p).max_abs() == 0.0


def test_s_covariant_bla(spec_of):
    spec = spec_of("fx_bla")
    S = ca.compatibility_tensor_covariant(spec, (1.7, 0.2)).components
    assert S[2, 0, 1, 0] == -1.0


@pytest.mark.parametrize("name", LIE_FIXTURES)
def test_s_formulas_agree(name, spec_of, points_of):
    spec = spec_of(name)
    for p in points_of(spec, 100):
        frame = ca.compatibility_tensor_frame(spec, p).components
        cov = ca.compatibility_tensor_covariant(spec, p).components
        assert float(np.max(np.abs(frame - cov))) <= 1e-9


def test_s_antisymmetric_in_frame_pair(spec_of, points_of):
    spec = spec_of("fx_taucurv")
    for p in points_of(spec, 20):
        S = ca.compatibility_tensor_frame(spec, p).components
        assert np.array_equal(S, -S.transpose(0, 2, 1, 3))


# --------------------------------------------------------------------------
# Killing residuals


def test_killing_rotation_isometry(spec_of, points_of):
    spec = spec_of("fx_action_so2")
    for p in points_of(spec, 50):
        assert ca.killing_residual_frame(spec, p).max_abs() == 0.0


def test_killing_obstruction_value(spec_of):
    spec = spec_of("fx_rho0_n1")
    K = ca.killing_residual_frame(spec, (0.0, 0.37)).components
    assert K[0, 0, 0] == 2.0
    Ks = ca.killing_residual_sym(spec, (0.0, 0.37)).components
    assert Ks[0, 0, 0] == 1.0


def test_killing_obstruction_connection_independent():
    # the x = 0 residual cannot be absorbed by any connection choice
    rng = np.random.default_rng(0)
    for _ in range(10):
        doc = fixture_doc("fx_rho0_n1")
        c = rng.uniform(-10, 10, size=(2, 6))
        doc["connection"] = [[[
            f"{c[i][0]} + {c[i][1]}*x + {c[i][2]}*y + {c[i][3]}*x^2 "
            f"+ {c[i][4]}*x*y + {c[i][5]}*y^2" for i in range(2)]]]
        spec = load_doc(doc)
        K = ca.killing_residual_frame(spec, (0.0, 0.7)).components
        assert K[0, 0, 0] == 2.0


def test_killing_sym_standard_algebroid_flat(spec_of, points_of):
    # rho-bar equals the flat metric, so the full covariant derivative is zero
    spec = spec_of("fx_tm_flat")
    for p in points_of(spec, 20):
        assert ca.killing_residual_sym(spec, p).max_abs() == 0.0


def test_killing_sym_vanishes_for_zero_anchor(points_of):
    doc = fixture_doc("fx_bla")
    doc["metric"] = [["1 + x^2", "0"], ["0", "2"]]
    doc["connection"][0][1] = ["y", "x"]
    spec = load_doc(doc)
    for p in points_of(spec, 20):
        assert ca.killing_residual_sym(spec, p).max_abs() == 0.0


@pytest.mark.parametrize("name", METRIC_FIXTURES)
def test_killing_frame_is_twice_sym(name, spec_of, points_of):
    spec = spec_of(name)
    for p in points_of(spec, 100):
        frame = ca.killing_residual_frame(spec, p).components
        sym = ca.killing_residual_sym(spec, p).components
        assert float(np.max(np.abs(frame - 2.0 * sym))) <= 1e-10


# --------------------------------------------------------------------------
# Dual A-connection, induced curvatures, intertwining


def test_dual_connection_bundle_of_lie_algebras(spec_of):
    spec = spec_of("fx_bla")
    D = ca.dual_a_connection(spec, (1.2, -0.5)).components
    C = eval_structure(spec, (1.2, -0.5))
    assert np.array_equal(D, C)


def test_dual_connection_so3(spec_of):
    spec = spec_of("fx_so3_sphere")
    D = ca.dual_a_connection(spec, (0.4, 0.1)).components
    assert D[0, 1, 2] == 1.0 and D[1, 0, 2] == -1.0 and D[1, 2, 0] == 1.0


def test_dual_reflexivity_holds_on_mixed_fixture(spec_of, points_of):
    # nonzero rho, omega, and C at once; internal exact assertions must pass
    spec = spec_of("fx_omega_xdy")
    for p in points_of(spec, 20):
        ca.dual_a_connection(spec, p)


def test_a_curvature_flat_for_cartan(spec_of, points_of):
    for name in ("fx_action_so2", "fx_bla_const", "fx_so3_sphere"):
        spec = spec_of(name)
        for p in points_of(spec, 30):
            assert ca.a_curvature(spec, p, "alpha").max_abs() <= 1e-12, name
            assert ca.a_curvature(spec, p, "tau").max_abs() <= 1e-12, name


def test_alpha_curvature_zero_despite_s_nonzero(spec_of, points_of):
    # flatness of one induced connection does not certify compatibility
    spec = spec_of("fx_bla")
    for p in points_of(spec, 30):
        assert ca.a_curvature(spec, p, "alpha").max_abs() == 0.0
        assert ca.compatibility_tensor_frame(spec, p).max_abs() >= 1.0


def test_tau_curvature_nonzero(spec_of):
    spec = spec_of("fx_taucurv")
    R = ca.a_curvature(spec, (0.9, 0.2), "tau").components
    assert R[0, 0, 1, 0] == -1.0
    assert R[0, 1, 0, 0] == 1.0


def test_a_curvature_rank_one_vanishes_by_antisymmetry(spec_of, points_of):
    # A-curvature is antisymmetric in its frame pair, so rank 1 forces zero
    spec = spec_of("fx_omega_xdy")
    for p in points_of(spec, 20):
        assert ca.a_curvature(spec, p, "tau").max_abs() == 0.0
        assert ca.a_curvature(spec, p, "alpha").max_abs() == 0.0


def test_a_curvature_bad_kind(spec_of):
    with pytest.raises(ValueError):
        ca.a_curvature(spec_of("fx_bla"), (1.0, 0.0), "sigma")


@pytest.mark.parametrize("name", LIE_FIXTURES)
def test_intertwining_of_induced_connections(name, spec_of, points_of):
    spec = spec_of(name)
    report = ca.tau_intertwine_check(spec, points_of(spec, 100))
    assert report.max_residual <= 1e-10, name


# --------------------------------------------------------------------------
# Generalized residuals


def test_generalized_degenerates_to_killing_exactly(spec_of, points_of):
    doc = fixture_doc("fx_action_so2")
    doc["two_form"] = [["0", "0"], ["0", "0"]]
    spec = load_doc(doc)
    base = load_doc(fixture_doc("fx_action_so2"))
    for p in points_of(spec, 30):
        res = ca.generalized_residuals(spec, p)
        K = ca.killing_residual_frame(base, p).components
        assert np.array_equal(res.sym, K)
        assert np.array_equal(res.skew, np.zeros_like(res.skew))


def test_generalized_rotation_invariant_pair(spec_of, points_of):
    spec = spec_of("fx_action_so2")  # carries B = dx ^ dy
    for p in points_of(spec, 50):
        res = ca.generalized_residuals(spec, p)
        assert res.max_abs() <= 1e-15


def test_generalized_lie_derivative_oracle(points_of):
    # B = x dx ^ dy is not rotation invariant: skew residual is -y
    doc = fixture_doc("fx_action_so2")
    doc["two_form"] = [["0", "x"], ["-x", "0"]]
    spec = load_doc(doc)
    h = 1e-5
    for p in points_of(spec, 10):
        res = ca.generalized_residuals(spec, p)
        assert res.skew[0, 0, 1] == pytest.approx(-p[1], rel=1e-12, abs=1e-12)
        # independent oracle: Lie derivative via the flow by finite differences
        x, y = p
        B = lambda q: q[0]
        phi = lambda q, t: np.array([q[0] * np.cos(t) - q[1] * np.sin(t),
                                     q[0] * np.sin(t) + q[1] * np.cos(t)])
        # pullback of B under the rotation flow; d/dt at 0 of B(phi_t) J(phi_t)
        lie_fd = (B(phi(p, h)) - B(phi(p, -h))) / (2 * h)
        assert res.skew[0, 0, 1] == pytest.approx(lie_fd, abs=1e-8)


def test_generalized_requires_blocks(spec_of, points_of):
    spec = spec_of("fx_tm_flat")
    with pytest.raises(ValueError):
        ca.generalized_residuals(spec, (0.0, 0.0))


# --------------------------------------------------------------------------
# Symplectic / Poisson residuals


def test_symplectic_rotation_preserves_area_form(spec_of, points_of):
    spec = spec_of("fx_action_so2")
    for p in points_of(spec, 50):
        assert ca.structure_residual(spec, p, "symplectic").max_abs() <= 1e-15
        assert ca.symplectic_closedness_residual(spec, p) == 0.0


def test_symplectic_conformal_needs_connection(points_of):
    doc = fixture_doc("fx_sympl_conf")
    doc["connection"] = [[["0", "0"]]]
    spec = load_doc(doc)
    res = ca.structure_residual(spec, (0.8, 0.1), "symplectic").components
    assert res[0, 0, 1] == pytest.approx(1.6, rel=1e-12)


def test_symplectic_conformal_absorbed(spec_of, points_of):
    spec = spec_of("fx_sympl_conf")
    for p in points_of(spec, 50):
        assert ca.structure_residual(spec, p, "symplectic").max_abs() <= 1e-14


def test_poisson_residuals(spec_of, points_of):
    linear = spec_of("fx_poisson_linear")
    res = ca.structure_residual(linear, (0.4, -0.9), "poisson").components
    assert res[0, 0, 1] == 1.0
    conf = spec_of("fx_sympl_conf")
    for p in points_of(conf, 50):
        assert ca.structure_residual(conf, p, "poisson").max_abs() <= 1e-14


def test_structure_residual_bad_kind(spec_of):
    with pytest.raises(ValueError):
        ca.structure_residual(spec_of("fx_sympl_conf"), (0.0, 0.0), "metric")


# --------------------------------------------------------------------------
# Koszul perturbation test


def _psi_cube(entries, coords):
    return tuple(tuple(tuple(parse_expr(t, coords) for t in row)
                       for row in block) for block in entries)


def test_koszul_zero_perturbation(spec_of, points_of):
    spec = spec_of("fx_action_so2")
    psi = _psi_cube([[["0", "0"]]], ["x", "y"])
    report = ca.koszul_delta_check(spec, psi, points_of(spec, 30))
    assert report.max_residual == 0.0


def test_koszul_admissible_perturbation_on_flat_frame(spec_of, points_of):
    # psi with (frame, form) antisymmetry after lowering: delta(psi) = 0, and
    # the extended Killing equations still hold for the perturbed connection
    spec = spec_of("fx_tm_flat")
    points = points_of(spec, 30)
    psi_entries = [[["0", "-(1 + x*y)"], ["1 + x*y", "0"]],
                   [["0", "exp(x)"], ["-exp(x)", "0"]]]
    psi = _psi_cube(psi_entries, ["x", "y"])
    report = ca.koszul_delta_check(spec, psi, points)
    assert report.max_residual <= 1e-15
    doc = fixture_doc("fx_tm_flat")
    doc["connection"] = psi_entries
    perturbed = load_doc(doc)
    for p in points:
        assert ca.killing_residual_frame(perturbed, p).max_abs() <= 1e-15


def test_koszul_inadmissible_perturbation(spec_of, points_of):
    spec = spec_of("fx_action_so2")
    points = points_of(spec, 30)
    psi = _psi_cube([[["1", "0"]]], ["x", "y"])
    report = ca.koszul_delta_check(spec, psi, points)
    assert report.max_residual > 0.1
    doc = fixture_doc("fx_action_so2")
    doc["connection"] = [[["1", "0"]]]
    perturbed = load_doc(doc)
    worst = max(ca.killing_residual_frame(perturbed, p).max_abs() for p in points)
    assert worst > 0.1


def test_koszul_shape_mismatch(spec_of, points_of):
    spec = spec_of("fx_tm_flat")
    psi = _psi_cube([[["0", "0"]]], ["x", "y"])
    with pytest.raises(ValueError):
        ca.koszul_delta_check(spec, psi, points_of(spec, 5))


# --------------------------------------------------------------------------
# Flat-frame probe


def test_probe_action_so2_trivial(spec_of):
    spec = spec_of("fx_action_so2")
    samples, reports = ca.flat_frame_probe(spec, (0.5, 0.5), grid_steps=3)
    assert np.array_equal(samples.frames,
                          np.broadcast_to(np.eye(1), samples.frames.shape))
    by_name = {r.name: r for r in reports}
    assert by_name["flat_frame_structure_constancy"].max_residual == 0.0
    assert by_name["flat_section_killing"].max_residual == 0.0


def test_probe_so3_structure_constants(spec_of):
    spec = spec_of("fx_so3_sphere")
    _, reports = ca.flat_frame_probe(spec, (0.2, -0.3), grid_steps=4)
    by_name = {r.name: r for r in reports}
    assert by_name["flat_frame_structure_constancy"].max_residual <= 1e-6
    assert by_name["flat_frame_path_independence"].max_residual <= 1e-6
    assert by_name["flat_section_killing"].max_residual <= 1e-6


def test_probe_bla_detects_nonconstant_bracket(spec_of):
    spec = spec_of("fx_bla")
    _, reports = ca.flat_frame_probe(spec, (1.25, 0.0), grid_steps=4)
    constancy = next(r for r in reports
                     if r.name == "flat_frame_structure_constancy")
    assert not constancy.passed
    assert constancy.max_residual >= 0.3  # comparable to the grid extent


def test_probe_transport_matches_exact_solution(spec_of):
    # for omega = d(xy) the transport factor is exp(-xy)
    spec = spec_of("fx_flat_exp")
    samples, reports = ca.flat_frame_probe(spec, (0.0, 0.0), grid_steps=3)
    expected = np.exp(-samples.points[:, 0] * samples.points[:, 1])
    assert float(np.max(np.abs(samples.frames[:, 0, 0] - expected))) <= 1e-6
    assert all(r.passed for r in reports)


def test_probe_flatness_gate(spec_of):
    spec = spec_of("fx_taucurv")
    with pytest.raises(ca.FlatnessGateError):
        ca.flat_frame_probe(spec, (0.0, 0.0))


def test_probe_rejects_outside_basepoint(spec_of):
    with pytest.raises(ValueError):
        ca.flat_frame_probe(spec_of("fx_action_so2"), (5.0, 0.0))


# --------------------------------------------------------------------------
# Cross-cutting invariants


@pytest.mark.parametrize("name", LIE_FIXTURES)
def test_cartan_implies_flat_induced_connections(name, spec_of, points_of):
    spec = spec_of(name)
    points = points_of(spec, 100)
    s_max = max(ca.compatibility_tensor_frame(spec, p).max_abs() for p in points)
    if s_max <= 1e-9:
        for p in points:
            assert ca.a_curvature(spec, p, "alpha").max_abs() <= 1e-7
            assert ca.a_curvature(spec, p, "tau").max_abs() <= 1e-7


@pytest.mark.parametrize("name", LIE_FIXTURES)
def test_first_derivatives_against_finite_differences(name, spec_of, points_of):
    # rebuild S from finite-difference derivative arrays and compare
    spec = spec_of(name)
    for p in points_of(spec, 10):
        jet_args = ca.s_frame_components(
            *_fd_arrays(spec, p)), ca.compatibility_tensor_frame(spec, p).components
        assert float(np.max(np.abs(jet_args[0] - jet_args[1]))) <= 1e-6


@pytest.mark.parametrize("name", METRIC_FIXTURES)
def test_killing_derivatives_against_finite_differences(name, spec_of, points_of):
    spec = spec_of(name)
    h = 1e-5
    n = spec.dimension
    for p in points_of(spec, 10):
        rho, drho, *_ , omega, _ = _fd_arrays(spec, p)
        g = eval_metric(spec, p, order=0)
        dg = np.zeros((n, n, n))
        for k in range(n):
            shift = np.zeros(n)
            shift[k] = h
            dg[:, :, k] = (eval_metric(spec, p + shift, order=0)
                           - eval_metric(spec, p - shift, order=0)) / (2 * h)
        K_fd = ca.killing_frame_components(rho, drho, g, dg, omega)
        K = ca.killing_residual_frame(spec, p).components
        assert float(np.max(np.abs(K - K_fd))) <= 1e-6


def test_tensor_sample_signature_checked():
    with pytest.raises(ValueError):
        ca.TensorSample(("frame_up",), np.zeros((2, 2)), (0.0, 0.0))
