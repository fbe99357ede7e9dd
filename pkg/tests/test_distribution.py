import numpy as np
import pytest

from matdist.distribution import (
    SamplerConfig,
    admissibility_block,
    is_material_isomorphism,
    material_fibre,
    symmetry_algebra,
)
from matdist.errors import DomainError, FibreInstabilityError, SingularMatrixError
from matdist.numkit import DEFAULT_TOL, Tolerances, principal_angles
from matdist.response import ConstitutiveModel, builtin, evaluate

from conftest import expm3, random_invertible


def cube_stiffness(x1):
    return 1.0 if x1 <= 0 else 1.0 + np.exp(-1.0 / x1)


def cube_stiffness_rate(x1):
    return 0.0 if x1 <= 0 else np.exp(-1.0 / x1) / x1**2


def cube_directional_value(X, F, dX, dP):
    """Closed-form directional derivative for the piecewise-stiffness cube:
    f (dP^T C + C dP) + dX1 f' (C - I) with C = F^T F."""
    C = F.T @ F
    out = cube_stiffness(X[0]) * (dP.T @ C + C @ dP)
    out = out + dX[0] * cube_stiffness_rate(X[0]) * (C - np.eye(3))
    return out.ravel()


def crystal_directional_value(X, F, dX, dP, radius=1.0):
    """Closed-form directional derivative for the liquid-crystal model with
    the default director e = X + radius*e1 (so de/dX = I)."""
    e = np.asarray(X, dtype=float).copy()
    e[0] += radius
    u = F @ e
    r_row = 2.0 * u @ (F @ (dX + dP @ e)) + 2.0 * np.dot(X, dX)
    j_row = np.linalg.det(F) * np.trace(dP)
    return np.array([r_row, j_row])


def unpack(candidate):
    return np.asarray(candidate[:3]), np.asarray(candidate[3:]).reshape(3, 3)


class TestAdmissibilityBlock:
    def test_identity_cal_structure(self, identity_cal):
        # W = F: no base dependence, and the dP column (l,i) must carry
        # F[j,l] at response rows (j,i)
        F = random_invertible(np.random.default_rng(0))
        B = admissibility_block(identity_cal, [0.1, 0.2, 0.3], F)
        np.testing.assert_array_equal(B[:, :3], np.zeros((9, 3)))
        for j in range(3):
            for i in range(3):
                for l in range(3):
                    for m in range(3):
                        expected = F[j, l] if m == i else 0.0
                        assert B[3 * j + i, 3 + 3 * l + m] == pytest.approx(expected, abs=1e-12)

    def test_det_cal_row_is_scaled_identity_pattern(self, det_cal):
        F = random_invertible(np.random.default_rng(1))
        B = admissibility_block(det_cal, [0.0, 0.0, 0.0], F)
        assert B.shape == (1, 12)
        np.testing.assert_allclose(B[0, :3], np.zeros(3), atol=1e-12)
        expected = np.linalg.det(F) * np.eye(3).ravel()
        np.testing.assert_allclose(B[0, 3:], expected, atol=1e-10)

    def test_example1_block_matches_closed_form(self, example1):
        rng = np.random.default_rng(2)
        X = np.array([0.4, -0.2, 0.1])
        F = random_invertible(rng)
        B = admissibility_block(example1, X, F)
        for _ in range(20):
            u = rng.standard_normal(12)
            dX, dP = unpack(u)
            np.testing.assert_allclose(B @ u, cube_directional_value(X, F, dX, dP),
                                       rtol=0, atol=1e-10)

    def test_example1_identity_gradient_symmetrizes(self, example1):
        # at F = I the closed form collapses to f * (dP + dP^T)
        X = np.array([-0.5, 0.0, 0.0])
        B = admissibility_block(example1, X, np.eye(3))
        rng = np.random.default_rng(3)
        dP = rng.standard_normal((3, 3))
        u = np.concatenate([np.zeros(3), dP.ravel()])
        np.testing.assert_allclose((B @ u).reshape(3, 3), dP + dP.T, atol=1e-12)

    def test_example2_block_matches_closed_form(self, example2):
        rng = np.random.default_rng(4)
        X = np.array([0.3, 0.2, 0.1])
        F = random_invertible(rng)
        B = admissibility_block(example2, X, F)
        for _ in range(20):
            u = rng.standard_normal(12)
            dX, dP = unpack(u)
            np.testing.assert_allclose(B @ u, crystal_directional_value(X, F, dX, dP),
                                       rtol=0, atol=1e-9)

    def test_singular_gradient_rejected(self, example1):
        with pytest.raises(SingularMatrixError):
            admissibility_block(example1, [0.0, 0.0, 0.0], np.diag([1.0, 1.0, 0.0]))


class TestPointwiseFibre:
    def test_cube_full_grade_region(self, example1):
        result = material_fibre(example1, [-0.5, 0.2, 0.1])
        assert result.grade == 3
        assert result.fibre_dim == 3
        assert result.sym_dim == 0
        assert result.validated
        assert result.heldout_residual <= DEFAULT_TOL.residual_tol

    def test_cube_laminated_region(self, example1):
        result = material_fibre(example1, [0.5, 0.0, 0.0])
        assert result.grade == 2
        # the base projection is the plane normal to the stiffness gradient
        assert np.abs(result.base_basis[0, :]).max() < 1e-9

    def test_crystal_spheres(self, example2):
        X = np.array([0.3, 0.2, 0.1])
        result = material_fibre(example2, X)
        assert result.grade == 2
        assert result.fibre_dim == 7
        assert result.sym_dim == 5
        # base directions are tangent to the sphere through X
        assert np.abs(result.base_basis.T @ X).max() < 1e-9

    def test_det_cal_unimodular_algebra(self, det_cal):
        result = material_fibre(det_cal, [0.1, 0.2, 0.3])
        assert result.grade == 3
        assert result.sym_dim == 8
        for S in result.sym_basis:
            assert abs(np.trace(S)) <= 1e-9

    def test_identity_cal_trivial_algebra(self, identity_cal):
        result = material_fibre(identity_cal, [0.1, 0.2, 0.3])
        assert result.grade == 3
        assert result.fibre_dim == 3
        assert result.sym_dim == 0

    def test_point_outside_domain(self, example1):
        with pytest.raises(DomainError):
            material_fibre(example1, [1.5, 0.0, 0.0])

    def test_result_json_schema(self, example1):
        payload = material_fibre(example1, [0.5, 0.0, 0.0]).to_json_dict()
        assert sorted(payload) == sorted(
            ["point", "grade", "fibre_dim", "sym_dim", "rank_gap", "mode",
             "base_basis", "validated"]
        )
        assert payload["mode"] == "pointwise"
        assert len(payload["base_basis"]) == payload["grade"]


class TestGermFibre:
    def test_crystal_origin_is_totally_degenerate(self, example2):
        assert material_fibre(example2, [0.0, 0.0, 0.0], mode="germ1").grade == 0

    def test_crystal_origin_pointwise_overcounts(self, example2):
        # the pointwise system loses the radial constraint exactly at the
        # centre; the first-order field ansatz restores it
        assert material_fibre(example2, [0.0, 0.0, 0.0]).grade == 3

    def test_cube_interface_plane_grade(self, example1):
        assert material_fibre(example1, [0.2, 0.0, 0.0], mode="germ1").grade == 2

    def test_cube_free_region_grade(self, example1):
        result = material_fibre(example1, [-0.3, 0.0, 0.0], mode="germ1")
        assert result.grade == 3
        assert result.fibre_dim == 12  # free base value plus free base slope

    def test_crystal_off_centre_germ_grades(self, example2):
        # an affine field tangent to all nearby spheres must have a skew
        # slope A with base value A X, and matching a first-order fibre
        # field against the affine director e = X + e1 forces A e1 = 0;
        # the surviving rotations are about the e1 axis, so the base value
        # e1 x X vanishes on the axis and is one-dimensional off it
        assert material_fibre(example2, [0.3, 0.0, 0.0], mode="germ1").grade == 0
        assert material_fibre(example2, [0.3, 0.2, 0.1], mode="germ1").grade == 1
        assert material_fibre(example2, [0.0, 0.0, 0.3], mode="germ1").grade == 1

    def test_germ_grade_never_exceeds_pointwise(self, example1, example2):
        rng = np.random.default_rng(77)
        for model, lo in ((example1, -0.9), (example2, -0.55)):
            for _ in range(6):
                X = rng.uniform(lo, 0.55, 3)
                g_point = material_fibre(model, X).grade
                g_germ = material_fibre(model, X, mode="germ1").grade
                assert g_germ <= g_point

    def test_validation_runs_in_germ_mode(self, example2):
        result = material_fibre(example2, [0.2, 0.1, 0.0], mode="germ1")
        assert result.validated
        assert result.heldout_residual <= DEFAULT_TOL.residual_tol


class TestSymmetryAlgebra:
    def test_cube_algebra_matches_dense_oracle(self, example1):
        # oracle: stack the closed-form relation over many gradients and
        # extract the kernel in the fibre coefficient alone
        rng = np.random.default_rng(5)
        X = np.array([-0.5, 0.0, 0.0])
        rows = []
        for _ in range(200):
            F = random_invertible(rng)
            C = F.T @ F
            block = np.zeros((9, 9))
            for l in range(3):
                for m in range(3):
                    dP = np.zeros((3, 3))
                    dP[l, m] = 1.0
                    block[:, 3 * l + m] = (dP.T @ C + C @ dP).ravel()
            rows.append(block)
        M = np.vstack(rows)
        oracle_dim = 9 - np.linalg.matrix_rank(M, tol=1e-8 * np.linalg.svd(M, compute_uv=False)[0])

        produced = symmetry_algebra(example1, X)
        assert len(produced) == oracle_dim == 0

    def test_single_gradient_oracle_sanity(self):
        # with one gradient (the identity) the same relation admits exactly
        # the skew matrices; this pins the oracle itself
        block = np.zeros((9, 9))
        for l in range(3):
            for m in range(3):
                dP = np.zeros((3, 3))
                dP[l, m] = 1.0
                block[:, 3 * l + m] = (dP.T + dP).ravel()
        assert 9 - np.linalg.matrix_rank(block) == 3

    def test_det_cal_exponentiates_into_unimodular_group(self, det_cal):
        X = np.array([0.1, 0.2, 0.3])
        basis = symmetry_algebra(det_cal, X)
        rng = np.random.default_rng(6)
        F = random_invertible(rng)
        W0 = evaluate(det_cal, X, F)
        for S in basis:
            for t in (0.1, 1.0):
                G = expm3(S, t)
                W1 = evaluate(det_cal, X, F @ G)
                assert np.abs(W1 - W0).max() <= 1e-12


class TestIsomorphismCheck:
    def test_identity_jet_at_same_point(self, example1):
        check = is_material_isomorphism(example1, [0.3, 0.1, 0.0], [0.3, 0.1, 0.0], np.eye(3))
        assert check.verdict
        assert check.residual == 0.0

    def test_flat_region_points_are_isomorphic(self, example1):
        check = is_material_isomorphism(example1, [-0.5, 0.0, 0.0], [-0.2, 0.3, 0.3], np.eye(3))
        assert check.verdict

    def test_distinct_stiffness_detected(self, example1):
        check = is_material_isomorphism(example1, [0.5, 0.0, 0.0], [0.7, 0.0, 0.0], np.eye(3))
        assert not check.verdict
        gap = abs(cube_stiffness(0.7) - cube_stiffness(0.5))
        assert check.residual >= 3.0 * gap

    def test_singular_jet_rejected(self, example1):
        with pytest.raises(SingularMatrixError):
            is_material_isomorphism(example1, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0],
                                    np.zeros((3, 3)))


def scaled_copy(model, factor):
    scaled_derivs = None
    if model._derivatives_many is not None:
        def scaled_derivs(X, Fs, _orig=model._derivatives_many):
            dWdX, dWdF = _orig(X, Fs)
            return factor * np.asarray(dWdX), factor * np.asarray(dWdF)

    return ConstitutiveModel(
        f"{model.name}*{factor:g}", model.dim,
        lambda X, F: factor * model._evaluate_one(X, F),
        domain=model.domain, bounds=model.bounds,
        evaluate_many=(lambda Xs, Fs: factor * model._evaluate_many(Xs, Fs))
        if model._evaluate_many else None,
        derivatives_many=scaled_derivs,
        complex_step=model.complex_step,
    )


class TestInvariants:
    @pytest.mark.parametrize("factor", [1e-3, 1e3])
    @pytest.mark.parametrize("name,point", [
        ("example1", (0.5, 0.1, -0.2)),
        ("example2", (0.3, 0.2, 0.1)),
    ])
    def test_response_scaling_leaves_fibre_unchanged(self, name, point, factor):
        base = material_fibre(builtin(name), point)
        scaled = material_fibre(scaled_copy(builtin(name), factor), point)
        assert scaled.grade == base.grade
        assert scaled.fibre_dim == base.fibre_dim
        assert scaled.sym_dim == base.sym_dim
        assert principal_angles(base.fibre_basis, scaled.fibre_basis).max() < 1e-8
        assert principal_angles(base.base_basis, scaled.base_basis).max() < 1e-8
        if base.sym_dim:
            s1 = np.column_stack([S.ravel() for S in base.sym_basis])
            s2 = np.column_stack([S.ravel() for S in scaled.sym_basis])
            assert principal_angles(s1, s2).max() < 1e-8

    def test_dimension_bookkeeping(self, example1, example2, det_cal, identity_cal):
        # base rank + symmetry dimension account for the whole fibre, and
        # the base projection can add at most three directions
        cases = [(example1, (-0.5, 0.2, 0.1)), (example1, (0.5, 0.0, 0.0)),
                 (example2, (0.3, 0.2, 0.1)), (det_cal, (0.1, 0.2, 0.3)),
                 (identity_cal, (0.1, 0.2, 0.3))]
        for model, point in cases:
            r = material_fibre(model, point)
            assert 0 <= r.grade <= 3
            assert r.fibre_dim <= 12
            assert r.grade <= r.fibre_dim
            assert r.sym_dim + r.grade <= r.fibre_dim <= r.sym_dim + 3

    def test_dimensions_are_seed_independent(self, example1, example2, det_cal):
        cases = [(example1, (-0.5, 0.2, 0.1)), (example1, (0.5, 0.0, 0.0)),
                 (example2, (0.3, 0.2, 0.1)), (det_cal, (0.1, 0.2, 0.3))]
        for model, point in cases:
            dims = set()
            for seed in range(5):
                r = material_fibre(model, point, sampler=SamplerConfig(seed=seed))
                dims.add((r.grade, r.fibre_dim, r.sym_dim))
            assert len(dims) == 1

    def test_fibre_is_a_linear_subspace(self, example2):
        X = np.array([0.3, 0.2, 0.1])
        result = material_fibre(example2, X)
        rng = np.random.default_rng(8)
        B = result.fibre_basis
        combos = [B[:, 0] + B[:, 1], 2.5 * B[:, 0], B @ rng.standard_normal(B.shape[1])]
        for u in combos:
            dX, dP = unpack(u)
            worst = 0.0
            for _ in range(10):
                F = random_invertible(rng)
                worst = max(worst, np.abs(crystal_directional_value(X, F, dX, dP)).max())
            scale = max(1.0, float(np.linalg.norm(u)))
            assert worst <= DEFAULT_TOL.residual_tol * scale

    def test_left_invariance_by_fresh_differences(self, example1, example2):
        # directional derivative of the response along (dX, F dP), central
        # differences applied directly to evaluate, not the assembled rows
        rng = np.random.default_rng(9)
        for model, X in ((example1, np.array([0.5, 0.0, 0.0])),
                         (example2, np.array([0.3, 0.2, 0.1]))):
            result = material_fibre(model, X)
            assert result.validated
            F = random_invertible(rng)
            h = 1e-6
            for j in range(result.fibre_dim):
                dX, dP = unpack(result.fibre_basis[:, j])
                Wp = evaluate(model, X + h * dX, F + h * F @ dP)
                Wm = evaluate(model, X - h * dX, F - h * F @ dP)
                assert np.abs((Wp - Wm) / (2 * h)).max() <= 10 * DEFAULT_TOL.residual_tol


class TestSamplerConfig:
    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            SamplerConfig(k_init=2)
        with pytest.raises(ValueError):
            SamplerConfig(k_init=8, k_max=10)

    def test_instability_reported_with_history(self):
        rng = np.random.default_rng(10)

        def noisy(X, Fs):
            return (rng.standard_normal((len(Fs), 1, 3)),
                    rng.standard_normal((len(Fs), 1, 9)))

        model = ConstitutiveModel("noise", 1, lambda X, F: np.zeros(1),
                                  derivatives_many=noisy)
        with pytest.raises(FibreInstabilityError) as err:
            material_fibre(model, [0.0, 0.0, 0.0], sampler=SamplerConfig(k_init=4, k_max=8))
        assert len(err.value.history) >= 2

    def test_tight_residual_tolerance_flags_result(self, example2):
        tol = Tolerances(residual_tol=1e-300)
        result = material_fibre(example2, [0.3, 0.2, 0.1], tol=tol)
        assert not result.validated
        assert result.heldout_residual > 0.0
