import numpy as np
import pytest
import scipy.optimize as so
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from staticinv import elasticity as el
from staticinv.forward import (FactorizationError, SolverConfig, factorize, free_residual_norm, gravity_force,
                               max_noninversion_step, solve_quasistatic)
from staticinv.mesh import TetMesh, element_volumes
from staticinv.synth import make_block

from conftest import UNIT_TET

G = np.array([0.0, 0.0, -9.81])


class TestGravityForce:
    def test_zero(self, small_block):
        assert not gravity_force(small_block, 1000.0, np.zeros(3)).any()

    def test_unit_tet(self, unit_tet):
        f = gravity_force(unit_tet, 1000.0, G).reshape(4, 3)
        np.testing.assert_allclose(f, np.tile([0, 0, -1000 / 6 * 9.81 / 4], (4, 1)), rtol=1e-14)

    def test_total_weight(self, small_block):
        f = gravity_force(small_block, 1000.0, G).reshape(-1, 3).sum(axis=0)
        total = element_volumes(small_block.nodes, small_block.tets).sum()
        np.testing.assert_allclose(f, 1000.0 * total * G, rtol=1e-12)

    def test_density_must_be_positive(self, small_block):
        with pytest.raises(ValueError):
            gravity_force(small_block, 0.0, G)


class TestSolve:
    def test_zero_gravity_is_rest(self, small_block, small_banded):
        s = solve_quasistatic(small_block, small_banded, np.zeros(3))
        assert s.converged and s.iterations == 0
        np.testing.assert_array_equal(s.positions, small_block.nodes)

    def test_all_fixed(self, small_block, small_banded):
        mesh = small_block.with_fixed(np.arange(small_block.n_nodes))
        s = solve_quasistatic(mesh, small_banded, G)
        assert s.converged
        np.testing.assert_array_equal(s.positions, mesh.nodes)

    def test_cantilever_against_direct_minimization(self):
        mesh = make_block((10, 2, 2), 0.01, "x-")
        mat = el.MaterialModel.homogeneous(mesh.n_tets, 1e5)
        s = solve_quasistatic(mesh, mat, G)
        assert s.converged
        X = mesh.nodes
        tip = X[:, 0] == X[:, 0].max()
        assert (s.positions[tip] - X[tip])[:, 2].mean() < 0
        # independent oracle: quasi-Newton minimization of W - f.x over the free coordinates
        f = gravity_force(mesh, 1000.0, G)
        free = mesh.free_dofs()

        def fun(z):
            x = X.ravel().copy()
            x[free] = z
            x = x.reshape(-1, 3)
            return (el.total_energy(X, x, mesh.tets, mat) - f @ (x - X).ravel(),
                    (el.total_gradient(X, x, mesh.tets, mat) - f)[free])

        r = so.minimize(fun, X.ravel()[free], jac=True, method="L-BFGS-B",
                        options=dict(maxiter=20000, gtol=1e-13, ftol=1e-30, maxcor=50))
        x = X.ravel().copy()
        x[free] = r.x
        assert np.abs(x - s.positions.ravel()).max() < 1e-6

    def test_certificates(self, small_block, small_banded):
        for theta in (0.0, 40.0, -75.0):
            t = np.deg2rad(theta)
            g = 9.81 * np.array([np.sin(t), 0.0, -np.cos(t)])
            s = solve_quasistatic(small_block, small_banded, g)
            assert s.converged
            check = free_residual_norm(small_block, small_block.nodes, s.positions, small_banded, g, 1000.0)
            assert check <= s.tolerance
            np.testing.assert_array_equal(s.positions[small_block.fixed_vertices],
                                          small_block.nodes[small_block.fixed_vertices])
            assert element_volumes(s.positions, small_block.tets).min() > 0
            pot = np.array(s.potentials)
            # each accepted step lowers the potential (up to its round-off)
            assert (np.diff(pot) <= 64 * np.finfo(float).eps * np.abs(pot[1:]).max()).all()

    def test_soft_large_sag_stays_valid(self):
        mesh = make_block((10, 2, 2), 0.01, "x-")
        mat = el.MaterialModel.homogeneous(mesh.n_tets, 1e3)
        s = solve_quasistatic(mesh, mat, G)
        assert s.converged
        assert element_volumes(s.positions, mesh.tets).min() > 0

    def test_deterministic(self, small_block, small_banded):
        a = solve_quasistatic(small_block, small_banded, G)
        b = solve_quasistatic(small_block, small_banded, G)
        assert a.positions.tobytes() == b.positions.tobytes()

    def test_warm_start(self, small_block, small_banded):
        cold = solve_quasistatic(small_block, small_banded, G)
        warm = solve_quasistatic(small_block, small_banded, G, x_init=cold.positions)
        assert warm.iterations == 0

    def test_callback_sees_every_accepted_iterate(self, small_block, small_banded):
        seen = []
        s = solve_quasistatic(small_block, small_banded, G, callback=lambda X, x: seen.append(x.copy()))
        assert len(seen) == s.iterations + 1 == len(s.potentials)
        np.testing.assert_array_equal(seen[0], small_block.nodes)
        np.testing.assert_array_equal(seen[-1], s.positions)

    def test_polish_reaches_round_off(self, small_block, small_banded):
        base = solve_quasistatic(small_block, small_banded, G, config=SolverConfig(tol_scale=1e-2))
        pol = solve_quasistatic(small_block, small_banded, G, config=SolverConfig(tol_scale=1e-2, polish_iters=3))
        assert pol.converged and pol.polished >= 1
        assert pol.residual_norm <= 0.5 * base.residual_norm
        assert pol.iterations == base.iterations + pol.polished
        np.testing.assert_allclose(pol.positions, base.positions, rtol=0, atol=1e-12)

    def test_iteration_cap_is_flagged(self, small_block):
        mat = el.MaterialModel.homogeneous(small_block.n_tets, 1e3)
        s = solve_quasistatic(small_block, mat, G, config=SolverConfig(max_newton_iters=1))
        assert not s.converged and "Newton" in s.message

    def test_tight_tolerance(self, small_block, small_banded):
        base = solve_quasistatic(small_block, small_banded, G)
        tight = solve_quasistatic(small_block, small_banded, G, config=SolverConfig(tol_scale=1e-2))
        assert tight.tolerance == pytest.approx(base.tolerance * 1e-2)
        assert tight.residual_norm <= tight.tolerance


class TestNonInversionStep:
    tets = np.array([[0, 1, 2, 3]])

    def test_no_motion(self):
        assert max_noninversion_step(UNIT_TET, np.zeros((4, 3)), self.tets, 0.7) == 0.7

    def test_face_crossing_at_half(self):
        d = np.zeros((4, 3))
        d[3, 2] = 2.0  # apex z = 1 - 2 beta reaches the base plane at beta = 0.5
        beta = max_noninversion_step(UNIT_TET, d, self.tets)
        assert 0.2 < beta <= 0.45

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-4, 2.0))
    def test_volume_floor_holds(self, seed, amp):
        rng = np.random.default_rng(seed)
        mesh = make_block((1, 1, 2), 1.0)
        d = amp * rng.standard_normal(mesh.nodes.shape)
        beta = max_noninversion_step(mesh.nodes, d, mesh.tets)
        v0 = element_volumes(mesh.nodes, mesh.tets)
        for b in np.linspace(0, beta, 41):
            assert (element_volumes(mesh.nodes - b * d, mesh.tets) >= 0.01 * v0 * (1 - 1e-9)).all()
        if amp < 1e-3:
            assert beta == 1.0

    def test_small_perturbation_returns_full_step(self, rng):
        mesh = make_block((2, 2, 2), 0.01)
        d = 1e-5 * rng.standard_normal(mesh.nodes.shape)
        assert max_noninversion_step(mesh.nodes, d, mesh.tets) == 1.0
        betas = np.linspace(0, 1, 201)
        v0 = element_volumes(mesh.nodes, mesh.tets)
        assert all((element_volumes(mesh.nodes - b * d, mesh.tets) > 0.01 * v0).all() for b in betas)


class TestFactorize:
    def test_plain(self, rng):
        A = rng.standard_normal((6, 6))
        K = sp.csr_matrix(A @ A.T + 6 * np.eye(6))
        b = rng.standard_normal(6)
        fac = factorize(K, b)
        assert fac.shift == 0.0
        np.testing.assert_allclose(K @ fac.solve(b), b, rtol=1e-10)

    def test_singular_gets_shift(self):
        K = sp.csr_matrix(np.diag([1.0, 2.0, 0.0]))
        fac = factorize(K, np.array([1.0, 1.0, 0.0]))
        assert fac.shift > 0

    def test_nan_matrix_fails(self):
        K = sp.csr_matrix(np.full((2, 2), np.nan))
        with pytest.raises(FactorizationError):
            factorize(K, np.ones(2))


def test_single_tet_mesh_requires_no_fixed_for_rest(unit_tet):
    mat = el.MaterialModel.homogeneous(1, 1e5)
    mesh = TetMesh(unit_tet.nodes, unit_tet.tets, [0, 1, 2])
    s = solve_quasistatic(mesh, mat, G)
    assert s.converged
    assert s.positions[3, 2] < 1.0
