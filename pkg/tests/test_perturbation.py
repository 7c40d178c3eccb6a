from __future__ import annotations

import numpy as np
import pytest

from scdr.errors import DivergenceError, ValidationError
from scdr.factorization import FactorModel
from scdr.perturbation import (
    PerturbConfig,
    fgsm_perturb,
    fgsm_step,
    find_delta,
    pgd_step,
    project_ball,
)


def quadratic(center):
    """L(x) = ||x - center||^2 and its gradient."""
    c = np.asarray(center, dtype=float)

    def loss_at(x):
        d = np.asarray(x) - c
        return float(np.sum(d * d))

    def grad_at(x):
        return 2.0 * (np.asarray(x) - c)

    return loss_at, grad_at


def single_triple(residual, v):
    """One-interaction rating loss over a perturbation of the user row."""
    v = np.asarray(v, dtype=float)

    def loss_at(delta_point):
        return float((residual - np.dot(delta_point, v)) ** 2)

    def grad_at(delta_point):
        return -2.0 * (residual - np.dot(delta_point, v)) * v

    return loss_at, grad_at


def disk_grid_max(loss_at, origin, rho, step=0.01):
    """Dense grid search over the 2-D disk of radius rho around origin."""
    best = loss_at(origin)
    offsets = np.arange(-rho, rho + step / 2, step)
    for dx in offsets:
        for dy in offsets:
            if dx * dx + dy * dy <= rho * rho:
                val = loss_at(origin + np.array([dx, dy]))
                if val > best:
                    best = val
    return best


class TestConfig:
    def test_alpha_default(self):
        assert PerturbConfig(rho=1.0, k=4).alpha == 0.25
        assert PerturbConfig(rho=1.0, k=0).alpha == 1.0
        assert PerturbConfig(rho=0.0, k=3).alpha == 1.0

    def test_validation(self):
        with pytest.raises(ValidationError):
            PerturbConfig(rho=-1.0, k=1)
        with pytest.raises(ValidationError):
            PerturbConfig(rho=1.0, k=-1)
        with pytest.raises(ValidationError):
            PerturbConfig(rho=1.0, k=1, alpha=0.0)


class TestPgdStep:
    def test_zero_gradient_fixed_point(self):
        origin = np.array([1.0, -2.0])
        cfg = PerturbConfig(rho=1.0, k=1)
        out = pgd_step(origin, origin, np.zeros(2), cfg)
        assert np.array_equal(out, origin)

    def test_sign_step_inside_ball(self):
        cfg = PerturbConfig(rho=10.0, k=1, alpha=1.0)
        out = pgd_step(np.zeros(2), np.zeros(2), np.array([2.0, -3.0]), cfg)
        assert out.tolist() == [1.0, -1.0]

    def test_projection_rescales(self):
        out = project_ball(np.array([3.0, 4.0]), np.zeros(2), 2.5)
        assert np.allclose(out, [1.5, 2.0], atol=1e-15)

    def test_projection_identity_inside(self):
        p = np.array([0.3, -0.1])
        assert np.array_equal(project_ball(p, np.zeros(2), 1.0), p)

    def test_projection_idempotent(self, rng):
        for _ in range(50):
            x = rng.normal(size=3) * 5
            o = rng.normal(size=3)
            rho = float(rng.uniform(0.1, 2.0))
            once = project_ball(x, o, rho)
            twice = project_ball(once, o, rho)
            assert np.allclose(once, twice, atol=1e-12, rtol=0)

    def test_dimension_mismatch(self):
        cfg = PerturbConfig(rho=1.0, k=1)
        with pytest.raises(ValidationError):
            pgd_step(np.zeros(2), np.zeros(3), np.zeros(2), cfg)
        with pytest.raises(ValidationError):
            pgd_step(np.zeros(2), np.zeros(2), np.zeros(3), cfg)

    def test_batch_rows_projected_independently(self):
        origin = np.zeros((2, 2))
        points = np.array([[3.0, 4.0], [0.1, 0.0]])
        out = project_ball(points, origin, 2.5)
        assert np.allclose(out[0], [1.5, 2.0], atol=1e-15)
        assert np.array_equal(out[1], points[1])


class TestFindDelta:
    def test_k_zero_returns_origin(self):
        loss_at, grad_at = quadratic([5.0, 5.0])
        origin = np.array([1.0, 2.0])
        pert = find_delta(loss_at, grad_at, origin, PerturbConfig(rho=2.0, k=0))
        assert np.array_equal(pert.delta, np.zeros(2))
        assert pert.achieved_loss == loss_at(origin)

    def test_quadratic_ball_guarantees(self):
        loss_at, grad_at = quadratic([0.0, 0.0])
        origin = np.array([1.0, 0.0])
        pert = find_delta(loss_at, grad_at, origin,
                          PerturbConfig(rho=1.0, k=5, alpha=0.2))
        assert pert.achieved_loss >= 1.0
        assert np.linalg.norm(pert.delta) <= 1.0 + 1e-9

    def test_grid_search_oracle_single_triple(self, rng):
        # margins keep the sign-ascent path provably within 5% of the disk max
        for _ in range(5):
            theta = rng.uniform(0, 2 * np.pi)
            vnorm = rng.uniform(0.6, 1.2)
            v = vnorm * np.array([np.cos(theta), np.sin(theta)])
            residual = float(rng.choice([-1, 1])) * rng.uniform(5.0, 8.0)
            rho = float(rng.uniform(0.1, 0.3))
            loss_at, grad_at = single_triple(residual, v)
            pert = find_delta(loss_at, grad_at, np.zeros(2), PerturbConfig(rho=rho, k=5))
            oracle = disk_grid_max(loss_at, np.zeros(2), rho)
            assert pert.achieved_loss >= 0.95 * oracle
            assert np.linalg.norm(pert.delta) <= rho + 1e-9

    def test_invariants_random_instances(self, rng):
        for _ in range(200):
            d = int(rng.integers(1, 5))
            loss_at, grad_at = quadratic(rng.normal(size=d) * 3)
            origin = rng.normal(size=d)
            cfg = PerturbConfig(rho=float(rng.uniform(0, 2)), k=int(rng.integers(0, 7)))
            pert = find_delta(loss_at, grad_at, origin, cfg)
            assert np.linalg.norm(pert.delta) <= cfg.rho + 1e-9
            assert pert.achieved_loss >= loss_at(origin)

    def test_monotone_radius_on_fixed_instance(self):
        loss_at, grad_at = single_triple(6.0, np.array([1.0, 0.4]))
        achieved = []
        for rho in (0.1, 0.2, 0.4, 0.8):
            pert = find_delta(loss_at, grad_at, np.zeros(2),
                              PerturbConfig(rho=rho, k=5, alpha=0.2))
            achieved.append(pert.achieved_loss)
        assert all(b >= a for a, b in zip(achieved, achieved[1:]))

    def test_batch_origin(self):
        v = np.array([1.0, 0.5])
        ratings = np.array([4.0, 3.0])

        def loss_at(rows):
            res = ratings - rows @ v
            return float(res @ res)

        def grad_at(rows):
            res = ratings - rows @ v
            return -2.0 * res[:, None] * v[None, :]

        origin = np.zeros((2, 2))
        pert = find_delta(loss_at, grad_at, origin, PerturbConfig(rho=0.5, k=4))
        assert pert.delta.shape == (2, 2)
        assert np.all(np.linalg.norm(pert.delta, axis=1) <= 0.5 + 1e-9)
        assert pert.achieved_loss >= loss_at(origin)

    def test_non_finite_loss_aborts(self):
        def loss_at(x):
            return float("inf") if np.any(x != 0) else 1.0

        def grad_at(x):
            return np.ones_like(x)

        with pytest.raises(DivergenceError):
            find_delta(loss_at, grad_at, np.zeros(2), PerturbConfig(rho=1.0, k=2))


class TestFgsm:
    def test_zero_epsilon_unchanged(self):
        model = FactorModel(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), 2)
        out = fgsm_perturb(model, 0, [(0, 3.0)], 0.0)
        assert np.array_equal(out, model.U[0])

    def test_hand_arithmetic(self):
        model = FactorModel(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), 2)
        out = fgsm_perturb(model, 0, [(0, 3.0)], 0.25)
        assert out.tolist() == [0.75, 0.0]

    def test_linf_magnitude(self, rng):
        model = FactorModel(rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), 3)
        batch = [(0, 4.0), (2, 1.0)]
        eps = 0.37
        out = fgsm_perturb(model, 1, batch, eps)
        moved = np.abs(out - model.U[1])
        assert np.all((moved == 0.0) | np.isclose(moved, eps, atol=1e-15))
        assert np.max(moved) == pytest.approx(eps)

    def test_empty_batch_rejected(self):
        model = FactorModel(np.ones((1, 2)), np.ones((1, 2)), 2)
        with pytest.raises(ValidationError):
            fgsm_perturb(model, 0, [], 0.1)

    def test_negative_epsilon_rejected(self):
        with pytest.raises(ValidationError):
            fgsm_step(np.zeros(2), np.ones(2), -0.1)
