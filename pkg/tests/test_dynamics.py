import numpy as np
import pytest
from scipy.linalg import expm

from backupcbf.backup import MlpPolicy, SaturatedLinearPolicy
from backupcbf.dynamics import (Box, FlowConfig, IntegrationDivergedError, SystemModel,
                                ZeroPolicy, flow, flow_sensitivity_adjoint,
                                flow_sensitivity_forward, make_linear_system,
                                make_pendulum)


def pendulum_policy():
    sys_ = make_pendulum()
    return SaturatedLinearPolicy(np.array([[-13.0, -25.0]]), np.zeros(2),
                                 sys_.control_box)


class TestPendulumModel:
    def test_equilibrium(self):
        sys_ = make_pendulum()
        assert np.allclose(sys_.f(np.zeros(2)), 0.0)

    def test_field_values(self):
        sys_ = make_pendulum()
        np.testing.assert_allclose(sys_.f(np.array([np.pi / 2, 1.0])), [1.0, 1.0])

    def test_jacobian_at_origin(self):
        sys_ = make_pendulum()
        np.testing.assert_allclose(sys_.jac_f(np.zeros(2)), [[0, 1], [1, 0]])

    def test_jacobians_match_finite_differences(self):
        sys_ = make_pendulum()
        rng = np.random.default_rng(3)
        for x in rng.normal(size=(10, 2)):
            fd = np.zeros((2, 2))
            for k in range(2):
                e = np.zeros(2)
                e[k] = 1e-6
                fd[:, k] = (sys_.f(x + e) - sys_.f(x - e)) / 2e-6
            np.testing.assert_allclose(sys_.jac_f(x), fd, rtol=1e-5, atol=1e-7)


class TestFlow:
    def test_equilibrium_trajectory_is_constant(self):
        sys_ = make_pendulum()
        cfg = FlowConfig(horizon_T=2.0, num_samples_N=20, substeps_per_sample=5)
        samples = flow(sys_, ZeroPolicy(1, 2), np.zeros(2), cfg)
        assert np.all(samples == 0.0)

    def test_matches_fine_step_reference(self):
        sys_ = make_pendulum()
        x0 = np.array([0.1, 0.0])
        coarse = flow(sys_, ZeroPolicy(1, 2), x0,
                      FlowConfig(horizon_T=1.0, num_samples_N=10, substeps_per_sample=10))
        fine = flow(sys_, ZeroPolicy(1, 2), x0,
                    FlowConfig(horizon_T=1.0, num_samples_N=10, substeps_per_sample=1000))
        np.testing.assert_allclose(coarse[-1], fine[-1], atol=1e-6)

    def test_nan_state_rejected(self):
        sys_ = make_pendulum()
        cfg = FlowConfig(horizon_T=1.0, num_samples_N=5)
        with pytest.raises(ValueError):
            flow(sys_, ZeroPolicy(1, 2), np.array([np.nan, 0.0]), cfg)

    def test_divergence_reports_last_valid_index(self):
        # x' = x^2 from 2.0 blows up in finite time and overflows to inf.
        box = Box(-np.ones(1), np.ones(1))
        quad = SystemModel(
            n=1, m=1,
            f=lambda x: np.asarray(x) ** 2,
            g=lambda x: np.zeros(np.shape(x)[:-1] + (1, 1)),
            jac_f=lambda x: 2.0 * np.asarray(x)[..., None],
            jac_g_cols=lambda x: np.zeros(np.shape(x)[:-1] + (1, 1, 1)),
            control_box=box)
        with pytest.raises(IntegrationDivergedError) as err:
            flow(quad, ZeroPolicy(1, 1), np.array([2.0]),
                 FlowConfig(horizon_T=5.0, num_samples_N=10, substeps_per_sample=2))
        assert 0 <= err.value.last_valid_index < 10

    def test_determinism_bit_identical(self):
        sys_ = make_pendulum()
        cfg = FlowConfig(horizon_T=1.5, num_samples_N=30, substeps_per_sample=4)
        pol = pendulum_policy()
        a = flow(sys_, pol, np.array([0.4, -0.2]), cfg)
        b = flow(sys_, pol, np.array([0.4, -0.2]), cfg)
        assert np.array_equal(a, b)

    def test_batched_matches_scalar(self):
        sys_ = make_pendulum()
        cfg = FlowConfig(horizon_T=0.8, num_samples_N=8, substeps_per_sample=4)
        pol = pendulum_policy()
        x0 = np.array([[0.3, 0.1], [-0.2, 0.4], [0.0, 0.0]])
        batched = flow(sys_, pol, x0, cfg)
        for i in range(3):
            np.testing.assert_array_equal(batched[i], flow(sys_, pol, x0[i], cfg))

    def test_rk4_order(self):
        # Halving the substep size should reduce endpoint error ~16x on a
        # smooth system in the asymptotic regime.
        sys_ = make_pendulum()
        pol = ZeroPolicy(1, 2)
        x0 = np.array([0.5, 0.3])

        def endpoint(substeps):
            cfg = FlowConfig(horizon_T=1.0, num_samples_N=1, substeps_per_sample=substeps)
            return flow(sys_, pol, x0, cfg)[-1]

        ref = endpoint(512)
        err_h = np.linalg.norm(endpoint(4) - ref)
        err_h2 = np.linalg.norm(endpoint(8) - ref)
        assert 8.0 <= err_h / err_h2 <= 32.0


class TestForwardSensitivity:
    def test_initial_identity(self):
        sys_ = make_pendulum()
        cfg = FlowConfig(horizon_T=0.5, num_samples_N=5, substeps_per_sample=5)
        _, qs = flow_sensitivity_forward(sys_, pendulum_policy(), np.array([0.05, 0.0]), cfg)
        np.testing.assert_array_equal(qs[0], np.eye(2))

    def test_matches_finite_differences(self):
        sys_ = make_pendulum()
        pol = pendulum_policy()
        cfg = FlowConfig(horizon_T=0.5, num_samples_N=10, substeps_per_sample=5)
        x0 = np.array([0.05, 0.0])
        _, qs = flow_sensitivity_forward(sys_, pol, x0, cfg)
        h = 1e-5
        fd = np.zeros((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd[:, k] = (flow(sys_, pol, x0 + e, cfg)[-1]
                        - flow(sys_, pol, x0 - e, cfg)[-1]) / (2 * h)
        np.testing.assert_allclose(qs[-1], fd, rtol=1e-4, atol=1e-8)

    def test_linear_system_matches_matrix_exponential(self):
        a = np.array([[0.0, 1.0], [-1.0, -0.4]])
        sys_ = make_linear_system(a)
        cfg = FlowConfig(horizon_T=1.0, num_samples_N=5, substeps_per_sample=20)
        _, qs = flow_sensitivity_forward(sys_, ZeroPolicy(1, 2), np.array([0.3, -0.1]), cfg)
        for i in range(6):
            np.testing.assert_allclose(qs[i], expm(a * i * cfg.sample_dt), atol=1e-6)


class TestAdjointSensitivity:
    def test_cotangent_at_zero_returns_itself(self):
        sys_ = make_pendulum()
        cfg = FlowConfig(horizon_T=0.5, num_samples_N=5, substeps_per_sample=5)
        v = np.array([1.0, 0.0])
        grad = flow_sensitivity_adjoint(sys_, pendulum_policy(), np.array([0.2, 0.1]),
                                        cfg, [(0, v)])
        np.testing.assert_array_equal(grad, v)

    def test_linear_system_matches_matrix_exponential(self):
        a = np.array([[0.0, 1.0], [-1.0, -0.4]])
        sys_ = make_linear_system(a)
        cfg = FlowConfig(horizon_T=1.0, num_samples_N=4, substeps_per_sample=25)
        v = np.array([0.7, -0.2])
        grad = flow_sensitivity_adjoint(sys_, ZeroPolicy(1, 2), np.array([0.3, -0.1]),
                                        cfg, [(4, v)])
        np.testing.assert_allclose(grad, v @ expm(a * 1.0), atol=1e-6)

    def test_matches_forward_contraction_on_random_pairs(self):
        # The adjoint is the exact discrete transpose of the forward map, so
        # agreement is near machine precision over many random policies/states.
        sys_ = make_pendulum()
        rng = np.random.default_rng(11)
        cfg = FlowConfig(horizon_T=0.3, num_samples_N=6, substeps_per_sample=4)
        for trial in range(100):
            if trial % 10 == 0:
                policy = MlpPolicy.random(2, [8], sys_.control_box, rng, scale=0.7)
            x0 = rng.uniform(-0.6, 0.6, size=2)
            cots = [(int(i), rng.normal(size=2)) for i in
                    rng.integers(0, cfg.num_samples_N + 1, size=3)]
            _, qs = flow_sensitivity_forward(sys_, policy, x0, cfg)
            expected = sum(v @ qs[i] for i, v in cots)
            grad = flow_sensitivity_adjoint(sys_, policy, x0, cfg, cots)
            np.testing.assert_allclose(grad, expected, rtol=1e-6, atol=1e-12)

    def test_empty_cotangents_rejected(self):
        sys_ = make_pendulum()
        cfg = FlowConfig(horizon_T=0.5, num_samples_N=5)
        with pytest.raises(ValueError):
            flow_sensitivity_adjoint(sys_, pendulum_policy(), np.zeros(2), cfg, [])


class TestConfigValidation:
    def test_box_ordering(self):
        with pytest.raises(ValueError):
            Box(np.array([1.0]), np.array([-1.0]))

    def test_flow_config(self):
        with pytest.raises(ValueError):
            FlowConfig(horizon_T=0.0, num_samples_N=10)
        with pytest.raises(ValueError):
            FlowConfig(horizon_T=1.0, num_samples_N=0)
        with pytest.raises(ValueError):
            FlowConfig(horizon_T=1.0, num_samples_N=10, method="euler")
