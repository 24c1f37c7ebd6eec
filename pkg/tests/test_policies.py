import numpy as np
import pytest

from services.data_stream import StreamConfig, draw_batch, empirical_second_moment
from services.errors import ConfigError, PolicyInputError
from services.policies import (
    Always,
    EstimatedGain,
    GradNorm,
    Never,
    OracleGain,
    PolicyInputs,
    Random,
    decide,
    estimated_gain,
    exact_gain,
    exact_gains,
    make_policy,
    policy_label,
)
from services.regression import DataBatch, objective, stochastic_gradient
from tests.conftest import random_spec


@pytest.fixture
def scalar_inputs(scalar_spec):
    """w = 1, g = 1, eps = 0.1 on the scalar problem: exact gain -0.095."""
    batch = DataBatch(features=np.array([[1.0]]), labels=np.array([0.0]))
    return PolicyInputs(eps=0.1, w=np.array([1.0]), g=np.array([1.0]), batch=batch, spec=scalar_spec)


class TestExactGain:
    def test_zero_gradient(self, planar_spec):
        assert exact_gain(planar_spec, np.zeros(2), np.zeros(2), 0.1) == 0.0

    def test_scalar_example(self, scalar_spec):
        assert exact_gain(scalar_spec, np.array([1.0]), np.array([1.0]), 0.1) == pytest.approx(-0.095)

    def test_equals_objective_difference(self):
        rng = np.random.default_rng(17)
        for _ in range(10_000):
            dim = int(rng.integers(1, 5))
            spec = random_spec(rng, dim)
            w = rng.standard_normal(dim) * 2
            g = rng.standard_normal(dim) * 2
            eps = float(rng.uniform(0.01, 0.5))
            before = objective(spec, w)
            difference = objective(spec, w - eps * g) - before
            assert abs(exact_gain(spec, w, g, eps) - difference) <= 1e-12 * max(1.0, abs(before))

    def test_vectorised_form_matches(self, planar_spec):
        rng = np.random.default_rng(1)
        w = np.array([0.5, 2.0])
        grads = rng.standard_normal((50, 2))
        expected = [exact_gain(planar_spec, w, g, 0.1) for g in grads]
        np.testing.assert_allclose(exact_gains(planar_spec, w, grads, 0.1), expected, rtol=1e-12, atol=1e-14)


class TestEstimatedGain:
    def test_zero_gradient(self, planar_stream):
        assert estimated_gain(draw_batch(planar_stream, 0, 0), np.zeros(2), 0.2) == 0.0

    def test_identity_second_moment(self):
        batch = DataBatch(features=np.sqrt(2.0) * np.eye(2), labels=np.zeros(2))
        np.testing.assert_allclose(empirical_second_moment(batch), np.eye(2), atol=1e-15)
        assert estimated_gain(batch, np.array([1.0, 0.0]), 0.2) == pytest.approx(-0.18)

    def test_scalar_example(self):
        batch = DataBatch(features=np.array([[2.0]]), labels=np.array([0.0]))
        g = stochastic_gradient(batch, np.array([1.0]))
        np.testing.assert_allclose(g, [4.0])
        assert estimated_gain(batch, g, 0.1) == pytest.approx(-1.28)

    def test_matches_quadratic_form(self, planar_stream):
        for k in range(20):
            batch = draw_batch(planar_stream, 0, k)
            g = stochastic_gradient(batch, np.zeros(2))
            moment = empirical_second_moment(batch)
            expected = -0.2 * g @ (np.eye(2) - 0.1 * moment) @ g
            assert estimated_gain(batch, g, 0.2) == pytest.approx(expected, rel=1e-12)

    def test_small_step_sign(self, planar_stream):
        for k in range(200):
            batch = draw_batch(planar_stream, 1, k)
            g = stochastic_gradient(batch, np.array([1.0, 1.0]))
            assert np.sign(estimated_gain(batch, g, 1e-6)) == np.sign(-(g @ g))

    def test_nonpositive_below_empirical_step_limit(self, planar_stream):
        for k in range(200):
            batch = draw_batch(planar_stream, 0, k)
            lam_max = np.linalg.eigvalsh(empirical_second_moment(batch))[-1]
            eps = 0.99 * 2.0 / lam_max
            g = stochastic_gradient(batch, np.zeros(2))
            assert estimated_gain(batch, g, eps) <= 1e-12 * max(1.0, g @ g)


class TestDecide:
    def test_oracle_transmits_on_large_gain(self, scalar_inputs):
        decision = decide(OracleGain(lam=0.05), scalar_inputs)
        assert decision.transmit
        assert decision.score == pytest.approx(-0.095)
        assert decision.threshold == -0.05

    def test_oracle_tie_transmits(self, scalar_inputs, scalar_spec):
        gain = exact_gain(scalar_spec, scalar_inputs.w, scalar_inputs.g, scalar_inputs.eps)
        assert decide(OracleGain(lam=-gain), scalar_inputs).transmit

    def test_oracle_holds_on_small_gain(self, scalar_inputs):
        assert not decide(OracleGain(lam=0.1), scalar_inputs).transmit

    def test_grad_norm_below_threshold(self):
        decision = decide(GradNorm(mu=4.0), PolicyInputs(eps=0.1, w=np.zeros(2), g=np.array([1.0, 1.0])))
        assert not decision.transmit
        assert decision.score == pytest.approx(2.0)

    def test_grad_norm_tie_transmits(self):
        assert decide(GradNorm(mu=2.0), PolicyInputs(eps=0.1, w=np.zeros(2), g=np.array([1.0, 1.0]))).transmit

    def test_controls(self, scalar_inputs):
        assert decide(Always(), scalar_inputs).transmit
        assert not decide(Never(), scalar_inputs).transmit

    def test_random_extremes(self, scalar_inputs):
        rng = np.random.default_rng(0)
        assert all(decide(Random(p=1.0), scalar_inputs, rng).transmit for _ in range(100))
        assert not any(decide(Random(p=0.0), scalar_inputs, rng).transmit for _ in range(100))

    def test_random_rate(self, scalar_inputs):
        rng = np.random.default_rng(4)
        rate = np.mean([decide(Random(p=0.3), scalar_inputs, rng).transmit for _ in range(10_000)])
        assert rate == pytest.approx(0.3, abs=0.02)

    @pytest.mark.parametrize(
        "kind,missing",
        [
            (OracleGain(lam=0.1), {"spec": None}),
            (EstimatedGain(lam=0.1), {"batch": None}),
            (GradNorm(mu=1.0), {"g": None}),
        ],
    )
    def test_missing_inputs(self, scalar_inputs, kind, missing):
        fields = {
            "eps": scalar_inputs.eps,
            "w": scalar_inputs.w,
            "g": scalar_inputs.g,
            "batch": scalar_inputs.batch,
            "spec": scalar_inputs.spec,
        }
        fields.update(missing)
        with pytest.raises(PolicyInputError):
            decide(kind, PolicyInputs(**fields))

    def test_random_needs_generator(self, scalar_inputs):
        with pytest.raises(ConfigError):
            decide(Random(p=0.5), scalar_inputs)

    def test_monotone_in_lambda(self, planar_spec):
        cfg = StreamConfig(spec=planar_spec, batch_size=5, num_agents=1, seed=2)
        lambdas = [0.0, 0.01, 0.1, 0.5, 1.0, 5.0, 20.0]
        policies = {kind: [kind(lam=lam) for lam in lambdas] for kind in (OracleGain, EstimatedGain)}
        rng = np.random.default_rng(6)
        for k in range(200):
            batch = draw_batch(cfg, 0, k)
            w = rng.standard_normal(2) * 3
            g = stochastic_gradient(batch, w)
            inputs = PolicyInputs(eps=0.1, w=w, g=g, batch=batch, spec=planar_spec)
            for ladder in policies.values():
                flags = [decide(policy, inputs).transmit for policy in ladder]
                # Once a larger lambda stops transmitting, no larger one transmits
                assert flags == sorted(flags, reverse=True)


class TestPolicyConfig:
    def test_make_policy(self):
        assert make_policy("oracle_gain", lam=0.3) == OracleGain(lam=0.3)
        assert make_policy("grad_norm", mu=2.0) == GradNorm(mu=2.0)
        assert make_policy("random", p=0.2) == Random(p=0.2)
        assert make_policy("never") == Never()

    def test_unknown_kind(self):
        with pytest.raises(PolicyInputError):
            make_policy("lag")

    def test_negative_parameters(self):
        with pytest.raises(ValueError):
            OracleGain(lam=-0.1)
        with pytest.raises(ValueError):
            GradNorm(mu=-1.0)
        with pytest.raises(ValueError):
            Random(p=1.5)

    def test_labels(self):
        assert policy_label(OracleGain(lam=0.1)) == "oracle_gain(lambda=0.1)"
        assert policy_label(Always()) == "always"
        assert policy_label(Random(p=0.5)).startswith("random (control")
