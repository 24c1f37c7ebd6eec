from pathlib import Path

import numpy as np
import pytest

from config.experiment import (
    DEFAULT_LAMBDA_GRID,
    DEFAULT_MU_GRID,
    build_run_config,
    format_value,
    load_config,
    parse_config_text,
    parse_value,
    plan_sweep,
    resolve_sweep_defaults,
    to_text,
    with_overrides,
)
from services.errors import ConfigError
from services.policies import EstimatedGain, GradNorm, OracleGain

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

BASE = """\
# two-dimensional problem
problem.true_weights = 3, 5
problem.feature_cov = 3, 0; 0, 1
problem.noise_std = 1.0

stream.batch_size = 5
stream.num_agents = 2

policy.kind = oracle_gain
policy.lambda = 0.3   # trailing comment

run.eps = 0.1
run.num_iterations = 10
replications = 20
"""


class TestParseValue:
    def test_scalars(self):
        assert parse_value("3") == 3
        assert parse_value("0.25") == 0.25
        assert parse_value("true") is True
        assert parse_value("none") is None
        assert parse_value("oracle_gain") == "oracle_gain"

    def test_lists_and_matrices(self):
        assert parse_value("1, 2.5") == [1, 2.5]
        assert parse_value("0.5,") == [0.5]
        assert parse_value("3, 0; 0, 1") == [[3, 0], [0, 1]]

    def test_format_keeps_one_element_lists(self):
        assert format_value([0.5]) == "0.5,"
        assert parse_value(format_value([0.5])) == [0.5]
        assert format_value([[1.0, 0.0], [0.0, 2.0]]) == "1.0, 0.0; 0.0, 2.0"


class TestParseConfig:
    def test_sections(self):
        cfg = parse_config_text(BASE)
        assert cfg.problem.true_weights == [3.0, 5.0]
        assert cfg.problem.feature_cov == [[3.0, 0.0], [0.0, 1.0]]
        assert cfg.policy.kind == "oracle_gain"
        assert cfg.policy.lam == 0.3
        assert cfg.replications == 20

    def test_defaults(self):
        cfg = parse_config_text("")
        assert cfg.run.eps == 0.1
        assert cfg.stream.seed == 0
        assert cfg.policy.kind == "estimated_gain"
        assert cfg.emit_plots

    def test_duplicate_key_reports_line(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text(BASE + "run.eps = 0.2\n")
        assert info.value.field == "run.eps"
        assert info.value.line == len(BASE.splitlines()) + 1

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("problem.colour = blue\n")
        assert info.value.field == "problem.colour"
        assert info.value.line == 1

    def test_nonpositive_eps(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text(BASE.replace("run.eps = 0.1", "run.eps = 0"))
        assert info.value.field == "run.eps"
        assert info.value.line == 12

    @pytest.mark.parametrize("value", ["inf", "nan"])
    def test_non_finite_eps(self, value):
        with pytest.raises(ConfigError) as info:
            parse_config_text(BASE.replace("run.eps = 0.1", f"run.eps = {value}"))
        assert info.value.field == "run.eps"
        assert info.value.line == 12

    def test_non_finite_gain_compare_eps_and_noise(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("gain_compare.eps = inf\n")
        assert info.value.field == "gain_compare.eps"
        with pytest.raises(ConfigError) as info:
            parse_config_text(BASE.replace("problem.noise_std = 1.0", "problem.noise_std = inf"))
        assert info.value.field == "problem.noise_std"
        assert info.value.line == 4

    def test_negative_lambda(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("policy.lambda = -1\n")
        assert info.value.field.startswith("policy")

    def test_malformed_line(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("run.eps = 0.1\njust some words\n")
        assert info.value.line == 2
        assert "line 2" in str(info.value)

    def test_malformed_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("run..eps = 0.1\n")

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            parse_config_text("problem.true_weights = 1, 2, 3\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")

    @pytest.mark.parametrize("name", ["n2_tradeoff.cfg", "n10_compare.cfg", "gain_compare.cfg", "verify.cfg"])
    def test_shipped_configs_parse(self, name):
        cfg = load_config(CONFIG_DIR / name)
        assert plan_sweep(resolve_sweep_defaults(cfg))


class TestEffectiveConfig:
    def test_round_trip(self):
        cfg = parse_config_text(
            BASE
            + "sweep.stream.batch_size = 5,\n"
            + "series.gn.policy.kind = grad_norm\n"
            + "series.gn.sweep.policy.mu = 1, 2.5\n"
        )
        again = parse_config_text(to_text(cfg))
        assert again.model_dump() == cfg.model_dump()

    def test_round_trip_of_defaults(self):
        cfg = resolve_sweep_defaults(parse_config_text(""))
        assert parse_config_text(to_text(cfg)).model_dump() == cfg.model_dump()

    def test_every_default_is_spelled_out(self):
        text = to_text(parse_config_text(""))
        assert "run.eps = 0.1" in text
        assert "policy.lambda = 0.1" in text
        assert "verify.appendix_lambdas = 0.0, 0.1, 1.0" in text

    def test_overrides_revalidate(self):
        cfg = parse_config_text(BASE)
        assert with_overrides(cfg, {"stream.seed": 9}).stream.seed == 9
        assert cfg.stream.seed == 0
        with pytest.raises(ConfigError):
            with_overrides(cfg, {"replications": 0})


class TestSweepPlan:
    def test_cartesian_product_in_file_order(self):
        cfg = parse_config_text(BASE + "sweep.policy.lambda = 0.1, 0.2\nsweep.stream.batch_size = 5, 10\n")
        plan = plan_sweep(cfg)
        points = [(c.policy.lam, c.stream.batch_size) for _, _, c in plan]
        assert points == [(0.1, 5), (0.1, 10), (0.2, 5), (0.2, 10)]
        assert all(c.sweep == {} for _, _, c in plan)
        assert plan[1][1] == {"policy.lambda": 0.1, "stream.batch_size": 10}

    def test_series_inherit_or_replace_axes(self):
        cfg = parse_config_text(
            BASE
            + "sweep.policy.lambda = 0.1, 0.2\n"
            + "series.oracle.policy.kind = oracle_gain\n"
            + "series.gn.policy.kind = grad_norm\n"
            + "series.gn.sweep.policy.mu = 1, 2, 3\n"
        )
        plan = plan_sweep(cfg)
        assert [label for label, _, _ in plan] == ["oracle", "oracle", "gn", "gn", "gn"]
        assert [c.policy.lam for label, _, c in plan if label == "oracle"] == [0.1, 0.2]
        assert [c.policy.mu for label, _, c in plan if label == "gn"] == [1.0, 2.0, 3.0]
        assert all(c.policy.kind == "grad_norm" for label, _, c in plan if label == "gn")

    def test_default_lambda_grid(self):
        cfg = resolve_sweep_defaults(parse_config_text(BASE))
        plan = plan_sweep(cfg)
        assert len(plan) == 8
        assert [c.policy.lam for _, _, c in plan] == DEFAULT_LAMBDA_GRID
        assert plan[0][2].policy.lam == pytest.approx(1e-3)
        assert plan[-1][2].policy.lam == pytest.approx(1.0)

    def test_default_grid_per_series(self):
        cfg = parse_config_text(
            BASE + "series.est.policy.kind = estimated_gain\nseries.gn.policy.kind = grad_norm\n"
        )
        resolved = resolve_sweep_defaults(cfg)
        assert resolved.series["est"]["sweep.policy.lambda"] == DEFAULT_LAMBDA_GRID
        assert resolved.series["gn"]["sweep.policy.mu"] == DEFAULT_MU_GRID
        assert len(plan_sweep(resolved)) == 16

    def test_controls_have_no_default_axis(self):
        cfg = resolve_sweep_defaults(parse_config_text("policy.kind = always\n"))
        assert len(plan_sweep(cfg)) == 1


class TestBuildRunConfig:
    def test_explicit_problem(self):
        run_cfg = build_run_config(parse_config_text(BASE))
        np.testing.assert_array_equal(run_cfg.spec.true_weights, [3.0, 5.0])
        assert run_cfg.policy == OracleGain(lam=0.3)
        assert run_cfg.num_agents == 2
        np.testing.assert_array_equal(run_cfg.initial_weights, np.zeros(2))

    def test_seed_override(self):
        assert build_run_config(parse_config_text(BASE), seed=17).stream.seed == 17

    def test_policy_kinds(self):
        assert build_run_config(parse_config_text("policy.lambda = 0.2\n")).policy == EstimatedGain(lam=0.2)
        assert build_run_config(parse_config_text("policy.kind = grad_norm\npolicy.mu = 4\n")).policy == GradNorm(mu=4.0)

    def test_random_diagonal_problem(self):
        cfg = parse_config_text("problem.kind = random_diagonal\nproblem.dim = 10\nproblem.random_seed = 3\n")
        spec = build_run_config(cfg).spec
        assert spec.dim == 10
        diagonal = np.diag(spec.feature_cov)
        assert np.all((diagonal >= 0.2) & (diagonal <= 4.0))
        np.testing.assert_array_equal(build_run_config(cfg).spec.true_weights, spec.true_weights)

    def test_initial_weights_dimension(self):
        cfg = parse_config_text(BASE + "run.initial_weights = 1, 2, 3\n")
        with pytest.raises(ConfigError) as info:
            build_run_config(cfg)
        assert info.value.field == "run.initial_weights"
        assert info.value.line == len(BASE.splitlines()) + 1

    def test_indefinite_covariance(self):
        cfg = parse_config_text(BASE.replace("3, 0; 0, 1", "1, 2; 2, 1"))
        with pytest.raises(ConfigError) as info:
            build_run_config(cfg)
        assert info.value.field == "problem"
        assert info.value.line == 3
