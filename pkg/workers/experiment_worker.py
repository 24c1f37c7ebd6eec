"""
The four experiment commands and the files they write.

Every command resolves its configuration first, writes it back as
effective.cfg, and only then runs. All CSVs open with the schema tag line and
use repr() floats, so reruns of one config are byte-identical.
"""
import csv
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.stats import spearmanr

from config.experiment import (
    ExperimentConfig,
    build_run_config,
    format_value,
    load_config,
    plan_sweep,
    resolve_sweep_defaults,
    to_text,
    with_overrides,
)
from config.settings import settings
from services.data_stream import draw_batch
from services.errors import ConfigError
from services.policies import EstimatedGain, OracleGain
from services.regression import objective
from services.simulator import (
    RunConfig,
    RunTrace,
    replay_check,
    replication_seeds,
    run,
    step,
    write_trace_log,
)
from services.svg_plot import write_xy_chart_svg
from services.theory import (
    TheoremReport,
    format_verdict_block,
    verify_appendix_inequality,
    verify_limsup,
    verify_theorem1,
    verify_theorem2_runs,
)
from workers.replication_worker import ReplicationWorker, get_replication_worker

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DIVERGED = 3
EXIT_VERIFY_FAILED = 4

APPENDIX_SEED_TAG = 0x41
MATCHED_BUDGET_POINTS = 8
MONOTONE_SPEARMAN = 0.9  # rank correlation counted as a monotone objective curve
STRICT_IMPROVEMENT = 0.05  # relative excess reduction counted as strictly better

SWEEP_COLUMNS = [
    "series", "policy", "grid_index", "params", "swept_value",
    "mean_final_objective", "std_final_objective",
    "mean_total_transmits", "std_total_transmits", "mean_any_agent_transmits",
    "diverged_runs", "replications", "seed_first", "seed_last",
]
TRADEOFF_COLUMNS = [
    "series", "parameter", "points", "spearman_comm", "spearman_objective",
    "comm_strictly_decreasing", "objective_monotone",
]
MATCHED_COLUMNS = [
    "budget", "series", "interpolated_final_objective", "excess_over_optimum",
    "best_other_excess", "relative_improvement", "no_worse", "strictly_better",
]
GAIN_COMPARE_COLUMNS = [
    "lambda", "replications", "oracle_transmit_rate", "estimated_transmit_rate", "agreement_rate",
    "mean_objective_oracle", "mean_objective_estimated",
]
VERIFY_COLUMNS = [
    "check", "kind", "verdict", "passed", "observed_value", "bound_value", "margin",
    "standard_error", "replications", "message",
]


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> None:
    """Schema tag line, header, then one line per row in the given order."""
    with Path(path).open("w", newline="") as f:
        f.write(settings.CSV_SCHEMA_TAG + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def _mean_std(values) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


def aggregate_traces(traces: Sequence[RunTrace]) -> Dict[str, Any]:
    """Per-grid-point statistics over replications."""
    final_mean, final_std = _mean_std([t.final_objective for t in traces])
    comm_mean, comm_std = _mean_std([t.total_transmits for t in traces])
    seeds = [t.seed for t in traces]
    return {
        "mean_final_objective": final_mean,
        "std_final_objective": final_std,
        "mean_total_transmits": comm_mean,
        "std_total_transmits": comm_std,
        "mean_any_agent_transmits": float(np.mean([t.any_agent_transmits for t in traces])),
        "diverged_runs": sum(1 for t in traces if t.diverged),
        "replications": len(traces),
        "seed_first": min(seeds),
        "seed_last": max(seeds),
    }


def tradeoff_statistics(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """
    Spearman correlation of the swept value against mean communication and
    against mean final objective, per series. Only single-axis series qualify.

    comm_strictly_decreasing: mean communication falls at every step of the
    swept value. objective_monotone: spearman_objective >= MONOTONE_SPEARMAN.
    """
    stats = []
    for label in dict.fromkeys(r["series"] for r in rows):
        series_rows = [r for r in rows if r["series"] == label]
        params = {r["params"].split("=", 1)[0] for r in series_rows}
        if len(params) != 1 or any(";" in r["params"] for r in series_rows):
            logger.info(f"ℹ️  Series '{label}' sweeps several axes, no tradeoff statistics")
            continue
        series_rows = sorted(series_rows, key=lambda r: r["swept_value"])
        values = [r["swept_value"] for r in series_rows]
        comm = [r["mean_total_transmits"] for r in series_rows]
        if len(values) < 2:
            rho_comm = rho_obj = float("nan")
        else:
            rho_comm, _ = spearmanr(values, comm)
            rho_obj, _ = spearmanr(values, [r["mean_final_objective"] for r in series_rows])
        decreasing = len(values) >= 2 and bool(np.all(np.diff(comm) < 0))
        monotone = bool(rho_obj >= MONOTONE_SPEARMAN)
        if len(values) >= 2 and not (decreasing and monotone):
            logger.warning(
                f"⚠️  Series '{label}': comm decreasing={decreasing}, "
                f"spearman(value, J)={float(rho_obj):.3f} (monotone needs >= {MONOTONE_SPEARMAN})"
            )
        stats.append({
            "series": label,
            "parameter": params.pop(),
            "points": len(values),
            "spearman_comm": float(rho_comm),
            "spearman_objective": float(rho_obj),
            "comm_strictly_decreasing": decreasing,
            "objective_monotone": monotone,
        })
    return stats


def matched_budget_comparison(
    rows: Sequence[Dict[str, Any]],
    optimal_objective: float,
    points: int = MATCHED_BUDGET_POINTS,
) -> List[Dict[str, Any]]:
    """
    Interpolate each series' (mean communication, mean final J) curve onto a
    shared grid of budgets spanning the overlap of all curves.

    Each row is compared against the best other series at the same budget:
    relative_improvement = 1 - excess / best_other_excess, no_worse when the
    excess does not exceed it, strictly_better when the improvement reaches
    STRICT_IMPROVEMENT.
    """
    curves = {}
    for label in dict.fromkeys(r["series"] for r in rows):
        comm = np.array([r["mean_total_transmits"] for r in rows if r["series"] == label])
        final = np.array([r["mean_final_objective"] for r in rows if r["series"] == label])
        keep = np.isfinite(comm) & np.isfinite(final)
        unique_comm, inverse = np.unique(comm[keep], return_inverse=True)
        # Equal budgets are averaged so the abscissae are strictly increasing
        averaged = np.bincount(inverse, weights=final[keep]) / np.bincount(inverse)
        curves[label] = (unique_comm, averaged)

    if len(curves) < 2 or any(c[0].size == 0 for c in curves.values()):
        return []
    low = max(c[0][0] for c in curves.values())
    high = min(c[0][-1] for c in curves.values())
    if low > high:
        logger.warning("⚠️  Series communication ranges do not overlap, no matched budgets")
        return []

    budgets = np.linspace(low, high, points) if high > low else np.array([low])
    matched = []
    for budget in budgets:
        values = {label: float(np.interp(budget, comm, final)) for label, (comm, final) in curves.items()}
        for label, value in values.items():
            excess = value - optimal_objective
            best_other = min(v for other, v in values.items() if other != label) - optimal_objective
            improvement = 1.0 - excess / best_other if best_other > 0 else float("nan")
            matched.append({
                "budget": float(budget),
                "series": label,
                "interpolated_final_objective": value,
                "excess_over_optimum": excess,
                "best_other_excess": best_other,
                "relative_improvement": improvement,
                "no_worse": excess <= best_other,
                "strictly_better": bool(improvement >= STRICT_IMPROVEMENT),
            })
    return matched


def gain_compare_rows(run_cfg: RunConfig, lambdas: Sequence[float], seeds: Sequence[int]) -> List[Dict[str, Any]]:
    """
    Single step from w0 under the oracle and the estimated trigger, on the same
    batches, for every lambda. Rates are over replications and agents.
    """
    spec, eps, w0 = run_cfg.spec, run_cfg.eps, run_cfg.initial_weights
    seeds = sorted(seeds)
    pairs = [(OracleGain(lam=lam), EstimatedGain(lam=lam)) for lam in lambdas]
    m = run_cfg.num_agents

    oracle_tx = np.zeros((len(pairs), len(seeds), m), dtype=bool)
    estimated_tx = np.zeros_like(oracle_tx)
    oracle_j = np.zeros((len(pairs), len(seeds)))
    estimated_j = np.zeros_like(oracle_j)

    for r, seed in enumerate(seeds):
        stream = run_cfg.stream.with_seed(seed)
        batches = [draw_batch(stream, i, 0) for i in range(m)]
        for l, (oracle, estimated) in enumerate(pairs):
            w_oracle, decisions_oracle, _ = step(spec, oracle, eps, w0, batches, gradient_mode=run_cfg.gradient_mode)
            w_estimated, decisions_estimated, _ = step(
                spec, estimated, eps, w0, batches, gradient_mode=run_cfg.gradient_mode
            )
            oracle_tx[l, r] = [d.transmit for d in decisions_oracle]
            estimated_tx[l, r] = [d.transmit for d in decisions_estimated]
            oracle_j[l, r] = objective(spec, w_oracle)
            estimated_j[l, r] = objective(spec, w_estimated)

    rows = []
    for l, lam in enumerate(lambdas):
        rows.append({
            "lambda": float(lam),
            "replications": len(seeds),
            "oracle_transmit_rate": float(oracle_tx[l].mean()),
            "estimated_transmit_rate": float(estimated_tx[l].mean()),
            "agreement_rate": float((oracle_tx[l] == estimated_tx[l]).mean()),
            "mean_objective_oracle": float(oracle_j[l].mean()),
            "mean_objective_estimated": float(estimated_j[l].mean()),
        })
    return rows


class ExperimentWorker:
    """Runs one resolved ExperimentConfig into an output directory."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path, runner: Optional[ReplicationWorker] = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.runner = runner or get_replication_worker()

    def _prepare(self, cfg: ExperimentConfig):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "effective.cfg").write_text(to_text(cfg))

    def run(self) -> int:
        self._prepare(self.cfg)
        run_cfg = build_run_config(self.cfg)
        logger.info(f"🚀 Single run: seed={run_cfg.stream.seed}, K={run_cfg.num_iterations}")
        trace = run(run_cfg)
        write_trace_log(self.out_dir / "trace.log", trace)

        replay_ok = replay_check(trace, run_cfg)
        if not replay_ok:
            logger.error("❌ Replay of the recorded trace does not reproduce the iterates")

        row = {
            "seed": trace.seed,
            "policy": trace.policy,
            "eps": trace.eps,
            "steps": trace.num_steps,
            "status": trace.status.value,
            "initial_objective": float(trace.objective[0]),
            "final_objective": trace.final_objective,
            "optimal_objective": run_cfg.spec.optimal_objective,
            "total_transmits": trace.total_transmits,
            "any_agent_transmits": trace.any_agent_transmits,
            "replay_ok": replay_ok,
        }
        per_agent = {f"transmits_agent{i}": int(c) for i, c in enumerate(trace.per_agent_transmits)}
        row.update(per_agent)
        write_csv(self.out_dir / "summary.csv", list(row), [row])

        if self.cfg.emit_plots:
            points = list(enumerate(trace.objective.tolist()))
            write_xy_chart_svg(
                self.out_dir / "objective.svg", f"J(w_k), {trace.policy}", "iteration k", "J(w_k)",
                [(trace.policy, points)],
            )

        if trace.diverged:
            logger.error(f"❌ Run diverged after {trace.num_steps} steps")
            return EXIT_DIVERGED
        logger.info(f"✅ Run finished: J(w_K)={trace.final_objective:.6g}, {trace.total_transmits} uplinks")
        return EXIT_OK

    def sweep(self) -> int:
        cfg = resolve_sweep_defaults(self.cfg)
        plan = plan_sweep(cfg)
        self._prepare(cfg)
        logger.info(f"🚀 Sweep: {len(plan)} grid points x {cfg.replications} replications")

        rows = []
        optimal = None
        for index, (label, point, point_cfg) in enumerate(plan):
            run_cfg = build_run_config(point_cfg)
            optimal = run_cfg.spec.optimal_objective
            traces = self.runner(run_cfg, replication_seeds(run_cfg.stream.seed, point_cfg.replications))
            row = {
                "series": label,
                "policy": traces[0].policy,
                "grid_index": index,
                "params": ";".join(f"{path}={format_value(value)}" for path, value in point.items()),
                "swept_value": float(list(point.values())[-1]) if point else float("nan"),
            }
            row.update(aggregate_traces(traces))
            rows.append(row)
            logger.info(
                f"📊 [{label}] {row['params'] or 'base'}: comm={row['mean_total_transmits']:.3f} "
                f"J={row['mean_final_objective']:.6g}"
            )

        write_csv(self.out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
        write_csv(self.out_dir / "tradeoff.csv", TRADEOFF_COLUMNS, tradeoff_statistics(rows))
        series_labels = list(dict.fromkeys(r["series"] for r in rows))
        if len(series_labels) >= 2:
            write_csv(self.out_dir / "matched.csv", MATCHED_COLUMNS, matched_budget_comparison(rows, optimal))

        if cfg.emit_plots:
            write_xy_chart_svg(
                self.out_dir / "sweep.svg",
                "communication vs. learning performance",
                "mean total transmissions",
                "mean J(w_K)",
                [
                    (label, [(r["mean_total_transmits"], r["mean_final_objective"]) for r in rows if r["series"] == label])
                    for label in series_labels
                ],
            )

        diverged = sum(r["diverged_runs"] for r in rows)
        if diverged:
            logger.error(f"❌ {diverged} runs diverged during the sweep")
            return EXIT_DIVERGED
        logger.info(f"✅ Sweep finished: {len(rows)} rows in {self.out_dir / 'sweep.csv'}")
        return EXIT_OK

    def gain_compare(self) -> int:
        self._prepare(self.cfg)
        gc = self.cfg.gain_compare
        run_cfg = build_run_config(self.cfg).replace(eps=gc.eps, num_iterations=1)
        seeds = replication_seeds(run_cfg.stream.seed, self.cfg.replications)
        logger.info(f"🚀 Gain comparison: eps={gc.eps}, {len(gc.lambdas)} lambdas x {len(seeds)} replications")

        rows = gain_compare_rows(run_cfg, gc.lambdas, seeds)
        write_csv(self.out_dir / "gain_compare.csv", GAIN_COMPARE_COLUMNS, rows)
        for row in rows:
            logger.info(f"📊 lambda={row['lambda']:.4g}: agreement={row['agreement_rate']:.3f}")

        if self.cfg.emit_plots:
            write_xy_chart_svg(
                self.out_dir / "gain_compare.svg",
                "oracle vs. estimated gain, one step",
                "transmit rate",
                "mean J(w_1)",
                [
                    ("oracle_gain", [(r["oracle_transmit_rate"], r["mean_objective_oracle"]) for r in rows]),
                    ("estimated_gain", [(r["estimated_transmit_rate"], r["mean_objective_estimated"]) for r in rows]),
                ],
            )
        logger.info("✅ Gain comparison finished")
        return EXIT_OK

    def verify(self) -> int:
        self._prepare(self.cfg)
        reports = verify_reports(self.cfg, self.runner)
        (self.out_dir / "verify.txt").write_text(format_verdict_block(reports))
        write_csv(self.out_dir / "verify.csv", VERIFY_COLUMNS, [r.to_row() for r in reports])

        failed = [r.check for r in reports if r.counts_as_failure]
        if failed:
            logger.error(f"❌ Verification failed: {', '.join(failed)}")
            return EXIT_VERIFY_FAILED
        logger.info(f"✅ All applicable checks pass ({len(reports)} reported)")
        return EXIT_OK


def appendix_points(run_cfg: RunConfig, fractions: Sequence[float]) -> List[np.ndarray]:
    """Points on the segment from w0 towards w*."""
    w0, w_star = run_cfg.initial_weights, run_cfg.spec.true_weights
    return [w0 + f * (w_star - w0) for f in fractions]


def verify_reports(cfg: ExperimentConfig, runner) -> List[TheoremReport]:
    """Every check cmd_verify runs, in table order."""
    v = cfg.verify
    run_cfg = build_run_config(cfg)
    policy = run_cfg.policy
    reports = [
        verify_theorem1(run_cfg, cfg.replications, runner, g_mode=v.g_mode, g_samples=v.g_samples),
        verify_limsup(
            run_cfg.replace(num_iterations=v.limsup_iterations),
            cfg.replications,
            v.burn_in,
            runner,
            g_mode=v.g_mode,
            g_samples=v.g_samples,
        ),
    ]

    reports.append(verify_theorem2_runs(run_cfg, cfg.replications, runner))

    gains = ["estimated"] if isinstance(policy, EstimatedGain) else ["exact", "estimated"]
    index = 0
    for w in appendix_points(run_cfg, v.appendix_fractions):
        for appendix_lam in v.appendix_lambdas:
            for gain in gains:
                rng = np.random.default_rng(np.random.SeedSequence([run_cfg.stream.seed, APPENDIX_SEED_TAG, index]))
                index += 1
                reports.append(
                    verify_appendix_inequality(
                        run_cfg.spec,
                        w,
                        run_cfg.eps,
                        appendix_lam,
                        v.appendix_samples,
                        rng,
                        batch_size=run_cfg.stream.batch_size,
                        gain=gain,
                    )
                )
    return reports


def load_experiment(
    config_path: Path,
    out: Optional[str] = None,
    seed: Optional[int] = None,
    replications: Optional[int] = None,
    no_plots: bool = False,
) -> Tuple[ExperimentConfig, Path]:
    """Parse the file and fold command-line overrides into it."""
    cfg = load_config(config_path)
    overrides: Dict[str, Any] = {}
    if seed is not None:
        overrides["stream.seed"] = seed
    if replications is not None:
        overrides["replications"] = replications
    if out is not None:
        overrides["output_dir"] = out
    if no_plots:
        overrides["emit_plots"] = False
    if overrides:
        cfg = with_overrides(cfg, overrides)
    out_dir = Path(cfg.output_dir or settings.OUTPUT_DIR)
    return cfg, out_dir


COMMANDS = {
    "run": ExperimentWorker.run,
    "sweep": ExperimentWorker.sweep,
    "gain-compare": ExperimentWorker.gain_compare,
    "verify": ExperimentWorker.verify,
}


def execute(command: str, config_path: Path, **overrides) -> int:
    """Load, run one command and map configuration errors to exit code 2."""
    try:
        cfg, out_dir = load_experiment(config_path, **overrides)
        worker = ExperimentWorker(cfg, out_dir)
        return COMMANDS[command](worker)
    except ConfigError as e:
        logger.error(f"❌ Invalid configuration {config_path}: {e}")
        return EXIT_CONFIG_ERROR


def cmd_run(config_path: Path, **overrides) -> int:
    return execute("run", config_path, **overrides)


def cmd_sweep(config_path: Path, **overrides) -> int:
    return execute("sweep", config_path, **overrides)


def cmd_gain_compare(config_path: Path, **overrides) -> int:
    return execute("gain-compare", config_path, **overrides)


def cmd_verify(config_path: Path, **overrides) -> int:
    return execute("verify", config_path, **overrides)
