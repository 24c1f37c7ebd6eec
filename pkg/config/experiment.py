"""
Experiment files: a flat dotted-key text format validated with pydantic.

Grammar (one statement per line, '#' starts a comment):

    key = value

    value   := matrix | list | scalar
    matrix  := list (';' list)+          rows of a matrix, e.g. 3, 0; 0, 1
    list    := scalar (',' scalar)+      e.g. 3, 5
    scalar  := true | false | none | integer | float | bare string

Keys name a field of ExperimentConfig by its dotted path (problem.noise_std,
policy.lambda, run.eps, ...). Two prefixes are special:

    sweep.<path> = v1, v2, ...           one grid axis; the grid is the cartesian
                                         product of all axes in file order
    series.<label>.<path> = value        a named curve overriding the base config;
                                         series.<label>.sweep.<path> gives it its
                                         own axes (replacing the base axes)

One file fully determines an experiment.
"""
import itertools
import re
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    PrivateAttr,
    ValidationError,
    field_validator,
    model_validator,
)

from services.data_stream import StreamConfig
from services.errors import ConfigError, InvalidProblemError
from services.policies import PolicyKind, make_policy
from services.regression import ProblemSpec, random_diagonal_problem
from services.simulator import GradientMode, RunConfig

KEY_PATTERN = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z0-9_\-]+)*$")
DEFAULT_SERIES = "default"

DEFAULT_LAMBDA_GRID = [float(v) for v in np.logspace(-3, 0, 8)]
DEFAULT_MU_GRID = [float(v) for v in np.logspace(-1, 2, 8)]
DEFAULT_GAIN_COMPARE_GRID = [float(v) for v in np.logspace(-1, 1.5, 8)]

Number = Union[int, float]


def _as_list(value):
    if value is None or isinstance(value, list):
        return value
    return [value]


def _as_matrix(value):
    value = _as_list(value)
    if value and not isinstance(value[0], list):
        return [value]
    return value


# Single values are accepted where a list is expected
FloatList = Annotated[List[float], BeforeValidator(_as_list)]
NonNegativeList = Annotated[List[NonNegativeFloat], BeforeValidator(_as_list)]
Matrix = Annotated[List[List[float]], BeforeValidator(_as_matrix)]
StepSize = Annotated[float, Field(gt=0, allow_inf_nan=False)]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ProblemSection(Section):
    kind: Literal["explicit", "random_diagonal"] = "explicit"
    dim: PositiveInt = 2
    true_weights: FloatList = [3.0, 5.0]
    feature_cov: Matrix = [[3.0, 0.0], [0.0, 1.0]]
    noise_std: float = Field(1.0, ge=0, allow_inf_nan=False)
    random_seed: NonNegativeInt = 7
    diag_low: PositiveFloat = 0.2
    diag_high: PositiveFloat = 4.0
    weight_scale: NonNegativeFloat = 3.0

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.kind == "explicit":
            if len(self.true_weights) != self.dim:
                raise ValueError(f"true_weights has {len(self.true_weights)} entries but dim={self.dim}")
            if len(self.feature_cov) != self.dim or any(len(row) != self.dim for row in self.feature_cov):
                raise ValueError(f"feature_cov must be {self.dim} x {self.dim}")
        elif self.diag_low > self.diag_high:
            raise ValueError("diag_low must not exceed diag_high")
        return self


class StreamSection(Section):
    batch_size: PositiveInt = 5
    num_agents: PositiveInt = 2
    seed: int = Field(0, ge=0, lt=2 ** 64)
    pool_size: Optional[PositiveInt] = None


class PolicySection(Section):
    kind: Literal["oracle_gain", "estimated_gain", "grad_norm", "always", "never", "random"] = "estimated_gain"
    lam: NonNegativeFloat = Field(0.1, alias="lambda")
    mu: NonNegativeFloat = 1.0
    p: float = Field(0.5, ge=0.0, le=1.0)


class RunSection(Section):
    eps: StepSize = 0.1
    num_iterations: PositiveInt = 10
    initial_weights: Optional[FloatList] = None
    gradient_mode: Literal["stochastic", "exact"] = "stochastic"


class VerifySection(Section):
    burn_in: NonNegativeInt = 40
    limsup_iterations: PositiveInt = 60
    g_mode: Literal["optimum", "worst_case"] = "optimum"
    g_samples: int = Field(100_000, ge=2)
    appendix_samples: int = Field(100_000, ge=10_000)
    appendix_lambdas: NonNegativeList = [0.0, 0.1, 1.0]
    appendix_fractions: FloatList = [0.0, 0.5, 0.9]


class GainCompareSection(Section):
    eps: StepSize = 0.2
    lambdas: NonNegativeList = Field(default_factory=lambda: list(DEFAULT_GAIN_COMPARE_GRID))


class ExperimentConfig(Section):
    problem: ProblemSection = Field(default_factory=ProblemSection)
    stream: StreamSection = Field(default_factory=StreamSection)
    policy: PolicySection = Field(default_factory=PolicySection)
    run: RunSection = Field(default_factory=RunSection)
    verify: VerifySection = Field(default_factory=VerifySection)
    gain_compare: GainCompareSection = Field(default_factory=GainCompareSection)
    sweep: Dict[str, List[Number]] = Field(default_factory=dict)
    series: Dict[str, Dict[str, Any]] = Field(default_factory=dict)
    replications: PositiveInt = 100
    output_dir: Optional[str] = None
    emit_plots: bool = True

    _lines: Dict[str, int] = PrivateAttr(default_factory=dict)

    @field_validator("sweep", mode="before")
    @classmethod
    def _wrap_axes(cls, value):
        if isinstance(value, dict):
            return {k: _as_list(v) for k, v in value.items()}
        return value

    @field_validator("sweep")
    @classmethod
    def _nonempty_axes(cls, value):
        for path, grid in value.items():
            if not grid:
                raise ValueError(f"sweep grid '{path}' is empty")
        return value


# ---------------------------------------------------------------------------
# Text <-> config
# ---------------------------------------------------------------------------


def _parse_scalar(token: str):
    token = token.strip()
    lowered = token.lower()
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    if lowered in ("none", "null"):
        return None
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def _parse_list(raw: str):
    # A trailing comma marks a one-element list
    return [_parse_scalar(t) for t in raw.split(",") if t.strip()]


def parse_value(raw: str):
    raw = raw.strip()
    if ";" in raw:
        return [_parse_list(row) for row in raw.split(";")]
    if "," in raw:
        return _parse_list(raw)
    if raw == "":
        return []
    return _parse_scalar(raw)


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_value(value) -> str:
    if isinstance(value, list):
        if value and isinstance(value[0], list):
            return "; ".join(", ".join(_format_scalar(v) for v in row) for row in value)
        if len(value) == 1:
            # A one-element list needs a trailing comma to stay a list
            return _format_scalar(value[0]) + ","
        return ", ".join(_format_scalar(v) for v in value)
    return _format_scalar(value)


def _set_path(tree: Dict[str, Any], path: str, value):
    parts = path.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"'{part}' is a value, not a section", field=path)
        node = child
    node[parts[-1]] = value


def _validate(raw: Dict[str, Any], lines: Dict[str, int]) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        line = None
        for candidate in (field, *_prefixes(field)):
            if candidate in lines:
                line = lines[candidate]
                break
        raise ConfigError(first["msg"], field=field, line=line) from e
    cfg._lines = dict(lines)
    return cfg


def _prefixes(field: str) -> List[str]:
    parts = field.split(".")
    return [".".join(parts[:i]) for i in range(len(parts) - 1, 0, -1)]


def parse_config_text(text: str) -> ExperimentConfig:
    raw: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError("expected 'key = value'", line=number)
        key, value = (part.strip() for part in content.split("=", 1))
        if not KEY_PATTERN.match(key):
            raise ConfigError(f"malformed key '{key}'", line=number)
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", field=key, line=number)
        lines[key] = number
        parsed = parse_value(value)

        if key.startswith("sweep."):
            raw.setdefault("sweep", {})[key[len("sweep."):]] = parsed
        elif key.startswith("series."):
            parts = key.split(".", 2)
            if len(parts) < 3:
                raise ConfigError("series keys look like series.<label>.<path>", field=key, line=number)
            raw.setdefault("series", {}).setdefault(parts[1], {})[parts[2]] = parsed
        else:
            _set_path(raw, key, parsed)

    return _validate(raw, lines)


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}", field=str(path)) from e
    return parse_config_text(text)


def _flatten(tree: Dict[str, Any], prefix: str = "") -> List[Tuple[str, Any]]:
    items = []
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(_flatten(value, path + "."))
        elif value is not None:
            items.append((path, value))
    return items


def to_text(cfg: ExperimentConfig) -> str:
    """Render cfg in the file grammar, every default spelled out."""
    data = cfg.model_dump(by_alias=True)
    sweep = data.pop("sweep")
    series = data.pop("series")
    lines = ["# effective configuration (defaults resolved)"]
    lines.extend(f"{path} = {format_value(value)}" for path, value in _flatten(data))
    lines.extend(f"sweep.{path} = {format_value(values)}" for path, values in sweep.items())
    for label, overrides in series.items():
        lines.extend(f"series.{label}.{path} = {format_value(value)}" for path, value in overrides.items())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Overrides, series and sweep grids
# ---------------------------------------------------------------------------


def with_overrides(cfg: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """Copy of cfg with dotted-path overrides applied and revalidated."""
    data = cfg.model_dump(by_alias=True)
    for path, value in overrides.items():
        if path.startswith("sweep."):
            data["sweep"][path[len("sweep."):]] = value
        else:
            _set_path(data, path, value)
    return _validate(data, cfg._lines)


def expand_series(cfg: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
    """One config per series; a series' own sweep axes replace the base axes."""
    if not cfg.series:
        return [(DEFAULT_SERIES, cfg)]
    expanded = []
    for label, overrides in cfg.series.items():
        base = cfg.model_copy(update={"series": {}})
        if any(path.startswith("sweep.") for path in overrides):
            base = base.model_copy(update={"sweep": {}})
        expanded.append((label, with_overrides(base, overrides)))
    return expanded


def default_axes(cfg: ExperimentConfig) -> Dict[str, List[Number]]:
    """Grid used when a sweep declares no axes: lambda for gain policies, mu for grad_norm."""
    if cfg.policy.kind in ("oracle_gain", "estimated_gain"):
        return {"policy.lambda": list(DEFAULT_LAMBDA_GRID)}
    if cfg.policy.kind == "grad_norm":
        return {"policy.mu": list(DEFAULT_MU_GRID)}
    return {}


def resolve_sweep_defaults(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill in default grids so the effective config names every axis it ran."""
    if not cfg.series:
        if cfg.sweep:
            return cfg
        return with_overrides(cfg, {f"sweep.{k}": v for k, v in default_axes(cfg).items()})

    series = {}
    for label, overrides in cfg.series.items():
        overrides = dict(overrides)
        if not any(path.startswith("sweep.") for path in overrides) and not cfg.sweep:
            resolved = dict(expand_series(cfg.model_copy(update={"series": {label: overrides}})))[label]
            overrides.update({f"sweep.{k}": v for k, v in default_axes(resolved).items()})
        series[label] = overrides
    resolved = cfg.model_copy(update={"series": series})
    resolved._lines = dict(cfg._lines)
    return resolved


def grid_points(cfg: ExperimentConfig) -> List[Dict[str, Number]]:
    """Cartesian product of the sweep axes, in axis declaration order."""
    if not cfg.sweep:
        return [{}]
    paths = list(cfg.sweep)
    return [dict(zip(paths, values)) for values in itertools.product(*(cfg.sweep[p] for p in paths))]


def plan_sweep(cfg: ExperimentConfig) -> List[Tuple[str, Dict[str, Number], ExperimentConfig]]:
    """Every (series, grid point, concrete config) triple, validated up front."""
    plan = []
    for label, series_cfg in expand_series(cfg):
        for point in grid_points(series_cfg):
            overrides = {path: value for path, value in point.items()}
            plan.append((label, point, with_overrides(series_cfg.model_copy(update={"sweep": {}}), overrides)))
    return plan


# ---------------------------------------------------------------------------
# Domain objects
# ---------------------------------------------------------------------------


def build_problem(cfg: ExperimentConfig) -> ProblemSpec:
    p = cfg.problem
    try:
        if p.kind == "random_diagonal":
            return random_diagonal_problem(
                dim=p.dim,
                seed=p.random_seed,
                diag_low=p.diag_low,
                diag_high=p.diag_high,
                weight_scale=p.weight_scale,
                noise_std=p.noise_std,
            )
        return ProblemSpec(
            true_weights=np.array(p.true_weights),
            feature_cov=np.array(p.feature_cov),
            noise_std=p.noise_std,
        )
    except InvalidProblemError as e:
        raise ConfigError(str(e), field="problem", line=cfg._lines.get("problem.feature_cov")) from e


def build_policy(cfg: ExperimentConfig) -> PolicyKind:
    return make_policy(cfg.policy.kind, lam=cfg.policy.lam, mu=cfg.policy.mu, p=cfg.policy.p)


def build_run_config(cfg: ExperimentConfig, seed: Optional[int] = None) -> RunConfig:
    spec = build_problem(cfg)
    stream = StreamConfig(
        spec=spec,
        batch_size=cfg.stream.batch_size,
        num_agents=cfg.stream.num_agents,
        seed=cfg.stream.seed if seed is None else seed,
        pool_size=cfg.stream.pool_size,
    )
    initial = cfg.run.initial_weights
    if initial is not None and len(initial) != spec.dim:
        raise ConfigError(
            f"initial_weights has {len(initial)} entries but dim={spec.dim}",
            field="run.initial_weights",
            line=cfg._lines.get("run.initial_weights"),
        )
    return RunConfig(
        stream=stream,
        policy=build_policy(cfg),
        eps=cfg.run.eps,
        num_iterations=cfg.run.num_iterations,
        initial_weights=None if initial is None else np.array(initial),
        gradient_mode=GradientMode(cfg.run.gradient_mode),
    )
