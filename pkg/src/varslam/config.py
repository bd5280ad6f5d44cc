"""Experiment configuration: flat ``key = value`` files with dotted namespaces.

Example::

    # standard dynamic scene
    scene.n_static = 150
    scene.unknown_motion.velocity = 0.01, 0, 0.004
    experiment.ablation = full
    experiment.seeds = 1,2,3
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any, Iterator, List, Tuple

from .errors import ConfigError, InvalidArgumentError
from .kernel import DEFAULT_QUAD_NODES, DEFAULT_TAU, AlphaGrid
from .sim import SceneConfig
from .solver import BarronAdaptive, BarronFixed, Huber, KernelMode, SolverConfig


def mode_name(mode: KernelMode) -> str:
    return {Huber: "huber", BarronFixed: "barron_fixed",
            BarronAdaptive: "barron_adaptive"}[type(mode)]

ABLATIONS = ("full", "semantic_only", "kernel_only", "baseline")


@dataclass(frozen=True)
class KernelSettings:
    huber_delta: float = 1.345
    tracking_alpha: float = 1.0
    grid_min: float = -10.0
    grid_max: float = 2.0
    grid_step: float = 0.1
    tau: float = DEFAULT_TAU
    quad_nodes: int = DEFAULT_QUAD_NODES

    @property
    def grid(self) -> AlphaGrid:
        return AlphaGrid(self.grid_min, self.grid_max, self.grid_step)


@dataclass(frozen=True)
class RunSettings:
    keyframe_interval: int = 5
    window_size: int = 5
    max_fixed_keyframes: int = 3
    depth_margin: float = 0.3
    cull_outliers: bool = True
    tracking_rounds: int = 4
    search_radius: float = 15.0
    max_point_strikes: int = 2
    min_point_keyframes: int = 3
    max_dt: float = 0.02
    align: bool = True
    warm_start_alpha: bool = True
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = SceneConfig()
    solver: SolverConfig = field(default_factory=SolverConfig)
    kernel: KernelSettings = KernelSettings()
    run: RunSettings = RunSettings()
    ablation: str = "full"
    seeds: Tuple[int, ...] = tuple(range(1, 11))
    output_dir: str = "out"

    @property
    def filter_enabled(self) -> bool:
        return self.ablation in ("full", "semantic_only")

    @property
    def adaptive(self) -> bool:
        return self.ablation in ("full", "kernel_only")

    @property
    def kernel_mode(self) -> KernelMode:
        """Local-BA kernel implied by the ablation."""
        if self.adaptive:
            return BarronAdaptive(self.kernel.grid, 1.0)
        return Huber(self.kernel.huber_delta)

    @property
    def tracking_mode(self) -> KernelMode:
        if self.adaptive:
            return BarronFixed(self.kernel.tracking_alpha, 1.0)
        return Huber(self.kernel.huber_delta)

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"experiment.ablation must be one of {', '.join(ABLATIONS)}; got {self.ablation!r}")
        if not self.seeds:
            raise ConfigError("experiment.seeds must not be empty")
        try:
            self.scene.validate()
            self.solver.validate()
            self.kernel.grid
            if not self.kernel.huber_delta > 0:
                raise InvalidArgumentError("kernel.huber_delta must be positive")
            BarronFixed(self.kernel.tracking_alpha)
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from None
        run = self.run
        if run.keyframe_interval < 1:
            raise ConfigError("run.keyframe_interval must be >= 1")
        if run.window_size < 2:
            raise ConfigError("run.window_size must be >= 2")
        if run.max_fixed_keyframes < 0:
            raise ConfigError("run.max_fixed_keyframes must be >= 0")
        if not run.search_radius > 0:
            raise ConfigError("run.search_radius must be positive")
        if run.tracking_rounds < 1:
            raise ConfigError("run.tracking_rounds must be >= 1")
        if run.max_point_strikes < 1:
            raise ConfigError("run.max_point_strikes must be >= 1")
        if run.min_point_keyframes < 2:
            raise ConfigError("run.min_point_keyframes must be >= 2")
        if not run.depth_margin > 0:
            raise ConfigError("run.depth_margin must be positive")
        if not run.max_dt > 0:
            raise ConfigError("run.max_dt must be positive")
        if run.workers < 1:
            raise ConfigError("run.workers must be >= 1")


# top-level experiment fields live under "experiment."
_EXPERIMENT_KEYS = {"ablation", "seeds", "output_dir"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_seeds(text: str) -> Tuple[int, ...]:
    """Comma list with inclusive ranges, e.g. ``1,2,5-8``."""
    seeds: List[int] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        if sep:
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("empty seed list")
    return tuple(seeds)


def _convert(text: str, current: Any) -> Any:
    if isinstance(current, bool):
        return _parse_bool(text)
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        parts = [p for p in text.replace(",", " ").split()]
        conv = int if current and isinstance(current[0], int) else float
        return tuple(conv(p) for p in parts)
    return text.strip()


def _set_path(obj, path: List[str], text: str, full_key: str):
    name = path[0]
    names = {f.name for f in fields(obj)}
    if name not in names:
        raise ConfigError(f"unknown configuration key: {full_key}")
    current = getattr(obj, name)
    if len(path) == 1:
        if is_dataclass(current):
            raise ConfigError(f"configuration key {full_key} names a section, not a value")
        try:
            value = _convert(text, current)
        except ValueError as exc:
            raise ConfigError(f"{full_key}: {exc}") from None
        return replace(obj, **{name: value})
    if not is_dataclass(current):
        raise ConfigError(f"unknown configuration key: {full_key}")
    return replace(obj, **{name: _set_path(current, path[1:], text, full_key)})


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig(solver=SolverConfig())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip()
        path = key.split(".")
        if path[0] == "experiment":
            if len(path) != 2 or path[1] not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown configuration key: {key}")
            path = path[1:]
        elif path[0] in _EXPERIMENT_KEYS:
            raise ConfigError(f"unknown configuration key: {key}")
        if path == ["seeds"]:
            try:
                cfg = replace(cfg, seeds=parse_seeds(value))
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            continue
        cfg = _set_path(cfg, path, value.strip(), key)
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def iter_items(obj, prefix: str = "") -> Iterator[Tuple[str, str]]:
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            yield from iter_items(value, f"{prefix}{f.name}.")
        else:
            key = f"{prefix}{f.name}"
            if not prefix and f.name in _EXPERIMENT_KEYS:
                key = f"experiment.{f.name}"
            yield key, _format_value(value)


def format_manifest(cfg: ExperimentConfig) -> str:
    """Every resolved key, including defaults, in config-file syntax."""
    lines = ["# resolved configuration"]
    lines += [f"{k} = {v}" for k, v in iter_items(cfg)]
    lines.append("# resolved by ablation")
    lines.append(f"resolved.filter_enabled = {_format_value(cfg.filter_enabled)}")
    lines.append(f"resolved.kernel_mode = {mode_name(cfg.kernel_mode)}")
    lines.append(f"resolved.tracking_kernel = {mode_name(cfg.tracking_mode)}")
    return "\n".join(lines) + "\n"
