"""Experiment harness: JSON config validation, deterministic runners for every
mode, CSV metrics, and plot-data emission.

Config files are strict UTF-8 JSON: unknown keys are errors, and every section
is validated against its module's invariants before anything runs. One root
seed feeds the whole experiment; every consumer derives its own stream from
(root, module-tag, index), so adding a metric never shifts the optimization
path. metrics.csv is byte-identical for identical (config, seed) regardless
of CSD_THREADS; wall-clock timings go to a separate timings.csv that carries
no such promise.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import canvas as canvas_mod
from . import distill as distill_mod
from . import kernel as kernel_mod
from . import oracle as oracle_mod
from . import schedule as schedule_mod
from . import svgd as svgd_mod
from .bridge import BridgeClient, BridgeEndpoint, StdioTransport, TcpTransport
from .canvas import Canvas, PatchGrid, seam_discrepancy  # re-exported metric
from .distill import DdsBaseline, DistillConfig, LrDecay
from .errors import ConfigError, NumericError
from .kernel import KernelSpec
from .oracle import AnalyticOracle, Condition, GuidanceParams, edit_oracle_from_spec
from .schedule import NoiseSchedule
from .svgd import ParticleSet

__all__ = [
    "ExperimentConfig",
    "MetricsRow",
    "derive_rng",
    "load_config",
    "validate_config",
    "run",
    "run_experiment",
    "seam_discrepancy",
    "emit_plotdata",
    "run_checks",
]

MODES = ("svgd", "generate", "edit-canvas", "edit-frames", "check")

METRICS_COLUMNS = (
    "step",
    "eta",
    "t_drawn",
    "mean_grad_norm",
    "mean_pairwise_distance",
    "min_pairwise_distance",
    "seam_discrepancy",
    "stein_residual",
)


@dataclass(frozen=True)
class MetricsRow:
    """One optimization step's metrics. ``wall_ms`` is recorded but excluded
    from metrics.csv so the file stays byte-reproducible."""

    step: int
    eta: float
    t_drawn: float | None
    mean_grad_norm: float
    mean_pairwise_distance: float
    min_pairwise_distance: float
    seam_discrepancy: float | None
    stein_residual: float | None
    wall_ms: float


def derive_rng(root_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """A generator keyed by (root seed, consumer tag, index), stable across runs."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    seq = np.random.SeedSequence([int(root_seed) & (2**64 - 1), *words, int(index)])
    return np.random.default_rng(seq)


# ---------------------------------------------------------------------------
# config parsing


def _expect_object(data, path: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    return data


def _check_keys(data: dict, path: str, allowed, required=()):
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"{path}: missing keys {missing}")


def _number(data: dict, key: str, path: str, default=None):
    if key not in data:
        if default is None:
            raise ConfigError(f"{path}.{key}: required")
        return default
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number, got {v!r}")
    return v


def _integer(data: dict, key: str, path: str, default=None):
    v = _number(data, key, path, default)
    if int(v) != v:
        raise ConfigError(f"{path}.{key}: expected an integer, got {v!r}")
    return int(v)


def _vector(data: dict, key: str, path: str, dim: int | None = None):
    v = data.get(key)
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ConfigError(f"{path}.{key}: expected a list of numbers")
    if dim is not None and len(v) != dim:
        raise ConfigError(f"{path}.{key}: expected {dim} entries, got {len(v)}")
    return np.asarray(v, dtype=float)


def _build(path: str, ctor, *args, **kwargs):
    try:
        return ctor(*args, **kwargs)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


def _parse_schedule(data, path: str) -> NoiseSchedule:
    data = _expect_object(data, path)
    _check_keys(data, path, ("kind", "t_min", "t_max"))
    return _build(
        path,
        NoiseSchedule,
        kind=data.get("kind", "vp-cosine"),
        t_min=_number(data, "t_min", path, schedule_mod.EDIT_T_RANGE[0]),
        t_max=_number(data, "t_max", path, schedule_mod.EDIT_T_RANGE[1]),
    )


def _parse_kernel(data, path: str) -> KernelSpec:
    data = _expect_object(data, path)
    _check_keys(data, path, ("distance", "bandwidth"))
    bandwidth = data.get("bandwidth", kernel_mod.MEDIAN)
    if not isinstance(bandwidth, str):
        if isinstance(bandwidth, bool) or not isinstance(bandwidth, (int, float)):
            raise ConfigError(f"{path}.bandwidth: expected a number or {kernel_mod.MEDIAN!r}")
        bandwidth = float(bandwidth)
    return _build(path, KernelSpec, distance=data.get("distance", kernel_mod.SQUARED_EUCLIDEAN), bandwidth=bandwidth)


def _parse_guidance(data, path: str) -> GuidanceParams:
    data = _expect_object(data, path)
    _check_keys(data, path, ("omega_y", "omega_s"))
    return _build(
        path,
        GuidanceParams,
        omega_y=_number(data, "omega_y", path, 7.5),
        omega_s=_number(data, "omega_s", path, 1.5),
    )


def _parse_baseline(value, path: str):
    if isinstance(value, str):
        return value
    value = _expect_object(value, path)
    _check_keys(value, path, ("dds",), required=("dds",))
    dds = _expect_object(value["dds"], f"{path}.dds")
    _check_keys(dds, f"{path}.dds", ("source_text_ref", "target_text_ref"), required=("source_text_ref", "target_text_ref"))
    return DdsBaseline(source_text_ref=str(dds["source_text_ref"]), target_text_ref=str(dds["target_text_ref"]))


def _parse_distill(data, path: str, schedule: NoiseSchedule, kernel: KernelSpec) -> DistillConfig:
    data = _expect_object(data, path)
    _check_keys(
        data,
        path,
        ("guidance", "weight_policy", "noise_sharing", "baseline", "kernel_on", "svgd", "eta", "lr_decay", "steps"),
    )
    guidance = _parse_guidance(data.get("guidance", {}), f"{path}.guidance")
    decay_data = _expect_object(data.get("lr_decay", {}), f"{path}.lr_decay")
    _check_keys(decay_data, f"{path}.lr_decay", ("every", "factor"))
    decay = _build(
        f"{path}.lr_decay",
        LrDecay,
        every=_integer(decay_data, "every", f"{path}.lr_decay", 100),
        factor=_number(decay_data, "factor", f"{path}.lr_decay", 1.0),
    )
    svgd_flag = data.get("svgd", True)
    if not isinstance(svgd_flag, bool):
        raise ConfigError(f"{path}.svgd: expected a boolean")
    return _build(
        path,
        DistillConfig,
        guidance=guidance,
        schedule=schedule,
        weight_policy=data.get("weight_policy", "constant-one"),
        noise_sharing=data.get("noise_sharing", "shared"),
        baseline=_parse_baseline(data.get("baseline", distill_mod.SOURCE_CONDITIONAL), f"{path}.baseline"),
        kernel=kernel,
        kernel_on=data.get("kernel_on", "noised"),
        svgd=svgd_flag,
        eta=_number(data, "eta", path, 0.05),
        lr_decay=decay,
        steps=_integer(data, "steps", path, 100),
    )


def _parse_condition(data, path: str) -> Condition:
    data = _expect_object(data, path)
    _check_keys(data, path, ("kind", "source_ref", "text_ref"), required=("kind",))
    kind = data["kind"]
    src = data.get("source_ref")
    txt = data.get("text_ref")
    return _build(path, Condition, kind, source_ref=src, text_ref=txt)


def _parse_bridge(data, path: str) -> BridgeEndpoint:
    data = _expect_object(data, path)
    _check_keys(data, path, ("transport", "timeout_ms", "max_batch"), required=("transport",))
    transport = _expect_object(data["transport"], f"{path}.transport")
    _check_keys(transport, f"{path}.transport", ("stdio", "tcp"))
    if ("stdio" in transport) == ("tcp" in transport):
        raise ConfigError(f"{path}.transport: exactly one of 'stdio' or 'tcp' required")
    if "stdio" in transport:
        argv = transport["stdio"]
        if not isinstance(argv, list) or not argv or not all(isinstance(a, str) for a in argv):
            raise ConfigError(f"{path}.transport.stdio: expected a non-empty list of strings")
        t = StdioTransport(argv=tuple(argv))
    else:
        tcp = _expect_object(transport["tcp"], f"{path}.transport.tcp")
        _check_keys(tcp, f"{path}.transport.tcp", ("host", "port"), required=("host", "port"))
        t = TcpTransport(host=str(tcp["host"]), port=_integer(tcp, "port", f"{path}.transport.tcp"))
    return _build(
        path,
        BridgeEndpoint,
        transport=t,
        timeout_ms=_integer(data, "timeout_ms", path, 10_000),
        max_batch=_integer(data, "max_batch", path, 8),
    )


@dataclass(frozen=True)
class SvgdSection:
    n: int
    dim: int
    init_mean: np.ndarray
    init_std: float
    eta: float
    steps: int
    probe: np.ndarray
    stein_bandwidth: float


@dataclass(frozen=True)
class ParticlesSection:
    n: int
    dim: int
    init_mean: np.ndarray
    init_std: float


@dataclass(frozen=True)
class CanvasSection:
    height: int
    width: int
    channels: int
    patch_size: int
    stride: int
    batch: int
    count_mode: str
    source: dict


@dataclass(frozen=True)
class FramesSection:
    count: int
    height: int
    width: int
    channels: int
    batch: int
    source: dict


def _parse_source(data, path: str) -> dict:
    data = _expect_object(data, path)
    kind = data.get("kind")
    if kind == "file":
        _check_keys(data, path, ("kind", "path"), required=("kind", "path"))
        if not isinstance(data["path"], str):
            raise ConfigError(f"{path}.path: expected a string")
    elif kind == "constant":
        _check_keys(data, path, ("kind", "value"), required=("kind",))
        _number(data, "value", path, 0.0)
    elif kind == "noise":
        _check_keys(data, path, ("kind", "scale", "mean"), required=("kind",))
        _number(data, "scale", path, 1.0)
        _number(data, "mean", path, 0.0)
    elif kind == "drift":
        _check_keys(data, path, ("kind", "scale", "step_scale"), required=("kind",))
        _number(data, "scale", path, 1.0)
        _number(data, "step_scale", path, 0.1)
    else:
        raise ConfigError(f"{path}.kind: expected one of ['constant', 'drift', 'file', 'noise'], got {kind!r}")
    return dict(data)


def _parse_svgd_section(data, path: str) -> SvgdSection:
    data = _expect_object(data, path)
    _check_keys(
        data,
        path,
        ("n", "dim", "init_mean", "init_std", "eta", "steps", "probe", "stein_bandwidth"),
        required=("n", "dim"),
    )
    n = _integer(data, "n", path)
    dim = _integer(data, "dim", path)
    if n < 1 or dim < 1:
        raise ConfigError(f"{path}: n and dim must be >= 1")
    init_mean = _vector(data, "init_mean", path, dim) if "init_mean" in data else np.zeros(dim)
    probe = _vector(data, "probe", path, dim) if "probe" in data else np.zeros(dim)
    init_std = _number(data, "init_std", path, 1.0)
    eta = _number(data, "eta", path, 0.3)
    steps = _integer(data, "steps", path, 500)
    stein_h = _number(data, "stein_bandwidth", path, 2.0)
    if init_std <= 0 or eta <= 0 or steps < 0 or stein_h <= 0:
        raise ConfigError(f"{path}: init_std, eta and stein_bandwidth must be > 0 and steps >= 0")
    return SvgdSection(n, dim, init_mean, init_std, eta, steps, probe, stein_h)


def _parse_particles_section(data, path: str) -> ParticlesSection:
    data = _expect_object(data, path)
    _check_keys(data, path, ("n", "dim", "init_mean", "init_std"), required=("n", "dim"))
    n = _integer(data, "n", path)
    dim = _integer(data, "dim", path)
    if n < 1 or dim < 1:
        raise ConfigError(f"{path}: n and dim must be >= 1")
    init_mean = _vector(data, "init_mean", path, dim) if "init_mean" in data else np.zeros(dim)
    init_std = _number(data, "init_std", path, 1.0)
    if init_std <= 0:
        raise ConfigError(f"{path}.init_std: must be > 0")
    return ParticlesSection(n, dim, init_mean, init_std)


def _parse_canvas_section(data, path: str) -> CanvasSection:
    data = _expect_object(data, path)
    _check_keys(
        data,
        path,
        ("height", "width", "channels", "patch_size", "stride", "batch", "count_mode", "source"),
        required=("height", "width", "channels", "patch_size", "stride", "batch", "source"),
    )
    h = _integer(data, "height", path)
    w = _integer(data, "width", path)
    c = _integer(data, "channels", path)
    p = _integer(data, "patch_size", path)
    s = _integer(data, "stride", path)
    b = _integer(data, "batch", path)
    if min(h, w, c) < 1:
        raise ConfigError(f"{path}: height, width and channels must be >= 1")
    _build(path, canvas_mod.enumerate_patches, h, w, p, s)
    count_mode = data.get("count_mode", "batch")
    if count_mode not in canvas_mod.COUNT_MODES:
        raise ConfigError(f"{path}.count_mode: expected one of {list(canvas_mod.COUNT_MODES)}")
    n_patches = len(canvas_mod.enumerate_patches(h, w, p, s))
    if not (1 <= b <= n_patches):
        raise ConfigError(f"{path}.batch: must lie in [1, {n_patches}]")
    return CanvasSection(h, w, c, p, s, b, count_mode, _parse_source(data["source"], f"{path}.source"))


def _parse_frames_section(data, path: str) -> FramesSection:
    data = _expect_object(data, path)
    _check_keys(
        data,
        path,
        ("count", "height", "width", "channels", "batch", "source"),
        required=("count", "height", "width", "channels", "batch", "source"),
    )
    count = _integer(data, "count", path)
    h = _integer(data, "height", path)
    w = _integer(data, "width", path)
    c = _integer(data, "channels", path)
    b = _integer(data, "batch", path)
    if min(count, h, w, c) < 1:
        raise ConfigError(f"{path}: count, height, width and channels must be >= 1")
    if not (1 <= b <= count):
        raise ConfigError(f"{path}.batch: must lie in [1, {count}]")
    return FramesSection(count, h, w, c, b, _parse_source(data["source"], f"{path}.source"))


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    seed: int
    output_dir: str | None
    schedule: NoiseSchedule
    kernel: KernelSpec
    distill: DistillConfig
    oracle_spec: dict | None
    bridge: BridgeEndpoint | None
    conditions: Condition | None
    svgd_section: SvgdSection | None
    particles: ParticlesSection | None
    canvas: CanvasSection | None
    frames: FramesSection | None
    raw: dict = field(repr=False, default_factory=dict)


def validate_config(data: dict) -> ExperimentConfig:
    """Validate a parsed JSON config, raising ConfigError with field paths."""
    data = _expect_object(data, "config")
    _check_keys(
        data,
        "config",
        (
            "mode",
            "seed",
            "output_dir",
            "schedule",
            "kernel",
            "distill",
            "oracle",
            "conditions",
            "svgd",
            "particles",
            "canvas",
            "frames",
        ),
        required=("mode", "seed"),
    )
    mode = data["mode"]
    if mode not in MODES:
        raise ConfigError(f"config.mode: expected one of {list(MODES)}, got {mode!r}")
    seed = _integer(data, "seed", "config")

    schedule = _parse_schedule(data.get("schedule", {}), "config.schedule")
    kernel = _parse_kernel(data.get("kernel", {}), "config.kernel")
    distill = _parse_distill(data.get("distill", {}), "config.distill", schedule, kernel)

    oracle_spec = None
    bridge = None
    if "oracle" in data:
        oracle_data = _expect_object(data["oracle"], "config.oracle")
        if "bridge" in oracle_data:
            _check_keys(oracle_data, "config.oracle", ("bridge",))
            bridge = _parse_bridge(oracle_data["bridge"], "config.oracle.bridge")
        else:
            try:
                edit_oracle_from_spec(oracle_data, "config.oracle")
            except ValueError as e:
                raise ConfigError(str(e)) from None
            oracle_spec = oracle_data

    conditions = _parse_condition(data["conditions"], "config.conditions") if "conditions" in data else None

    svgd_section = _parse_svgd_section(data["svgd"], "config.svgd") if "svgd" in data else None
    particles = _parse_particles_section(data["particles"], "config.particles") if "particles" in data else None
    canvas_section = _parse_canvas_section(data["canvas"], "config.canvas") if "canvas" in data else None
    frames = _parse_frames_section(data["frames"], "config.frames") if "frames" in data else None

    required_by_mode = {
        "svgd": ("svgd", svgd_section),
        "generate": ("particles", particles),
        "edit-canvas": ("canvas", canvas_section),
        "edit-frames": ("frames", frames),
    }
    if mode in required_by_mode:
        name, section = required_by_mode[mode]
        if section is None:
            raise ConfigError(f"config.{name}: required for mode {mode!r}")
        if oracle_spec is None and bridge is None:
            raise ConfigError("config.oracle: required for this mode")
    if mode == "svgd" and oracle_spec is None:
        raise ConfigError("config.oracle: svgd mode needs an inline mixture (clean scores are local-only)")
    if mode in ("edit-canvas", "edit-frames"):
        if conditions is None:
            raise ConfigError("config.conditions: required for editing modes")
        if conditions.kind != oracle_mod.IMAGE_TEXT:
            raise ConfigError("config.conditions.kind: editing modes need an image_text condition")

    return ExperimentConfig(
        mode=mode,
        seed=seed,
        output_dir=data.get("output_dir"),
        schedule=schedule,
        kernel=kernel,
        distill=distill,
        oracle_spec=oracle_spec,
        bridge=bridge,
        conditions=conditions,
        svgd_section=svgd_section,
        particles=particles,
        canvas=canvas_section,
        frames=frames,
        raw=data,
    )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON: {e}") from None
    return validate_config(data)


# ---------------------------------------------------------------------------
# metrics output


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".17g")


def write_metrics(path, rows) -> None:
    """metrics.csv: comma separators, '.' decimals, header row, LF endings,
    17 significant digits; empty cells for inapplicable columns."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for r in rows:
            f.write(
                ",".join(
                    (
                        str(r.step),
                        _fmt(r.eta),
                        _fmt(r.t_drawn),
                        _fmt(r.mean_grad_norm),
                        _fmt(r.mean_pairwise_distance),
                        _fmt(r.min_pairwise_distance),
                        _fmt(r.seam_discrepancy),
                        _fmt(r.stein_residual),
                    )
                )
                + "\n"
            )


def write_timings(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,wall_ms\n")
        for r in rows:
            f.write(f"{r.step},{_fmt(r.wall_ms)}\n")


def emit_plotdata(metrics_path, out_dir=None) -> list[Path]:
    """One (step, value) two-column CSV per metric; rows with empty cells are
    skipped, so inapplicable metrics yield header-only files."""
    metrics_path = Path(metrics_path)
    out_dir = Path(out_dir) if out_dir is not None else metrics_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(metrics_path, "r", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{metrics_path}: empty file, expected header {list(METRICS_COLUMNS)}") from None
        missing = [c for c in METRICS_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{metrics_path}: missing columns {missing}; expected {list(METRICS_COLUMNS)}")
        body = list(reader)
    written = []
    step_idx = header.index("step")
    for col in header:
        if col == "step":
            continue
        idx = header.index(col)
        out = out_dir / f"plot_{col}.csv"
        with open(out, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"step,{col}\n")
            for row in body:
                if idx < len(row) and row[idx] != "":
                    f.write(f"{row[step_idx]},{row[idx]}\n")
        written.append(out)
    return written


def _rows_from_step_metrics(metrics, seam: bool = False) -> list[MetricsRow]:
    rows = []
    for m in metrics:
        rows.append(
            MetricsRow(
                step=m.step,
                eta=m.eta,
                t_drawn=m.t,
                mean_grad_norm=m.mean_grad_norm,
                mean_pairwise_distance=m.mean_pairwise_distance,
                min_pairwise_distance=m.min_pairwise_distance,
                seam_discrepancy=getattr(m, "seam_discrepancy", None) if seam else None,
                stein_residual=None,
                wall_ms=m.wall_ms,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# runners


def _make_eps_fn(cfg: ExperimentConfig):
    """The oracle callable plus a cleanup hook (bridge connections)."""
    if cfg.oracle_spec is not None:
        oracle = edit_oracle_from_spec(cfg.oracle_spec, "config.oracle")
        return AnalyticOracle(oracle=oracle, schedule=cfg.schedule), lambda: None
    client = BridgeClient(cfg.bridge)
    client.start()
    return client.eps, client.close


def _synthesize_canvas(section: CanvasSection, rng: np.random.Generator) -> Canvas:
    shape = (section.height, section.width, section.channels)
    src = section.source
    if src["kind"] == "file":
        path = Path(src["path"])
        loaded = canvas_mod.load_canvas_csv(path) if path.suffix == ".csv" else canvas_mod.load_canvas(path)
        if loaded.values.shape != shape:
            raise ConfigError(
                f"config.canvas.source: file shape {loaded.values.shape} does not match section {shape}"
            )
        return loaded
    if src["kind"] == "constant":
        return Canvas(np.full(shape, float(src.get("value", 0.0))))
    return Canvas(float(src.get("mean", 0.0)) + float(src.get("scale", 1.0)) * rng.standard_normal(shape))


def _synthesize_frames(section: FramesSection, rng: np.random.Generator) -> list[Canvas]:
    shape = (section.height, section.width, section.channels)
    src = section.source
    if src["kind"] == "constant":
        return [Canvas(np.full(shape, float(src.get("value", 0.0)))) for _ in range(section.count)]
    if src["kind"] == "noise":
        scale = float(src.get("scale", 1.0))
        mean = float(src.get("mean", 0.0))
        return [Canvas(mean + scale * rng.standard_normal(shape)) for _ in range(section.count)]
    if src["kind"] == "drift":
        scale = float(src.get("scale", 1.0))
        step = float(src.get("step_scale", 0.1))
        base = scale * rng.standard_normal(shape)
        direction = rng.standard_normal(shape)
        direction = direction / np.sqrt(np.sum(direction * direction))
        return [Canvas(base + k * step * direction) for k in range(section.count)]
    raise ConfigError("config.frames.source.kind: 'file' sources are not supported for frames")


def _run_svgd_mode(cfg: ExperimentConfig) -> tuple[list[MetricsRow], ParticleSet]:
    section = cfg.svgd_section
    oracle = edit_oracle_from_spec(cfg.oracle_spec, "config.oracle")
    target = oracle.unconditional
    if target.dim != section.dim:
        raise ConfigError(f"config.svgd.dim: {section.dim} does not match oracle dim {target.dim}")
    rng = derive_rng(cfg.seed, "svgd-init")
    x = section.init_mean + section.init_std * rng.standard_normal((section.n, section.dim))
    score_fn = lambda v: oracle_mod.gmm_score(target, v)
    stein_kernel = KernelSpec(bandwidth=section.stein_bandwidth)
    rows = []
    for step in range(section.steps):
        t0 = time.perf_counter()
        pset = ParticleSet(x)
        direction = svgd_mod.svgd_direction(pset, score_fn, cfg.kernel)
        d = direction.direction
        x = x + section.eta * d
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite particle values", step=step)
        residual = svgd_mod.stein_residual(ParticleSet(x), score_fn, stein_kernel, section.probe)
        mean_d, min_d = distill_mod._pairwise_stats(x)
        rows.append(
            MetricsRow(
                step=step,
                eta=section.eta,
                t_drawn=None,
                mean_grad_norm=float(np.mean(np.sqrt(np.einsum("id,id->i", d, d)))),
                mean_pairwise_distance=mean_d,
                min_pairwise_distance=min_d,
                seam_discrepancy=None,
                stein_residual=float(np.sqrt(np.sum(residual * residual))),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    return rows, ParticleSet(x)


def _write_particles(path, particles: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in particles:
            f.write(",".join(format(v, ".17g") for v in row) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Execute one validated config; returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    if cfg.mode == "check":
        ok = run_checks()
        if not ok:
            raise RuntimeError("self-check failed")
        rows = []
    elif cfg.mode == "svgd":
        rows, final = _run_svgd_mode(cfg)
        _write_particles(out_dir / "particles.csv", final.particles)
        outputs.append("particles.csv")
    elif cfg.mode == "generate":
        eps_fn, closer = _make_eps_fn(cfg)
        try:
            section = cfg.particles
            rng = derive_rng(cfg.seed, "generate-init")
            x = section.init_mean + section.init_std * rng.standard_normal((section.n, section.dim))
            cond = cfg.conditions if cfg.conditions is not None else Condition.unconditional()
            traj = distill_mod.optimize_particles(
                ParticleSet(x), eps_fn, cond, cfg.distill, derive_rng(cfg.seed, "generate")
            )
        finally:
            closer()
        rows = _rows_from_step_metrics(traj.metrics)
        _write_particles(out_dir / "particles.csv", traj.final.particles)
        outputs.append("particles.csv")
    elif cfg.mode == "edit-canvas":
        eps_fn, closer = _make_eps_fn(cfg)
        try:
            section = cfg.canvas
            source = _synthesize_canvas(section, derive_rng(cfg.seed, "canvas-init"))
            grid = PatchGrid.build(section.height, section.width, section.patch_size, section.stride)
            edited, metrics = canvas_mod.edit_canvas(
                source,
                grid,
                eps_fn,
                cfg.distill,
                section.batch,
                derive_rng(cfg.seed, "edit-canvas"),
                cfg.conditions,
                count_mode=section.count_mode,
            )
        finally:
            closer()
        rows = _rows_from_step_metrics(metrics, seam=True)
        canvas_mod.save_canvas(out_dir / "canvas_before.bin", source)
        canvas_mod.save_canvas(out_dir / "canvas_after.bin", edited)
        outputs += ["canvas_before.bin", "canvas_after.bin"]
    elif cfg.mode == "edit-frames":
        eps_fn, closer = _make_eps_fn(cfg)
        try:
            section = cfg.frames
            frames = _synthesize_frames(section, derive_rng(cfg.seed, "frames-init"))
            edited, metrics = canvas_mod.edit_frames(
                frames,
                eps_fn,
                cfg.distill,
                section.batch,
                derive_rng(cfg.seed, "edit-frames"),
                cfg.conditions,
            )
        finally:
            closer()
        rows = _rows_from_step_metrics(metrics)
        for i, (before, after) in enumerate(zip(frames, edited)):
            canvas_mod.save_canvas(out_dir / f"frame_before_{i:03d}.bin", before)
            canvas_mod.save_canvas(out_dir / f"frame_after_{i:03d}.bin", after)
            outputs += [f"frame_before_{i:03d}.bin", f"frame_after_{i:03d}.bin"]
    else:  # pragma: no cover
        raise ConfigError(f"config.mode: unhandled mode {cfg.mode!r}")

    write_metrics(out_dir / "metrics.csv", rows)
    write_timings(out_dir / "timings.csv", rows)
    outputs = ["metrics.csv", "timings.csv"] + outputs
    manifest = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "config_sha256": hashlib.sha256(
            json.dumps(cfg.raw, sort_keys=True, separators=(",", ":")).encode("utf-8")
        ).hexdigest(),
        "outputs": outputs,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def run(config_path, seed: int | None = None, out: str | None = None) -> int:
    """CLI-facing runner: exit 0 on success, 2 on config errors, 3 on numeric
    aborts. Diagnostics go to stderr."""
    import sys

    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = validate_config({**cfg.raw, "seed": int(seed)})
        out_dir = out or cfg.output_dir
        if out_dir is None:
            raise ConfigError("config.output_dir: required (or pass --out)")
        run_experiment(cfg, out_dir)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# self-check battery (`csd check`)


def _check_schedules() -> bool:
    grid = np.arange(0.0, 1.0 + 1e-9, 1e-3)
    for kind in schedule_mod.SCHEDULE_KINDS:
        sched = NoiseSchedule(kind=kind, t_min=0.0, t_max=1.0)
        a, s = schedule_mod.alpha_sigma(sched, grid)
        if np.max(np.abs(a * a + s * s - 1.0)) >= 1e-12:
            return False
        if np.any(np.diff(a) > 1e-15) or np.any(np.diff(s) < -1e-15):
            return False
    return True


def _check_kernel_gradient() -> bool:
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.normal(size=3)
        y = rng.normal(size=3)
        h = float(rng.uniform(0.5, 3.0))
        g = kernel_mod.rbf_grad_first(x, y, h)
        fd = np.empty(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-6
            fd[k] = (kernel_mod.rbf(x + e, y, h) - kernel_mod.rbf(x - e, y, h)) / 2e-6
        if np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12) >= 1e-5:
            return False
    return True


def _check_gmm_eps() -> bool:
    rng = np.random.default_rng(11)
    sched = NoiseSchedule()
    for _ in range(20):
        gmm = oracle_mod.GaussianMixture(
            weights=np.full(3, 1 / 3),
            means=rng.normal(size=(3, 2), scale=2.0),
            variances=rng.uniform(0.5, 2.0, size=(3, 2)),
        )
        t = float(rng.uniform(0.1, 0.9))
        x = rng.normal(size=2, scale=2.0)
        eps = oracle_mod.gmm_eps(gmm, sched, x, t)
        marg = oracle_mod.gmm_marginal(gmm, sched, t)
        _, sigma = schedule_mod.alpha_sigma(sched, t)
        fd = np.empty(2)
        for k in range(2):
            e = np.zeros(2)
            e[k] = 1e-5
            fd[k] = (oracle_mod.gmm_logpdf(marg, x + e) - oracle_mod.gmm_logpdf(marg, x - e)) / 2e-5
        ref = -sigma * fd
        if np.max(np.abs(eps - ref)) / max(np.max(np.abs(ref)), 1e-12) >= 1e-5:
            return False
    return True


def _check_n1_reduction() -> bool:
    rng = np.random.default_rng(23)
    sched = NoiseSchedule()
    for _ in range(20):
        gmm = oracle_mod.GaussianMixture(
            weights=np.array([1.0]), means=rng.normal(size=(1, 3)), variances=np.ones((1, 3))
        )
        oracle = oracle_mod.EditOracle(unconditional=gmm)
        eps_fn = AnalyticOracle(oracle=oracle, schedule=sched)
        config = DistillConfig(schedule=sched, steps=1, kernel=KernelSpec(bandwidth=2.0))
        x = rng.normal(size=3)
        draw = schedule_mod.StepDraw(t=float(rng.uniform(0.2, 0.5)), eps=rng.normal(size=3))
        w = 1.0
        a = distill_mod.sds_grad(x, eps_fn, Condition.unconditional(), config.guidance, draw, w, sched)
        b = distill_mod.csd_grads(
            ParticleSet(x[None, :]), eps_fn, Condition.unconditional(), config.guidance, draw, config
        )[0]
        denom = max(float(np.max(np.abs(a))), 1e-300)
        if float(np.max(np.abs(a - b))) / denom >= 1e-12:
            return False
    return True


def _check_patch_grid() -> bool:
    rng = np.random.default_rng(5)
    for _ in range(25):
        h = int(rng.integers(2, 20))
        w = int(rng.integers(2, 20))
        p = int(rng.integers(1, min(h, w) + 1))
        s = int(rng.integers(1, p + 1))
        grid = PatchGrid.build(h, w, p, s)
        if np.min(grid.counts) < 1:
            return False
        grads = [
            canvas_mod.scatter_patch(np.full((p, p, 1), 2.5), o, (h, w, 1)) for o in grid.origins
        ]
        norm = canvas_mod.accumulate_normalize(grads, grid, grid.origins)
        if not np.array_equal(norm, np.full((h, w, 1), 2.5)):
            return False
    return True


def _check_adjointness() -> bool:
    rng = np.random.default_rng(31)
    for _ in range(10):
        h, w, c = 6, 5, 2
        p = int(rng.integers(1, 5))
        r = int(rng.integers(0, h - p + 1))
        col = int(rng.integers(0, w - p + 1))
        view = canvas_mod.PatchView((h, w, c), (r, col), p)
        cvs = rng.normal(size=(h, w, c))
        patch = rng.normal(size=p * p * c)
        lhs = float(np.dot(view.render(cvs), patch))
        rhs = float(np.sum(cvs * view.apply_jacobian(patch)))
        if abs(lhs - rhs) > 1e-10 * max(abs(lhs), 1.0):
            return False
    return True


def _check_determinism() -> bool:
    def one_run():
        rng = derive_rng(1234, "check-determinism")
        gmm = oracle_mod.GaussianMixture(
            weights=np.array([1.0]), means=np.zeros((1, 2)), variances=np.ones((1, 2))
        )
        oracle = oracle_mod.EditOracle(
            unconditional=gmm,
            image={"s": gmm},
            image_text={("s", "y"): oracle_mod.GaussianMixture(
                weights=np.array([1.0]), means=np.ones((1, 2)), variances=np.ones((1, 2))
            )},
        )
        sched = NoiseSchedule()
        eps_fn = AnalyticOracle(oracle=oracle, schedule=sched)
        problem = distill_mod.EditProblem.from_source(
            ParticleSet(rng.normal(size=(3, 2))), Condition.image_text("s", "y"), eps_fn
        )
        traj = distill_mod.optimize(problem, DistillConfig(schedule=sched, steps=10, eta=0.05), rng)
        return traj.final.particles.tobytes()

    return one_run() == one_run()


def run_checks() -> bool:
    """Fast invariant battery behind `csd check`; prints one line per check."""
    checks = [
        ("schedule variance-preserving + monotone", _check_schedules),
        ("rbf gradient vs finite differences", _check_kernel_gradient),
        ("mixture eps vs finite differences", _check_gmm_eps),
        ("single-particle reduction to plain distillation", _check_n1_reduction),
        ("patch coverage + normalization exactness", _check_patch_grid),
        ("patch extract/scatter adjointness", _check_adjointness),
        ("optimizer determinism", _check_determinism),
    ]
    all_ok = True
    for name, fn in checks:
        ok = fn()
        all_ok &= ok
        print(f"[check] {name}: {'ok' if ok else 'FAIL'}")
    return all_ok
