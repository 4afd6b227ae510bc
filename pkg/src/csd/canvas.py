"""Renderers, overlapping patch grids, gradient scatter/normalize, and the
patch- and frame-batched editing loops.

A large lattice (H, W, C) is covered by P-by-P patches on a stride-s grid;
the last row/column origin is clamped to the boundary so coverage is always
complete. During an update, each sampled patch is one particle; its gradient
is scattered back and every cell is divided by the number of patches in the
*current batch* that cover it, so overlap never inflates step sizes.

Frame batches reuse the same machinery with whole frames as particles and
identity rendering.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass

import numpy as np

from .distill import DistillConfig, EditProblem, StepMetrics, csd_edit_grads, draw_step
from .errors import NumericError
from .oracle import Condition
from .svgd import ParticleSet

CANVAS_MAGIC = b"CSDC"
COUNT_MODES = ("batch", "full-grid")


@dataclass(frozen=True)
class Canvas:
    """An (H, W, C) lattice of finite reals."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"canvas values must be (H, W, C) with positive sizes, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("canvas values must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def _axis_origins(length: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, length - patch + 1, stride))
    if origins[-1] != length - patch:
        origins.append(length - patch)
    return origins


def enumerate_patches(height: int, width: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    """Row-major patch origins: multiples of the stride, last one clamped to
    the boundary. Guarantees full coverage."""
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if patch_size > height or patch_size > width:
        raise ValueError(f"patch_size {patch_size} exceeds canvas {height}x{width}")
    if not (1 <= stride <= patch_size):
        raise ValueError(f"stride must lie in [1, patch_size], got {stride}")
    rows = _axis_origins(height, patch_size, stride)
    cols = _axis_origins(width, patch_size, stride)
    return [(r, c) for r in rows for c in cols]


def _coverage_counts(shape: tuple[int, int], origins, patch_size: int) -> np.ndarray:
    counts = np.zeros(shape, dtype=int)
    for r, c in origins:
        counts[r : r + patch_size, c : c + patch_size] += 1
    return counts


@dataclass(frozen=True)
class PatchGrid:
    """All patch origins over one canvas shape, with per-cell coverage counts."""

    height: int
    width: int
    patch_size: int
    stride: int
    origins: tuple
    counts: np.ndarray

    @classmethod
    def build(cls, height: int, width: int, patch_size: int, stride: int) -> "PatchGrid":
        origins = tuple(enumerate_patches(height, width, patch_size, stride))
        counts = _coverage_counts((height, width), origins, patch_size)
        return cls(
            height=height,
            width=width,
            patch_size=patch_size,
            stride=stride,
            origins=origins,
            counts=counts,
        )

    @property
    def n_patches(self) -> int:
        return len(self.origins)


def extract_patch(values: np.ndarray, origin: tuple[int, int], patch_size: int) -> np.ndarray:
    r, c = origin
    return values[r : r + patch_size, c : c + patch_size, :].copy()


def scatter_patch(
    patch: np.ndarray, origin: tuple[int, int], shape: tuple[int, int, int]
) -> np.ndarray:
    out = np.zeros(shape)
    r, c = origin
    p = patch.shape[0]
    out[r : r + p, c : c + p, :] = patch
    return out


class IdentityRenderer:
    """g(theta) = theta."""

    def render(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta, dtype=float)

    def apply_jacobian(self, pixel_grad: np.ndarray) -> np.ndarray:
        return np.asarray(pixel_grad, dtype=float)


class LinearRenderer:
    """g(theta) = A theta; the Jacobian transpose is A^T."""

    def __init__(self, matrix: np.ndarray):
        a = np.asarray(matrix, dtype=float)
        if a.ndim != 2:
            raise ValueError(f"linear renderer needs a matrix, got shape {a.shape}")
        self.matrix = a

    def render(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.matrix.shape[1],):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.matrix.shape[1]},)")
        return np.einsum("mn,n->m", self.matrix, theta)

    def apply_jacobian(self, pixel_grad: np.ndarray) -> np.ndarray:
        pixel_grad = np.asarray(pixel_grad, dtype=float)
        if pixel_grad.shape != (self.matrix.shape[0],):
            raise ValueError(
                f"pixel_grad has shape {pixel_grad.shape}, expected ({self.matrix.shape[0]},)"
            )
        return np.einsum("mn,m->n", self.matrix, pixel_grad)


class PatchView:
    """Renders one patch of a canvas; the Jacobian transpose scatters back."""

    def __init__(self, canvas_shape: tuple[int, int, int], origin: tuple[int, int], patch_size: int):
        h, w, _ = canvas_shape
        r, c = origin
        if not (0 <= r <= h - patch_size and 0 <= c <= w - patch_size):
            raise ValueError(f"origin {origin} with patch {patch_size} exceeds canvas {canvas_shape}")
        self.canvas_shape = tuple(canvas_shape)
        self.origin = (int(r), int(c))
        self.patch_size = int(patch_size)

    def render(self, canvas_values: np.ndarray) -> np.ndarray:
        if canvas_values.shape != self.canvas_shape:
            raise ValueError(f"canvas has shape {canvas_values.shape}, expected {self.canvas_shape}")
        return extract_patch(canvas_values, self.origin, self.patch_size).ravel()

    def apply_jacobian(self, pixel_grad: np.ndarray) -> np.ndarray:
        p = self.patch_size
        c = self.canvas_shape[2]
        patch = np.asarray(pixel_grad, dtype=float).reshape(p, p, c)
        return scatter_patch(patch, self.origin, self.canvas_shape)


def apply_jacobian(renderer, pixel_grad: np.ndarray) -> np.ndarray:
    """Pull a pixel-space gradient back to parameter space."""
    return renderer.apply_jacobian(pixel_grad)


def accumulate_normalize(
    canvas_grads,
    grid: PatchGrid,
    batch_origins,
    count_mode: str = "batch",
) -> np.ndarray:
    """Sum scattered gradients and divide each cell by its patch coverage.

    ``count_mode="batch"`` (default) counts only the patches in the current
    batch, keeping the expected per-cell step size uniform under sampling;
    ``"full-grid"`` divides by the full grid's coverage instead. Cells no
    batch patch covers get gradient 0.
    """
    if count_mode not in COUNT_MODES:
        raise ValueError(f"count_mode must be one of {COUNT_MODES}, got {count_mode!r}")
    batch_origins = list(batch_origins)
    known = set(grid.origins)
    for o in batch_origins:
        if tuple(o) not in known:
            raise ValueError(f"origin {o} is not part of the grid")
    shape = (grid.height, grid.width)
    total = np.zeros(shape + (canvas_grads[0].shape[2],))
    for g in canvas_grads:
        total += g
    if count_mode == "batch":
        counts = _coverage_counts(shape, batch_origins, grid.patch_size)
    else:
        counts = grid.counts
    counts3 = counts[:, :, None]
    return np.divide(total, counts3, out=np.zeros_like(total), where=counts3 > 0)


def seam_pairs(grid: PatchGrid) -> np.ndarray:
    """Deduplicated cell pairs adjacent across any interior patch edge.

    Returns an (m, 4) int array of (u1, v1, u2, v2) rows, sorted for
    deterministic iteration.
    """
    p = grid.patch_size
    pairs = set()
    for r, c in grid.origins:
        if r > 0:
            pairs.update((r - 1, v, r, v) for v in range(c, c + p))
        if r + p < grid.height:
            pairs.update((r + p - 1, v, r + p, v) for v in range(c, c + p))
        if c > 0:
            pairs.update((u, c - 1, u, c) for u in range(r, r + p))
        if c + p < grid.width:
            pairs.update((u, c + p - 1, u, c + p) for u in range(r, r + p))
    if not pairs:
        return np.empty((0, 4), dtype=int)
    return np.array(sorted(pairs), dtype=int)


def seam_discrepancy(before: Canvas, after: Canvas, grid: PatchGrid) -> float:
    """Mean squared disagreement of the edit delta across patch-boundary
    neighbors; 0 when every neighboring pair was edited identically."""
    if before.values.shape != after.values.shape:
        raise ValueError("canvas shapes differ")
    if (before.height, before.width) != (grid.height, grid.width):
        raise ValueError("grid shape does not match the canvases")
    pairs = seam_pairs(grid)
    if len(pairs) == 0:
        return 0.0
    delta = after.values - before.values
    jumps = delta[pairs[:, 0], pairs[:, 1], :] - delta[pairs[:, 2], pairs[:, 3], :]
    return float(np.mean(jumps * jumps))


@dataclass(frozen=True)
class CanvasStepMetrics(StepMetrics):
    seam_discrepancy: float = 0.0


def edit_canvas(
    canvas: Canvas,
    grid: PatchGrid,
    eps_fn,
    config: DistillConfig,
    batch_size: int,
    rng: np.random.Generator,
    cond: Condition,
    count_mode: str = "batch",
):
    """Patch-batched editing of one canvas.

    Each step samples ``batch_size`` patch origins without replacement,
    treats the extracted patches as the step's particle set (sources come
    from the frozen input canvas), runs the editing gradients, then
    scatter-accumulates with appearance normalization. Returns
    (edited Canvas, per-step metrics including the seam discrepancy).
    """
    if not (1 <= batch_size <= grid.n_patches):
        raise ValueError(f"batch_size must lie in [1, {grid.n_patches}], got {batch_size}")
    source = canvas.values
    target = source.copy()
    shape = source.shape
    p = grid.patch_size
    dim = p * p * shape[2]
    metrics: list[CanvasStepMetrics] = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        idx = rng.choice(grid.n_patches, size=batch_size, replace=False)
        batch = [grid.origins[i] for i in idx]
        tgt = ParticleSet(np.stack([extract_patch(target, o, p).ravel() for o in batch]))
        src = ParticleSet(np.stack([extract_patch(source, o, p).ravel() for o in batch]))
        problem = EditProblem(source=src, target=tgt, conditions=(cond,) * batch_size, oracle=eps_fn)
        draw = draw_step(rng, config, n=batch_size, dim=dim)
        grads = csd_edit_grads(problem, config.guidance, draw, config)
        scattered = [
            scatter_patch(grads[i].reshape(p, p, shape[2]), o, shape) for i, o in enumerate(batch)
        ]
        step_grad = accumulate_normalize(scattered, grid, batch, count_mode=count_mode)
        eta_step = config.eta * config.lr_decay.factor ** (step // config.lr_decay.every)
        target = target - eta_step * step_grad
        if not np.all(np.isfinite(target)):
            raise NumericError("non-finite canvas values after update", step=step)
        mean_d, min_d = _batch_pairwise(tgt.particles)
        metrics.append(
            CanvasStepMetrics(
                step=step,
                eta=eta_step,
                t=draw.t,
                mean_grad_norm=float(np.mean(np.sqrt(np.einsum("id,id->i", grads, grads)))),
                mean_pairwise_distance=mean_d,
                min_pairwise_distance=min_d,
                wall_ms=(time.perf_counter() - t0) * 1e3,
                seam_discrepancy=seam_discrepancy(Canvas(source), Canvas(target), grid),
            )
        )
    return Canvas(target), metrics


def edit_frames(
    frames,
    eps_fn,
    config: DistillConfig,
    batch_size: int,
    rng: np.random.Generator,
    cond: Condition,
):
    """Frame-batched editing: whole frames are particles, identity rendering.

    Returns (edited frames, per-step metrics). Pairwise statistics cover all
    frames, not just the step's batch.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    shape = frames[0].values.shape
    for i, f in enumerate(frames):
        if f.values.shape != shape:
            raise ValueError(f"frame {i} has shape {f.values.shape}, expected {shape}")
    if not (1 <= batch_size <= len(frames)):
        raise ValueError(f"batch_size must lie in [1, {len(frames)}], got {batch_size}")
    source = np.stack([f.values.ravel() for f in frames])
    target = source.copy()
    dim = source.shape[1]
    metrics: list[StepMetrics] = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        idx = np.sort(rng.choice(len(frames), size=batch_size, replace=False))
        problem = EditProblem(
            source=ParticleSet(source[idx]),
            target=ParticleSet(target[idx]),
            conditions=(cond,) * batch_size,
            oracle=eps_fn,
        )
        draw = draw_step(rng, config, n=batch_size, dim=dim)
        grads = csd_edit_grads(problem, config.guidance, draw, config)
        eta_step = config.eta * config.lr_decay.factor ** (step // config.lr_decay.every)
        target[idx] = target[idx] - eta_step * grads
        if not np.all(np.isfinite(target)):
            raise NumericError("non-finite frame values after update", step=step)
        mean_d, min_d = _batch_pairwise(target)
        metrics.append(
            StepMetrics(
                step=step,
                eta=eta_step,
                t=draw.t,
                mean_grad_norm=float(np.mean(np.sqrt(np.einsum("id,id->i", grads, grads)))),
                mean_pairwise_distance=mean_d,
                min_pairwise_distance=min_d,
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    edited = [Canvas(row.reshape(shape)) for row in target]
    return edited, metrics


def frame_delta_dispersion(before, after) -> float:
    """Mean per-coordinate variance, across frames, of the edit delta.

    Low dispersion means every frame was edited the same way.
    """
    b = np.stack([f.values.ravel() for f in before])
    a = np.stack([f.values.ravel() for f in after])
    if a.shape != b.shape:
        raise ValueError("frame stacks differ in shape")
    delta = a - b
    return float(np.mean(np.var(delta, axis=0)))


def _batch_pairwise(particles: np.ndarray) -> tuple[float, float]:
    n = len(particles)
    if n < 2:
        return 0.0, 0.0
    diff = particles[:, None, :] - particles[None, :, :]
    sq = np.einsum("ijd,ijd->ij", diff, diff)
    iu = np.triu_indices(n, k=1)
    d = np.sqrt(np.maximum(sq[iu], 0.0))
    return float(d.mean()), float(d.min())


def save_canvas(path, canvas: Canvas) -> None:
    """Flat binary: 16-byte header (magic 'CSDC', u32 H, W, C, little-endian)
    followed by H*W*C little-endian float64 in row-major order."""
    v = canvas.values
    header = struct.pack("<4sIII", CANVAS_MAGIC, v.shape[0], v.shape[1], v.shape[2])
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_canvas(path) -> Canvas:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated canvas header")
        magic, h, w, c = struct.unpack("<4sIII", header)
        if magic != CANVAS_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != h * w * c:
        raise ValueError(f"{path}: expected {h * w * c} values, found {data.size}")
    return Canvas(data.reshape(h, w, c).astype(float))


def save_canvas_csv(path, canvas: Canvas) -> None:
    """Text alternative for small canvases: 'H,W,C' header line, then one
    line per canvas row with W*C comma-separated values (channel fastest)."""
    v = canvas.values
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{v.shape[0]},{v.shape[1]},{v.shape[2]}\n")
        for row in v.reshape(v.shape[0], -1):
            f.write(",".join(format(x, ".17g") for x in row) + "\n")


def load_canvas_csv(path) -> Canvas:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
        try:
            h, w, c = (int(x) for x in first.split(","))
        except ValueError:
            raise ValueError(f"{path}: header must be 'H,W,C', got {first!r}") from None
        rows = []
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(x) for x in line.split(",")])
    data = np.asarray(rows)
    if data.shape != (h, w * c):
        raise ValueError(f"{path}: body shape {data.shape} does not match header ({h},{w},{c})")
    return Canvas(data.reshape(h, w, c))
