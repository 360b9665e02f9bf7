"""Training loop, loss, and synthetic clip generation.

The loss couples a reconstruction term against ground truth with a
measurement-consistency term that re-measures each stage's fused estimate and
compares it with the observed measurements. Batches are drawn at block
granularity; multi-rate models draw one rate per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .diffcore import Adam, Tensor, add, linear, mse, reshape, scale
from .errors import ConfigError, DivergenceError, GeometryError
from .mhme import ReferenceBuffer
from .sensing import (
    FramePlane,
    MeasurementOperator,
    OperatorView,
    from_milli,
    normalize_plane,
    to_milli,
)
from .unfold import ModelParams, itp_expand_vector, reconstruct_frame, stage_forward
from .sensing import sample_frame


@dataclass
class TrainSample:
    """One training pair: a frame and its reference (None for key frames)."""

    frame: FramePlane
    reference: FramePlane | None = None


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 250
    lr: float = 1e-3
    mc_weight: float = 0.5
    seed: int = 0
    cr_list: tuple[float, ...] | None = None  # None: use the model's rates
    refresh_every: int = 0  # 0: references stay ground-truth frames
    log_path: str | None = None
    keep_norm: bool = False  # True: do not recompute normalization stats


@dataclass
class LogRow:
    iteration: int
    loss: float
    l_err: float
    l_mc: float
    cr: float

    def format(self) -> str:
        return f"{self.iteration},{self.loss:.10g},{self.l_err:.10g},{self.l_mc:.10g},{self.cr:g}"


def sample_cr(cr_list, rng: np.random.Generator):
    """Uniform draw from the configured rate list."""
    if len(cr_list) == 0:
        raise ConfigError("cannot sample from an empty rate list")
    return cr_list[int(rng.integers(len(cr_list)))]


def loss_terms(
    output: Tensor,
    target: Tensor,
    x_mix,
    y: Tensor,
    view: OperatorView,
    weight: float = 0.5,
) -> tuple[Tensor, Tensor, Tensor]:
    """(total, reconstruction, measurement-consistency) loss tensors.

    ``x_mix`` may be a single fused estimate or one per stage; the consistency
    term averages over stages. ``view`` must be the operator actually used to
    produce ``y``.
    """
    if weight < 0:
        raise ConfigError(f"consistency weight must be >= 0, got {weight}")
    mixes = list(x_mix) if isinstance(x_mix, (list, tuple)) else [x_mix]
    if not mixes:
        raise ConfigError("need at least one fused estimate for the consistency term")
    l_err = mse(output, target)
    rows_t = Tensor(view.rows)
    l_mc = None
    for mix in mixes:
        flat = reshape(mix, (view.rows.shape[1],))
        term = mse(linear(flat, rows_t), y)
        l_mc = term if l_mc is None else add(l_mc, term)
    l_mc = scale(l_mc, 1.0 / len(mixes))
    total = add(l_err, scale(l_mc, weight))
    return total, l_err, l_mc


def loss(
    output: Tensor,
    target: Tensor,
    x_mix,
    y: Tensor,
    view: OperatorView,
    weight: float = 0.5,
) -> Tensor:
    return loss_terms(output, target, x_mix, y, view, weight)[0]


def compute_norm_stats(samples: list[TrainSample]) -> tuple[float, float]:
    """Pixel mean/std over all training frames; std floored away from zero."""
    if not samples:
        raise ConfigError("cannot compute statistics of an empty dataset")
    acc = np.concatenate([s.frame.values.ravel() for s in samples])
    mean = float(acc.mean())
    std = float(acc.std())
    return mean, max(std, 1e-6)


def _forward_sample(
    model: ModelParams,
    view_sample: OperatorView,
    block: np.ndarray,
    ref_plane: FramePlane | None,
    block_pos: tuple[int, int],
) -> tuple[Tensor, list[Tensor], Tensor]:
    """Forward one block through every stage; returns (output, mixes, raw y)."""
    y_np = view_sample.rows @ block.ravel()
    y_t = Tensor(y_np)
    if model.itp is not None:
        y_dec = itp_expand_vector(model.itp, y_t, view_sample.cr_milli)
        view_dec = model.residual_view()
    else:
        y_dec = y_t
        view_dec = view_sample
    ref = ReferenceBuffer(ref_plane) if ref_plane is not None else None
    x: Tensor | None = None
    mixes: list[Tensor] = []
    for stage in model.stages:
        x, mix = stage_forward(stage, view_dec, y_dec, ref, block_pos, x, model.alpha)
        mixes.append(mix)
    return x, mixes, y_t


def _fill_missing_grads(params: dict[str, Tensor]) -> None:
    # Structurally unused parameters (e.g. preliminary heads of stages > 1, or
    # the motion head when a batch held only key frames) still need a gradient
    # buffer; zero keeps Adam a no-op for them.
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def train_loop(
    model: ModelParams,
    dataset: list[TrainSample],
    op: MeasurementOperator | None,
    cfg: TrainConfig,
) -> list[LogRow]:
    """Adam training over block-granularity batches; returns the metrics log.

    Raises DivergenceError as soon as the loss stops being finite.
    """
    if not dataset:
        raise ConfigError("empty training dataset")
    if cfg.iterations < 0 or cfg.batch_size < 1:
        raise ConfigError(
            f"bad budget: iterations={cfg.iterations}, batch_size={cfg.batch_size}"
        )
    if op is not None:
        if op.block_size != model.block_size or op.m_max < model.m_eff:
            raise ConfigError("operator does not cover the model's geometry")
        if not np.array_equal(op.rows[: model.m_eff], model.op_rows):
            raise ConfigError("operator rows differ from the rows stored in the model")
    b = model.block_size
    for s in dataset:
        if s.frame.height % b or s.frame.width % b:
            raise GeometryError(
                f"training frame {s.frame.height}x{s.frame.width} not divisible by {b}"
            )
    if not cfg.keep_norm:
        mean, std = compute_norm_stats(dataset)
        model.norm_mean = mean
        model.norm_std = std
    cr_milli_list = (
        tuple(to_milli(c) for c in cfg.cr_list) if cfg.cr_list else model.cr_list_milli
    )
    for cr in cr_milli_list:
        if cr not in model.cr_list_milli:
            raise ConfigError(f"rate {from_milli(cr)} is not a model rate")

    frames_n = [
        normalize_plane(s.frame, model.norm_mean, model.norm_std).values for s in dataset
    ]
    refs_n = [
        normalize_plane(s.reference, model.norm_mean, model.norm_std)
        if s.reference is not None
        else None
        for s in dataset
    ]

    params = model.named_parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    rows_out: list[LogRow] = []
    log_fh = open(cfg.log_path, "a") if cfg.log_path else None
    try:
        for it in range(1, cfg.iterations + 1):
            cr = sample_cr(cr_milli_list, rng) if len(cr_milli_list) > 1 else cr_milli_list[0]
            view = model.sampling_view(cr)
            total = l_err_acc = l_mc_acc = None
            for _ in range(cfg.batch_size):
                si = int(rng.integers(len(dataset)))
                fr = frames_n[si]
                gh, gw = fr.shape[0] // b, fr.shape[1] // b
                gy, gx = int(rng.integers(gh)), int(rng.integers(gw))
                block = fr[gy * b : (gy + 1) * b, gx * b : (gx + 1) * b]
                out, mixes, y_t = _forward_sample(
                    model, view, block, refs_n[si], (gy * b, gx * b)
                )
                t, le, lm = loss_terms(out, Tensor(block), mixes, y_t, view, cfg.mc_weight)
                total = t if total is None else add(total, t)
                l_err_acc = le if l_err_acc is None else add(l_err_acc, le)
                l_mc_acc = lm if l_mc_acc is None else add(l_mc_acc, lm)
            total = scale(total, 1.0 / cfg.batch_size)
            loss_val = total.item()
            if not np.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss {loss_val} at iteration {it}")
            total.backward()
            _fill_missing_grads(params)
            opt.step()
            opt.zero_grad()
            row = LogRow(
                iteration=it,
                loss=loss_val,
                l_err=l_err_acc.item() / cfg.batch_size,
                l_mc=l_mc_acc.item() / cfg.batch_size,
                cr=from_milli(cr),
            )
            rows_out.append(row)
            if log_fh:
                log_fh.write(row.format() + "\n")
                log_fh.flush()
            if cfg.refresh_every > 0 and it % cfg.refresh_every == 0 and it < cfg.iterations:
                refs_n = _refresh_references(model, dataset, cr_milli_list, rng)
    finally:
        if log_fh:
            log_fh.close()
    return rows_out


def _refresh_references(
    model: ModelParams,
    dataset: list[TrainSample],
    cr_milli_list: tuple[int, ...],
    rng: np.random.Generator,
) -> list[FramePlane | None]:
    """Replace ground-truth references with the model's own decodes of them."""
    refs: list[FramePlane | None] = []
    for s in dataset:
        if s.reference is None:
            refs.append(None)
            continue
        cr = sample_cr(cr_milli_list, rng)
        view = model.sampling_view(cr)
        grid = sample_frame(view, normalize_plane(s.reference, model.norm_mean, model.norm_std))
        decoded = reconstruct_frame(model, grid, ref=None)
        refs.append(normalize_plane(decoded, model.norm_mean, model.norm_std))
    return refs


# ---------------------------------------------------------------------------
# synthetic data


def make_clip(
    n_frames: int,
    height: int,
    width: int,
    shift: tuple[int, int] = (0, 0),
    rng: np.random.Generator | None = None,
) -> list[FramePlane]:
    """Textured frames undergoing a constant integer translation per frame.

    Frames are integer-valued in [0, 255]; overlapping regions of consecutive
    frames match exactly because every frame is a window into one canvas.
    """
    if n_frames < 1 or height < 1 or width < 1:
        raise GeometryError(
            f"bad clip geometry: {n_frames} frames of {height}x{width}"
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    dy, dx = int(shift[0]), int(shift[1])
    span_y = abs(dy) * (n_frames - 1)
    span_x = abs(dx) * (n_frames - 1)
    ch, cw = height + span_y, width + span_x
    base = gaussian_filter(rng.standard_normal((ch, cw)), sigma=2.5)
    lo, hi = base.min(), base.max()
    canvas = (base - lo) / (hi - lo + 1e-12) * 200.0 + 25.0
    for _ in range(int(rng.integers(3, 7))):
        ry = int(rng.integers(0, max(ch - 4, 1)))
        rx = int(rng.integers(0, max(cw - 4, 1)))
        rh = int(rng.integers(4, 13))
        rw = int(rng.integers(4, 13))
        canvas[ry : ry + rh, rx : rx + rw] = rng.uniform(0.0, 255.0)
    canvas = np.clip(np.round(canvas), 0.0, 255.0)
    oy0 = max(0, -dy * (n_frames - 1))
    ox0 = max(0, -dx * (n_frames - 1))
    frames = []
    for t in range(n_frames):
        oy, ox = oy0 + t * dy, ox0 + t * dx
        frames.append(FramePlane(canvas[oy : oy + height, ox : ox + width].copy(), t))
    return frames


def clip_to_samples(clip: list[FramePlane]) -> list[TrainSample]:
    """Adjacent-frame pairs; the first frame becomes a reference-free sample."""
    samples = [TrainSample(frame=clip[0], reference=None)]
    for prev, cur in zip(clip, clip[1:]):
        samples.append(TrainSample(frame=cur, reference=prev))
    return samples


def make_synthetic_dataset(
    n_frames: int,
    height: int,
    width: int,
    shift: tuple[int, int] = (0, 0),
    seed: int = 0,
) -> list[TrainSample]:
    """One translating-texture clip flattened into training pairs."""
    rng = np.random.default_rng(seed)
    return clip_to_samples(make_clip(n_frames, height, width, shift, rng))


def make_clip_corpus(
    n_clips: int,
    n_frames: int,
    height: int,
    width: int,
    max_shift: int = 1,
    seed: int = 0,
) -> list[list[FramePlane]]:
    """Independent clips with per-clip random integer motion in [-max_shift, max_shift]."""
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(n_clips):
        shift = (
            int(rng.integers(-max_shift, max_shift + 1)),
            int(rng.integers(-max_shift, max_shift + 1)),
        )
        clips.append(make_clip(n_frames, height, width, shift, rng))
    return clips
