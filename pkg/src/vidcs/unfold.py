"""Unfolded multi-stage block decoder.

Each stage turns measurements into a block estimate in three steps: a learned
preliminary reconstruction (FC + conv stack), fusion with a motion-compensated
prediction from the reference frame, and a residual correction that re-measures
the fused block and maps the measurement-domain residual back to pixels through
a skip connection. Stages after the first reuse the previous stage's output in
place of their own preliminary reconstruction.

The interpolation module lets one decoder serve several compression ratios: raw
measurements are expanded channel-wise by a learned 1-D kernel and a fixed
selection keeps exactly M_max channels, so every downstream layer sees the same
input width regardless of the sampling rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    Tensor,
    add,
    channel_upsample,
    conv2d_same,
    gather,
    linear,
    relu,
    reshape,
    scale,
    sub,
)
from .errors import ConfigError, GeometryError, ShapeError, UnsupportedRateError
from .mhme import MhmeParams, ReferenceBuffer, extract_hypotheses, mh_predict, predict_weights, search_window
from .sensing import (
    FramePlane,
    MeasurementGrid,
    MeasurementOperator,
    OperatorView,
    assemble_frame,
    from_milli,
    make_operator,
    measurement_count,
    normalize_plane,
    round_half_up_ratio,
    sample_frame,
    to_milli,
)


@dataclass
class ConvLayerParams:
    kernel: Tensor  # (F, C, k, k)
    bias: Tensor  # (F,)


@dataclass
class StageParams:
    block_size: int
    fc_pre_w: Tensor  # (B*B, M_eff)
    fc_pre_b: Tensor  # (B*B,)
    convs_pre: tuple[ConvLayerParams, ...]
    mhme: MhmeParams
    fc_res_w: Tensor  # (B*B, M_eff)
    fc_res_b: Tensor  # (B*B,)
    convs_res: tuple[ConvLayerParams, ...]


@dataclass
class ItpParams:
    """Channel interpolation: learned deconvolution kernel plus fixed selection."""

    kernel: Tensor  # (A,)
    amplification: int
    cr_min_milli: int
    cr_max_milli: int
    cr_list_milli: tuple[int, ...]
    m_max: int  # output channel count, fixed across rates


@dataclass
class ModelParams:
    block_size: int
    stages: list[StageParams]
    itp: ItpParams | None
    cr_list_milli: tuple[int, ...]
    conv_spec: tuple[tuple[int, int], ...]
    mh_stride: int
    alpha: float
    norm_mean: float
    norm_std: float
    op_rows: np.ndarray  # (M_eff, B*B) operator rows used by the decoder
    op_seed: int

    @property
    def m_eff(self) -> int:
        return self.op_rows.shape[0]

    @property
    def cr_max_milli(self) -> int:
        return max(self.cr_list_milli)

    @property
    def cr_min_milli(self) -> int:
        return min(self.cr_list_milli)

    def sampling_view(self, cr_milli: int) -> OperatorView:
        """Operator rows actually applied at encode time for one trained rate."""
        if cr_milli not in self.cr_list_milli:
            raise UnsupportedRateError(
                f"rate {from_milli(cr_milli)} not in trained set "
                f"{[from_milli(c) for c in self.cr_list_milli]}"
            )
        m = measurement_count(cr_milli, self.block_size)
        return OperatorView(rows=self.op_rows[:m], block_size=self.block_size, cr_milli=cr_milli)

    def residual_view(self) -> OperatorView:
        """Fixed-width view used for in-decoder re-measurement."""
        return OperatorView(
            rows=self.op_rows, block_size=self.block_size, cr_milli=self.cr_max_milli
        )

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for s, stage in enumerate(self.stages, start=1):
            params[f"stage{s}.fc_pre.weight"] = stage.fc_pre_w
            params[f"stage{s}.fc_pre.bias"] = stage.fc_pre_b
            for i, layer in enumerate(stage.convs_pre, start=1):
                params[f"stage{s}.conv_pre{i}.kernel"] = layer.kernel
                params[f"stage{s}.conv_pre{i}.bias"] = layer.bias
            params[f"stage{s}.mh.weight"] = stage.mhme.weight
            params[f"stage{s}.mh.bias"] = stage.mhme.bias
            params[f"stage{s}.fc_res.weight"] = stage.fc_res_w
            params[f"stage{s}.fc_res.bias"] = stage.fc_res_b
            for i, layer in enumerate(stage.convs_res, start=1):
                params[f"stage{s}.conv_res{i}.kernel"] = layer.kernel
                params[f"stage{s}.conv_res{i}.bias"] = layer.bias
        if self.itp is not None:
            params["itp.kernel"] = self.itp.kernel
        return params


def _validate_conv_spec(conv_spec: tuple[tuple[int, int], ...]) -> None:
    for ch, ks in conv_spec:
        if ch < 1:
            raise ConfigError(f"conv layer needs >= 1 channel, got {ch}")
        if ks < 1 or ks % 2 == 0:
            raise ConfigError(f"conv kernels must be odd, got size {ks}")
    if conv_spec and conv_spec[-1][0] != 1:
        raise ConfigError("last conv layer must emit a single channel")


def build_model(
    block_size: int = 16,
    stages: int = 1,
    cr_list: tuple[float, ...] = (0.1,),
    conv_spec: tuple[tuple[int, int], ...] = ((64, 3), (32, 3), (1, 3)),
    use_itp: bool = False,
    mh_stride: int = 1,
    alpha: float = 0.5,
    seed: int = 0,
    op: MeasurementOperator | None = None,
    norm_mean: float = 0.0,
    norm_std: float = 1.0,
) -> ModelParams:
    """Create a randomly initialized model.

    Weights start at U(-k, k), k = 1/sqrt(fan_in), with two exceptions chosen
    so training starts from a sane decoder instead of noise:

    * every conv kernel gets a centre-tap spike of 1/in_channels on top of
      the uniform draw, so a fresh conv stack roughly passes its input
      through rather than attenuating it (purely random small kernels leave
      the block estimate crawling toward the data for thousands of steps);
    * the motion head and the last conv of each residual head start at zero,
      so both corrections grow from nothing: a random hypothesis mix at
      measurement scale would swamp the preliminary estimate, and a random
      residual conv would corrupt a chained stage's input.
    """
    if stages < 1:
        raise ConfigError(f"need at least one stage, got {stages}")
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"fusion weight must lie in [0, 1], got {alpha}")
    if mh_stride < 1 or mh_stride > block_size:
        raise ConfigError(f"hypothesis stride {mh_stride} outside [1, {block_size}]")
    conv_spec = tuple((int(c), int(k)) for c, k in conv_spec)
    _validate_conv_spec(conv_spec)
    cr_milli = tuple(sorted({to_milli(c) for c in cr_list}))
    if not cr_milli:
        raise ConfigError("empty compression ratio list")
    if not use_itp and len(cr_milli) > 1:
        raise ConfigError("multiple rates require the interpolation module")
    cr_max = cr_milli[-1]
    cr_min = cr_milli[0]
    m_eff = measurement_count(cr_max, block_size)
    if op is None:
        op = make_operator(block_size, from_milli(cr_max), seed)
    if op.block_size != block_size:
        raise ConfigError(f"operator block size {op.block_size} != model block size {block_size}")
    if op.m_max < m_eff:
        raise ConfigError(f"operator holds {op.m_max} rows, model needs {m_eff}")
    op_rows = np.array(op.rows[:m_eff])
    op_rows.setflags(write=False)

    rng = np.random.default_rng(seed)

    def uniform(fan_in: int, *shape: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    def conv_layers(zero_last: bool = False) -> tuple[ConvLayerParams, ...]:
        layers = []
        in_ch = 1
        for out_ch, ks in conv_spec:
            fan = in_ch * ks * ks
            kernel = uniform(fan, out_ch, in_ch, ks, ks)
            kernel.data[:, :, ks // 2, ks // 2] += 1.0 / in_ch
            layers.append(ConvLayerParams(kernel=kernel, bias=uniform(fan, out_ch)))
            in_ch = out_ch
        if zero_last and layers:
            layers[-1].kernel.data[...] = 0.0
            layers[-1].bias.data[...] = 0.0
        return tuple(layers)

    bb = block_size * block_size
    k_count = (block_size // mh_stride + 1) ** 2
    mh_in = m_eff + 4 * bb
    stage_list = []
    for _ in range(stages):
        stage_list.append(
            StageParams(
                block_size=block_size,
                fc_pre_w=uniform(m_eff, bb, m_eff),
                fc_pre_b=uniform(m_eff, bb),
                convs_pre=conv_layers(),
                mhme=MhmeParams(
                    weight=Tensor(np.zeros((k_count, mh_in)), requires_grad=True),
                    bias=Tensor(np.zeros(k_count), requires_grad=True),
                    m_pad=m_eff,
                    block_size=block_size,
                    stride=mh_stride,
                ),
                fc_res_w=uniform(m_eff, bb, m_eff),
                fc_res_b=uniform(m_eff, bb),
                convs_res=conv_layers(zero_last=True),
            )
        )
    itp = None
    if use_itp:
        amp = cr_max // cr_min
        itp = ItpParams(
            kernel=Tensor(np.ones(amp), requires_grad=True),
            amplification=amp,
            cr_min_milli=cr_min,
            cr_max_milli=cr_max,
            cr_list_milli=cr_milli,
            m_max=m_eff,
        )
    return ModelParams(
        block_size=block_size,
        stages=stage_list,
        itp=itp,
        cr_list_milli=cr_milli,
        conv_spec=conv_spec,
        mh_stride=mh_stride,
        alpha=float(alpha),
        norm_mean=float(norm_mean),
        norm_std=float(norm_std),
        op_rows=op_rows,
        op_seed=op.seed,
    )


# ---------------------------------------------------------------------------
# stage forward pieces


def conv_stack(x: Tensor, layers: tuple[ConvLayerParams, ...]) -> Tensor:
    """Apply conv layers with ReLU between them (none after the last)."""
    n = len(layers)
    for i, layer in enumerate(layers):
        x = conv2d_same(x, layer.kernel, layer.bias)
        if i < n - 1:
            x = relu(x)
    return x


def _fc_conv_head(
    y: Tensor, w: Tensor, b: Tensor, layers: tuple[ConvLayerParams, ...], block_size: int
) -> Tensor:
    t = linear(y, w, b)
    if not layers:
        return reshape(t, (block_size, block_size))
    t = relu(t)
    t = reshape(t, (1, block_size, block_size))
    t = conv_stack(t, layers)
    if t.shape[0] != 1:
        raise ShapeError(f"conv stack must end in one channel, got {t.shape}")
    return reshape(t, (block_size, block_size))


def preliminary_reconstruct(stage: StageParams, y: Tensor) -> Tensor:
    """Measurement-only block estimate: FC lifting plus conv refinement."""
    return _fc_conv_head(y, stage.fc_pre_w, stage.fc_pre_b, stage.convs_pre, stage.block_size)


def fuse(x_a: Tensor, x_b: Tensor, alpha: float = 0.5, beta: float = 0.5) -> Tensor:
    """Convex combination of two block estimates; weights must sum to one."""
    if abs(alpha + beta - 1.0) > 1e-9:
        raise ConfigError(f"fusion weights must sum to 1, got {alpha} + {beta}")
    return add(scale(x_a, alpha), scale(x_b, beta))


def residual_correct(stage: StageParams, view: OperatorView, y: Tensor, x_mix: Tensor) -> Tensor:
    """Re-measure the fused block and add back a learned residual decoding."""
    b = stage.block_size
    if y.shape != (view.m,):
        raise ShapeError(
            f"operator rate mismatch: measurements {y.shape} vs {view.m} operator rows"
        )
    flat = reshape(x_mix, (b * b,))
    y_hat = linear(flat, Tensor(view.rows))
    r = sub(y, y_hat)
    corr = _fc_conv_head(r, stage.fc_res_w, stage.fc_res_b, stage.convs_res, b)
    return add(x_mix, corr)


def run_stage(
    stage: StageParams,
    view: OperatorView,
    y: Tensor,
    ref: ReferenceBuffer | None,
    block_pos: tuple[int, int],
    x_prev: Tensor | None = None,
    alpha: float = 0.5,
) -> Tensor:
    """One full decoding stage for a single block; returns the corrected block."""
    out, _ = stage_forward(stage, view, y, ref, block_pos, x_prev, alpha)
    return out


def stage_forward(
    stage: StageParams,
    view: OperatorView,
    y: Tensor,
    ref: ReferenceBuffer | None,
    block_pos: tuple[int, int],
    x_prev: Tensor | None = None,
    alpha: float = 0.5,
) -> tuple[Tensor, Tensor]:
    """Stage output plus the fused estimate feeding the measurement-consistency loss."""
    b = stage.block_size
    x_a = x_prev if x_prev is not None else preliminary_reconstruct(stage, y)
    if ref is None:
        x_mix = x_a  # no reference: fusion degenerates to the measurement branch
    else:
        window, _ = search_window(ref.plane, block_pos, b)
        hset = extract_hypotheses(ref, block_pos, b, stage.mhme.stride)
        omega = predict_weights(stage.mhme, y, Tensor(window.reshape(-1)))
        x_b = reshape(mh_predict(omega, hset), (b, b))
        x_mix = fuse(x_a, x_b, alpha, 1.0 - alpha)
    out = residual_correct(stage, view, y, x_mix)
    return out, x_mix


# ---------------------------------------------------------------------------
# interpolation


def selection_indices(
    cr_milli: int, cr_min_milli: int, m_max: int, expanded_len: int
) -> np.ndarray:
    """0-based expanded-channel index for each of the m_max outputs.

    Output i (1-based) keeps expanded channel round_half_up(i * CR / CR_min),
    clamped to the expanded length.
    """
    if cr_milli < cr_min_milli:
        raise UnsupportedRateError(
            f"rate {from_milli(cr_milli)} below interpolation minimum {from_milli(cr_min_milli)}"
        )
    i = np.arange(1, m_max + 1, dtype=np.int64)
    k = (2 * i * cr_milli + cr_min_milli) // (2 * cr_min_milli)
    k = np.clip(k, 1, expanded_len)
    return (k - 1).astype(np.intp)


def select_channels(
    expanded: np.ndarray, cr_milli: int, cr_min_milli: int, m_max: int
) -> np.ndarray:
    """Fixed channel selection on an expanded array (channels on axis 0)."""
    idx = selection_indices(cr_milli, cr_min_milli, m_max, expanded.shape[0])
    return expanded[idx]


def itp_expand_vector(itp: ItpParams, y: Tensor, cr_milli: int) -> Tensor:
    """Differentiable per-block interpolation to the fixed M_max width."""
    if cr_milli not in itp.cr_list_milli:
        raise UnsupportedRateError(f"rate {from_milli(cr_milli)} not in trained set")
    expanded = channel_upsample(y, itp.kernel)
    idx = selection_indices(cr_milli, itp.cr_min_milli, itp.m_max, expanded.shape[0])
    return gather(expanded, idx)


def itp_interpolate(itp: ItpParams, grid: MeasurementGrid) -> MeasurementGrid:
    """Grid-level interpolation: expand channels by the kernel, then select."""
    if grid.cr_milli not in itp.cr_list_milli:
        raise UnsupportedRateError(f"rate {from_milli(grid.cr_milli)} not in trained set")
    w = itp.kernel.data
    expanded = (grid.data[:, None, :, :] * w[None, :, None, None]).reshape(
        grid.m_b * itp.amplification, grid.grid_h, grid.grid_w
    )
    data = select_channels(expanded, grid.cr_milli, itp.cr_min_milli, itp.m_max)
    return MeasurementGrid(data=data, block_size=grid.block_size, cr_milli=itp.cr_max_milli)


# ---------------------------------------------------------------------------
# frame / sequence decoding


def _infer_rate(model: ModelParams, grid: MeasurementGrid) -> int:
    if grid.cr_milli:
        if grid.cr_milli not in model.cr_list_milli:
            raise UnsupportedRateError(
                f"rate {from_milli(grid.cr_milli)} not in trained set "
                f"{[from_milli(c) for c in model.cr_list_milli]}"
            )
        return grid.cr_milli
    for cr in model.cr_list_milli:
        if measurement_count(cr, model.block_size) == grid.m_b:
            return cr
    raise UnsupportedRateError(
        f"no trained rate yields {grid.m_b} measurement channels per block"
    )


def reconstruct_frame(
    model: ModelParams,
    grid: MeasurementGrid,
    ref: ReferenceBuffer | None = None,
    use_mhme: bool = True,
) -> FramePlane:
    """Decode one frame from normalized-domain measurements to pixel domain.

    ``ref`` must hold a normalized-domain plane (as produced by decode loops);
    the returned plane is de-normalized and clamped to [0, 255].
    """
    if grid.block_size != model.block_size:
        raise GeometryError(
            f"grid block size {grid.block_size} != model block size {model.block_size}"
        )
    cr = _infer_rate(model, grid)
    expected = measurement_count(cr, model.block_size)
    if grid.m_b != expected:
        raise ShapeError(f"grid has {grid.m_b} channels, rate {from_milli(cr)} needs {expected}")
    if model.itp is not None:
        work = itp_interpolate(
            model.itp,
            MeasurementGrid(data=grid.data, block_size=grid.block_size, cr_milli=cr),
        )
    else:
        if grid.m_b != model.m_eff:
            raise UnsupportedRateError(
                f"model decodes {model.m_eff} channels, grid has {grid.m_b}"
            )
        work = grid
    view = model.residual_view()
    b = model.block_size
    ref_used = ref if use_mhme else None
    blocks = []
    for gy in range(work.grid_h):
        for gx in range(work.grid_w):
            y_t = Tensor(np.ascontiguousarray(work.data[:, gy, gx]))
            pos = (gy * b, gx * b)
            x: Tensor | None = None
            for stage in model.stages:
                x = run_stage(stage, view, y_t, ref_used, pos, x_prev=x, alpha=model.alpha)
            blocks.append(x.data)
    plane = assemble_frame(blocks, work.grid_h, work.grid_w)
    values = plane.values * model.norm_std + model.norm_mean
    return FramePlane(np.clip(values, 0.0, 255.0))


def decode_sequence(
    model: ModelParams,
    planes: list[FramePlane],
    cr: float | int,
    use_mhme: bool = True,
) -> list[FramePlane]:
    """Measure and decode a pixel-domain frame sequence at one trained rate.

    The first frame decodes without a reference; later frames use the previous
    decoded frame (normalized) as their reference.
    """
    cr_milli = cr if isinstance(cr, (int, np.integer)) else to_milli(cr)
    view = model.sampling_view(int(cr_milli))
    ref: ReferenceBuffer | None = None
    out: list[FramePlane] = []
    for plane in planes:
        xn = normalize_plane(plane, model.norm_mean, model.norm_std)
        grid = sample_frame(view, xn)
        decoded = reconstruct_frame(model, grid, ref, use_mhme=use_mhme)
        decoded = FramePlane(decoded.values, plane.frame_index)
        out.append(decoded)
        ref = ReferenceBuffer(normalize_plane(decoded, model.norm_mean, model.norm_std))
    return out
