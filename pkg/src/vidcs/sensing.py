"""Block-based random measurement of luma planes.

A single random operator holds M_max rows of length B*B; lower compression
ratios reuse a prefix of those rows, so measurements taken at a low rate are
literally the first entries of the high-rate measurement vector.

Compression ratios are carried as exact integer milli-ratios (CR*1000) so that
round-half-up arithmetic never depends on float representation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, GeometryError, ShapeError, UnsupportedRateError

DEFAULT_BLOCK_SIZE = 16

_OP_MAGIC = b"CSKM"
_MEAS_MAGIC = b"CSKY"
_FORMAT_VERSION = 1


def round_half_up_ratio(num: int, den: int) -> int:
    """Exact round-half-up of num/den for non-negative integers."""
    if den <= 0 or num < 0:
        raise ConfigError(f"round_half_up_ratio needs num >= 0, den > 0, got {num}/{den}")
    return (2 * num + den) // (2 * den)


def to_milli(cr: float) -> int:
    """Convert a compression ratio to its integer milli representation."""
    milli = int(round(cr * 1000.0))
    if not (0 < milli <= 1000):
        raise ConfigError(f"compression ratio {cr} outside (0, 1]")
    return milli


def from_milli(milli: int) -> float:
    return milli / 1000.0


def measurement_count(cr_milli: int, block_size: int) -> int:
    """Rows kept at a given rate: round_half_up(CR * B^2), at least 1."""
    if not (0 < cr_milli <= 1000):
        raise ConfigError(f"compression ratio {cr_milli / 1000.0} outside (0, 1]")
    m = round_half_up_ratio(cr_milli * block_size * block_size, 1000)
    return max(m, 1)


@dataclass(frozen=True)
class FramePlane:
    """A single-channel frame; values are float64, pixel domain unless noted."""

    values: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"frame plane must be 2-D, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class OperatorView:
    """A fixed-rate slice of the measurement operator."""

    rows: np.ndarray  # (M_B, B*B), read-only
    block_size: int
    cr_milli: int

    @property
    def m(self) -> int:
        return self.rows.shape[0]


class MeasurementOperator:
    """Random Gaussian block measurement matrix with nested rate views."""

    def __init__(self, block_size: int, cr_max: float, seed: int):
        if block_size < 1:
            raise ConfigError(f"block size must be positive, got {block_size}")
        self.block_size = int(block_size)
        self.cr_max_milli = to_milli(cr_max)
        self.seed = int(seed)
        m_max = measurement_count(self.cr_max_milli, self.block_size)
        rng = np.random.default_rng(self.seed)
        rows = rng.standard_normal((m_max, self.block_size * self.block_size))
        rows.setflags(write=False)
        self.rows = rows

    @property
    def m_max(self) -> int:
        return self.rows.shape[0]

    def rate_view(self, cr: float | int) -> OperatorView:
        """View of the first M_B rows; low-rate rows are a prefix of high-rate rows."""
        milli = cr if isinstance(cr, (int, np.integer)) else to_milli(cr)
        if not (0 < milli <= 1000):
            raise ConfigError(f"compression ratio {milli / 1000.0} outside (0, 1]")
        m = measurement_count(int(milli), self.block_size)
        if m > self.m_max:
            raise UnsupportedRateError(
                f"rate {milli / 1000.0} needs {m} rows but operator holds {self.m_max}"
            )
        return OperatorView(rows=self.rows[:m], block_size=self.block_size, cr_milli=int(milli))


def make_operator(block_size: int, cr_max: float, seed: int) -> MeasurementOperator:
    return MeasurementOperator(block_size, cr_max, seed)


@dataclass
class MeasurementGrid:
    """Per-block measurements of one frame, channel-major: (M_B, grid_h, grid_w)."""

    data: np.ndarray
    block_size: int
    cr_milli: int = 0  # 0 when unknown (e.g. freshly parsed stream)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ShapeError(f"measurement grid must be 3-D, got shape {d.shape}")
        self.data = d

    @property
    def m_b(self) -> int:
        return self.data.shape[0]

    @property
    def grid_h(self) -> int:
        return self.data.shape[1]

    @property
    def grid_w(self) -> int:
        return self.data.shape[2]


def split_blocks(plane: FramePlane, block_size: int) -> list[np.ndarray]:
    """Raster-order list of B x B blocks; geometry must divide exactly."""
    h, w = plane.values.shape
    if h % block_size or w % block_size:
        raise GeometryError(
            f"frame {h}x{w} is not divisible into {block_size}x{block_size} blocks"
        )
    gh, gw = h // block_size, w // block_size
    tiles = plane.values.reshape(gh, block_size, gw, block_size).transpose(0, 2, 1, 3)
    return [tiles[i, j].copy() for i in range(gh) for j in range(gw)]


def assemble_frame(blocks: list[np.ndarray], grid_h: int, grid_w: int) -> FramePlane:
    """Inverse of split_blocks for a raster-ordered block list."""
    if len(blocks) != grid_h * grid_w:
        raise GeometryError(
            f"expected {grid_h * grid_w} blocks for a {grid_h}x{grid_w} grid, got {len(blocks)}"
        )
    b = np.asarray(blocks[0]).shape[0]
    stack = np.stack([np.asarray(blk, dtype=np.float64) for blk in blocks])
    if stack.shape[1:] != (b, b):
        raise GeometryError(f"blocks are not uniformly {b}x{b}: got {stack.shape[1:]}")
    frame = (
        stack.reshape(grid_h, grid_w, b, b).transpose(0, 2, 1, 3).reshape(grid_h * b, grid_w * b)
    )
    return FramePlane(frame)


def sample_block(view: OperatorView, block: np.ndarray) -> np.ndarray:
    """Measure one block: y = rows @ vec(block)."""
    vec = np.asarray(block, dtype=np.float64).reshape(-1)
    if vec.shape[0] != view.block_size * view.block_size:
        raise ShapeError(
            f"block with {vec.shape[0]} samples does not match operator rows of length "
            f"{view.block_size * view.block_size}"
        )
    return view.rows @ vec


def sample_frame(view: OperatorView, plane: FramePlane) -> MeasurementGrid:
    """Measure every block of a frame; equivalent to per-block sample_block."""
    h, w = plane.values.shape
    b = view.block_size
    if h % b or w % b:
        raise GeometryError(f"frame {h}x{w} is not divisible into {b}x{b} blocks")
    gh, gw = h // b, w // b
    blocks = plane.values.reshape(gh, b, gw, b).transpose(0, 2, 1, 3).reshape(gh * gw, b * b)
    y = blocks @ view.rows.T  # (gh*gw, M)
    data = y.T.reshape(view.m, gh, gw)
    return MeasurementGrid(data=data, block_size=b, cr_milli=view.cr_milli)


def center_crop_to_multiple(plane: FramePlane, block_size: int) -> FramePlane:
    """Center-crop a frame so both sides divide by the block size."""
    h, w = plane.values.shape
    ch, cw = (h // block_size) * block_size, (w // block_size) * block_size
    if ch == 0 or cw == 0:
        raise GeometryError(f"frame {h}x{w} smaller than one {block_size}x{block_size} block")
    oy, ox = (h - ch) // 2, (w - cw) // 2
    return FramePlane(plane.values[oy : oy + ch, ox : ox + cw].copy(), plane.frame_index)


def normalize_plane(plane: FramePlane, mean: float, std: float) -> FramePlane:
    if std <= 0:
        raise ConfigError(f"normalization std must be positive, got {std}")
    return FramePlane((plane.values - mean) / std, plane.frame_index)


def denormalize_plane(plane: FramePlane, mean: float, std: float) -> FramePlane:
    return FramePlane(plane.values * std + mean, plane.frame_index)


def normalize_measurements(
    grid: MeasurementGrid, view: OperatorView, mean: float, std: float
) -> MeasurementGrid:
    """Map raw-pixel-domain measurements into the normalized domain.

    Measuring is linear, so y_norm = (y_raw - mean * rows@1) / std equals
    measuring the normalized frame directly.
    """
    if grid.m_b != view.m:
        raise ShapeError(f"grid has {grid.m_b} channels but view has {view.m} rows")
    row_sums = view.rows.sum(axis=1)
    data = (grid.data - mean * row_sums[:, None, None]) / std
    return MeasurementGrid(data=data, block_size=grid.block_size, cr_milli=grid.cr_milli)


# ---------------------------------------------------------------------------
# binary containers


def save_operator(op: MeasurementOperator, path: str) -> None:
    """Write the operator: magic, version, B, M_max, seed, then f64 rows."""
    with open(path, "wb") as fh:
        fh.write(_OP_MAGIC)
        fh.write(struct.pack("<IIIQ", _FORMAT_VERSION, op.block_size, op.m_max, op.seed))
        fh.write(np.ascontiguousarray(op.rows, dtype="<f8").tobytes())


def load_operator(path: str) -> MeasurementOperator:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _OP_MAGIC:
        raise FormatError(f"bad operator magic {blob[:4]!r}")
    if len(blob) < 4 + struct.calcsize("<IIIQ"):
        raise FormatError("operator file truncated before header end")
    version, block_size, m_max, seed = struct.unpack_from("<IIIQ", blob, 4)
    if version != _FORMAT_VERSION:
        raise FormatError(f"unsupported operator version {version}")
    off = 4 + struct.calcsize("<IIIQ")
    want = m_max * block_size * block_size
    if len(blob) < off + want * 8:
        raise FormatError("operator file truncated in row payload")
    rows = np.frombuffer(blob, dtype="<f8", count=want, offset=off)
    rows = rows.reshape(m_max, block_size * block_size).astype(np.float64)
    op = MeasurementOperator.__new__(MeasurementOperator)
    op.block_size = block_size
    op.seed = seed
    op.cr_max_milli = round_half_up_ratio(m_max * 1000, block_size * block_size)
    rows.setflags(write=False)
    op.rows = rows
    return op


def operator_from_rows(rows: np.ndarray, block_size: int, seed: int) -> MeasurementOperator:
    """Wrap stored rows (e.g. from a model file) as a full operator."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != block_size * block_size:
        raise ShapeError(f"operator rows {rows.shape} do not match block size {block_size}")
    op = MeasurementOperator.__new__(MeasurementOperator)
    op.block_size = int(block_size)
    op.seed = int(seed)
    op.cr_max_milli = round_half_up_ratio(rows.shape[0] * 1000, block_size * block_size)
    rows = rows.copy()
    rows.setflags(write=False)
    op.rows = rows
    return op


def save_measurements(path: str, grids: list[MeasurementGrid]) -> None:
    """Write a measurement stream: header then f32 frame payloads in order."""
    if not grids:
        raise FormatError("cannot write an empty measurement stream")
    first = grids[0]
    for g in grids:
        if (g.m_b, g.grid_h, g.grid_w, g.block_size) != (
            first.m_b,
            first.grid_h,
            first.grid_w,
            first.block_size,
        ):
            raise GeometryError("all frames in a measurement stream must share geometry")
    with open(path, "wb") as fh:
        fh.write(_MEAS_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIII",
                _FORMAT_VERSION,
                first.block_size,
                first.m_b,
                first.grid_h,
                first.grid_w,
                len(grids),
            )
        )
        for g in grids:
            fh.write(np.ascontiguousarray(g.data, dtype="<f4").tobytes())


def load_measurements(path: str) -> list[MeasurementGrid]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MEAS_MAGIC:
        raise FormatError(f"bad measurement magic {blob[:4]!r}")
    head = struct.calcsize("<IIIIII")
    if len(blob) < 4 + head:
        raise FormatError("measurement file truncated before header end")
    version, block_size, m_b, grid_h, grid_w, n_frames = struct.unpack_from("<IIIIII", blob, 4)
    if version != _FORMAT_VERSION:
        raise FormatError(f"unsupported measurement version {version}")
    off = 4 + head
    per_frame = m_b * grid_h * grid_w
    grids = []
    for _ in range(n_frames):
        if len(blob) < off + per_frame * 4:
            raise FormatError("measurement file truncated in frame payload")
        vals = np.frombuffer(blob, dtype="<f4", count=per_frame, offset=off)
        off += per_frame * 4
        grids.append(
            MeasurementGrid(
                data=vals.astype(np.float64).reshape(m_b, grid_h, grid_w),
                block_size=block_size,
            )
        )
    return grids
