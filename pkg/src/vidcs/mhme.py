"""Multi-hypothesis motion estimation against a reference frame.

For each block, candidate predictions are every B x B patch inside a 2B x 2B
search window of the reference, centered on the block position and clamped to
the frame. A learned linear map turns [measurements || window pixels] into
combination weights over the candidates; a Tikhonov-regularized least-squares
solve provides the non-learned oracle for the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import cho_factor, cho_solve, lstsq

from .diffcore import Tensor, concat, linear
from .errors import ConfigError, GeometryError, ShapeError
from .sensing import FramePlane, OperatorView


@dataclass
class ReferenceBuffer:
    """Holds the previously decoded plane; swapped only between frames."""

    plane: FramePlane


@dataclass(frozen=True)
class HypothesisSet:
    """Candidate block predictions, one per row of ``candidates``."""

    candidates: np.ndarray  # (K, B*B)
    offsets: np.ndarray  # (K, 2) displacement (dy, dx) from the block origin

    @property
    def count(self) -> int:
        return self.candidates.shape[0]


@dataclass
class MhmeParams:
    """Learned weight predictor: omega = weight @ [y_pad || window] + bias."""

    weight: Tensor  # (K, m_pad + 4*B*B)
    bias: Tensor  # (K,)
    m_pad: int
    block_size: int
    stride: int = 1

    @property
    def hypothesis_count(self) -> int:
        return self.weight.shape[0]


def search_window(
    plane: FramePlane, block_pos: tuple[int, int], block_size: int
) -> tuple[np.ndarray, tuple[int, int]]:
    """2B x 2B reference patch centered on the block, clamped inside the frame."""
    h, w = plane.values.shape
    b = block_size
    if h < 2 * b or w < 2 * b:
        raise GeometryError(
            f"reference {h}x{w} is smaller than the {2 * b}x{2 * b} search window"
        )
    by, bx = block_pos
    if not (0 <= by <= h - b and 0 <= bx <= w - b):
        raise GeometryError(f"block at {block_pos} falls outside a {h}x{w} frame")
    wy = min(max(by - b // 2, 0), h - 2 * b)
    wx = min(max(bx - b // 2, 0), w - 2 * b)
    return plane.values[wy : wy + 2 * b, wx : wx + 2 * b], (wy, wx)


def extract_hypotheses(
    ref: ReferenceBuffer, block_pos: tuple[int, int], block_size: int, stride: int = 1
) -> HypothesisSet:
    """All B x B patches of the search window at the given stride.

    At stride 1 this yields (B+1)^2 candidates regardless of clamping.
    """
    if stride < 1:
        raise ConfigError(f"hypothesis stride must be >= 1, got {stride}")
    window, (wy, wx) = search_window(ref.plane, block_pos, block_size)
    b = block_size
    patches = sliding_window_view(window, (b, b))[::stride, ::stride]
    ny, nx = patches.shape[:2]
    candidates = patches.reshape(ny * nx, b * b)  # reshape copies the strided view
    candidates.setflags(write=False)
    ys = wy + np.arange(0, 2 * b - b + 1, stride)
    xs = wx + np.arange(0, 2 * b - b + 1, stride)
    oy = ys - block_pos[0]
    ox = xs - block_pos[1]
    offsets = np.stack(np.meshgrid(oy, ox, indexing="ij"), axis=-1).reshape(-1, 2)
    return HypothesisSet(candidates=candidates, offsets=offsets)


def predict_weights(params: MhmeParams, y: Tensor, window: Tensor) -> Tensor:
    """Learned combination weights from measurements and the search window.

    ``y`` shorter than the trained width is zero-padded on the right so one
    model serves every rate below its maximum.
    """
    if y.data.ndim != 1:
        raise ShapeError(f"measurement vector must be 1-D, got {y.shape}")
    win_len = 4 * params.block_size * params.block_size
    if window.shape != (win_len,):
        raise ShapeError(f"window must be flattened to {win_len} values, got {window.shape}")
    m = y.shape[0]
    if m > params.m_pad:
        raise ShapeError(f"measurement vector of {m} exceeds trained width {params.m_pad}")
    if m < params.m_pad:
        y = concat(y, Tensor(np.zeros(params.m_pad - m)))
    return linear(concat(y, window), params.weight, params.bias)


def mh_predict(omega: Tensor, hset: HypothesisSet) -> Tensor:
    """Linear combination of hypotheses: returns vec of the predicted block."""
    if omega.shape != (hset.count,):
        raise ShapeError(
            f"weights {omega.shape} do not match {hset.count} hypotheses"
        )
    return linear(omega, Tensor(hset.candidates.T))


def tikhonov_solve(
    y: np.ndarray,
    view: OperatorView,
    hset: HypothesisSet,
    lam: float = 0.01,
    return_cond: bool = False,
):
    """Oracle weights: argmin_w ||y - (rows @ H^T) w||^2 + lam ||w||^2.

    lam == 0 falls back to the minimum-norm least-squares solution.
    """
    if lam < 0:
        raise ConfigError(f"regularization weight must be >= 0, got {lam}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (view.m,):
        raise ShapeError(f"measurements {y.shape} do not match {view.m} operator rows")
    a = view.rows @ hset.candidates.T  # (M, K)
    sv = np.linalg.svd(a, compute_uv=False)
    nz = sv[sv > sv[0] * max(a.shape) * np.finfo(np.float64).eps] if sv.size else sv
    cond = float(nz[0] / nz[-1]) if nz.size else np.inf
    if lam == 0.0:
        omega, *_ = lstsq(a, y, lapack_driver="gelsd")
    else:
        gram = a.T @ a + lam * np.eye(a.shape[1])
        omega = cho_solve(cho_factor(gram), a.T @ y)
    return (omega, cond) if return_cond else omega
