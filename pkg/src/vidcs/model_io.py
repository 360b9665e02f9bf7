"""Model container: one file holding geometry, rates, weights, and the operator.

Layout (little-endian): magic, fixed header, the rate list, the conv spec, then
named parameter blocks. Trainable weights are stored as f32; the operator rows
ride along as an f64 block so encoder and decoder share bit-identical rows.
"""

from __future__ import annotations

import struct

import numpy as np

from .diffcore import Tensor
from .errors import FormatError
from .mhme import MhmeParams
from .sensing import measurement_count
from .unfold import ConvLayerParams, ItpParams, ModelParams, StageParams

_MODEL_MAGIC = b"CSKN"
_MODEL_VERSION = 1
_INDEX_CONVENTION = 1  # 1-based round-half-up channel selection, clamped
_HEADER = "<IIIIdIIIddQ"
_DT_F32, _DT_F64 = 0, 1


def _write_block(fh, name: str, arr: np.ndarray, dtype_tag: int) -> None:
    raw = name.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<II", dtype_tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    wire = "<f4" if dtype_tag == _DT_F32 else "<f8"
    fh.write(np.ascontiguousarray(arr, dtype=wire).tobytes())


def save_model(model: ModelParams, path: str) -> None:
    params = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(
            struct.pack(
                _HEADER,
                _MODEL_VERSION,
                model.block_size,
                len(model.stages),
                model.mh_stride,
                model.alpha,
                1 if model.itp is not None else 0,
                model.itp.amplification if model.itp is not None else 0,
                _INDEX_CONVENTION,
                model.norm_mean,
                model.norm_std,
                model.op_seed,
            )
        )
        fh.write(struct.pack("<I", len(model.cr_list_milli)))
        fh.write(struct.pack(f"<{len(model.cr_list_milli)}I", *model.cr_list_milli))
        fh.write(struct.pack("<I", len(model.conv_spec)))
        for ch, ks in model.conv_spec:
            fh.write(struct.pack("<II", ch, ks))
        fh.write(struct.pack("<I", len(params) + 1))
        _write_block(fh, "sensing.rows", model.op_rows, _DT_F64)
        for name, tensor in params.items():
            _write_block(fh, name, tensor.data, _DT_F32)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.blob):
            raise FormatError("model file truncated")
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += size
        return vals

    def raw(self, count: int) -> bytes:
        if self.off + count > len(self.blob):
            raise FormatError("model file truncated")
        out = self.blob[self.off : self.off + count]
        self.off += count
        return out


def _read_block(r: _Reader) -> tuple[str, np.ndarray]:
    (name_len,) = r.take("<H")
    name = r.raw(name_len).decode()
    dtype_tag, ndim = r.take("<II")
    shape = r.take(f"<{ndim}I") if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    if dtype_tag == _DT_F32:
        arr = np.frombuffer(r.raw(count * 4), dtype="<f4").astype(np.float64)
    elif dtype_tag == _DT_F64:
        arr = np.frombuffer(r.raw(count * 8), dtype="<f8").astype(np.float64)
    else:
        raise FormatError(f"unknown dtype tag {dtype_tag} for block '{name}'")
    return name, arr.reshape(shape)


def load_model(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MODEL_MAGIC:
        raise FormatError(f"bad model magic {blob[:4]!r}")
    r = _Reader(blob)
    r.off = 4
    (
        version,
        block_size,
        n_stages,
        mh_stride,
        alpha,
        itp_flag,
        itp_amp,
        index_convention,
        norm_mean,
        norm_std,
        op_seed,
    ) = r.take(_HEADER)
    if version != _MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    if index_convention != _INDEX_CONVENTION:
        raise FormatError(f"unknown channel-selection convention {index_convention}")
    (cr_count,) = r.take("<I")
    cr_list_milli = tuple(r.take(f"<{cr_count}I"))
    (conv_count,) = r.take("<I")
    conv_spec = tuple(tuple(r.take("<II")) for _ in range(conv_count))
    (block_count,) = r.take("<I")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(block_count):
        name, arr = _read_block(r)
        blocks[name] = arr

    def tensor(name: str) -> Tensor:
        if name not in blocks:
            raise FormatError(f"model file lacks parameter block '{name}'")
        return Tensor(blocks.pop(name), requires_grad=True)

    if "sensing.rows" not in blocks:
        raise FormatError("model file lacks the sensing.rows block")
    op_rows = blocks.pop("sensing.rows")
    op_rows.setflags(write=False)

    stages = []
    for s in range(1, n_stages + 1):
        convs_pre = tuple(
            ConvLayerParams(
                kernel=tensor(f"stage{s}.conv_pre{i}.kernel"),
                bias=tensor(f"stage{s}.conv_pre{i}.bias"),
            )
            for i in range(1, conv_count + 1)
        )
        convs_res = tuple(
            ConvLayerParams(
                kernel=tensor(f"stage{s}.conv_res{i}.kernel"),
                bias=tensor(f"stage{s}.conv_res{i}.bias"),
            )
            for i in range(1, conv_count + 1)
        )
        stages.append(
            StageParams(
                block_size=block_size,
                fc_pre_w=tensor(f"stage{s}.fc_pre.weight"),
                fc_pre_b=tensor(f"stage{s}.fc_pre.bias"),
                convs_pre=convs_pre,
                mhme=MhmeParams(
                    weight=tensor(f"stage{s}.mh.weight"),
                    bias=tensor(f"stage{s}.mh.bias"),
                    m_pad=op_rows.shape[0],
                    block_size=block_size,
                    stride=mh_stride,
                ),
                fc_res_w=tensor(f"stage{s}.fc_res.weight"),
                fc_res_b=tensor(f"stage{s}.fc_res.bias"),
                convs_res=convs_res,
            )
        )
    itp = None
    if itp_flag:
        cr_min, cr_max = min(cr_list_milli), max(cr_list_milli)
        itp = ItpParams(
            kernel=tensor("itp.kernel"),
            amplification=itp_amp,
            cr_min_milli=cr_min,
            cr_max_milli=cr_max,
            cr_list_milli=cr_list_milli,
            m_max=measurement_count(cr_max, block_size),
        )
    if blocks:
        raise FormatError(f"model file holds unexpected blocks: {sorted(blocks)}")
    return ModelParams(
        block_size=block_size,
        stages=stages,
        itp=itp,
        cr_list_milli=cr_list_milli,
        conv_spec=conv_spec,
        mh_stride=mh_stride,
        alpha=alpha,
        norm_mean=norm_mean,
        norm_std=norm_std,
        op_rows=op_rows,
        op_seed=op_seed,
    )
