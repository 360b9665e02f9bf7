"""Block-based video compressive sensing with an unfolded learned decoder."""

from .diffcore import Adam, Tensor, set_default_dtype
from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    GeometryError,
    KernelError,
    OptimizerError,
    ParseError,
    ShapeError,
    UnsupportedRateError,
    VidcsError,
)
from .mhme import HypothesisSet, MhmeParams, ReferenceBuffer, extract_hypotheses, mh_predict, predict_weights, tikhonov_solve
from .metrics import psnr, ssim
from .model_io import load_model, save_model
from .sensing import (
    FramePlane,
    MeasurementGrid,
    MeasurementOperator,
    OperatorView,
    load_measurements,
    load_operator,
    make_operator,
    sample_block,
    sample_frame,
    save_measurements,
    save_operator,
)
from .train import TrainConfig, TrainSample, loss, make_synthetic_dataset, sample_cr, train_loop
from .unfold import (
    ItpParams,
    ModelParams,
    StageParams,
    build_model,
    decode_sequence,
    fuse,
    itp_interpolate,
    preliminary_reconstruct,
    reconstruct_frame,
    residual_correct,
    run_stage,
    select_channels,
)

__version__ = "0.1.0"
