"""Prior-guided point cloud geometry codec, desk scale.

A compact posed-body prior plus a sparse multiscale feature autoencoder:
the encoder ships the prior parameters, the losslessly coded downscaled
coordinates, and an entropy-coded feature residual; the decoder rebuilds
the prior cloud, warps its features onto the coded coordinates, and
upsamples back to full resolution guided by the transmitted counts.
"""

from . import autodiff
from .autodiff import ADJOINT_CHECKS, Var, backward, finite_difference_check
from .checksum import crc32c
from .codec import (
    CodecConfig,
    StreamReport,
    bitstream_report,
    decode,
    encode,
    parse_header,
    prior_aligned_cloud,
)
from .entropy import (
    CdfTable,
    FactorizedModel,
    build_cdf_tables,
    decode_coords,
    decode_features,
    encode_coords,
    encode_features,
    init_factorized_params,
    quantize_features,
)
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DecodeError,
    DegenerateInputError,
    EvaluationError,
    ParameterRangeError,
    ParseError,
    PgpcError,
)
from .fitting import FitConfig, chamfer_distance, fit_params
from .geometry import (
    Mesh,
    PointCloud,
    read_ply,
    sample_surface_poisson,
    sample_surface_uniform,
    voxelize,
    write_ply,
)
from .metrics import (
    RDPoint,
    bd_psnr,
    bd_rate,
    d1_mse,
    d2_mse,
    estimate_normals,
    psnr,
    symmetric_psnr,
)
from .network import (
    CandidateScores,
    NetworkConfig,
    NetworkWeights,
    ScaleStack,
    extract_features,
    init_weights,
    load_weights,
    propagate,
    save_weights,
    warp_features,
)
from .prior import (
    PriorParams,
    QuantizedParams,
    decode_params,
    dequantize_params,
    encode_params,
    pose_mesh,
    quantize_params,
    read_params_text,
    skin,
    write_params_text,
)
from .rangecoder import AdaptiveBitModel, RangeDecoder, RangeEncoder
from .sparse import ConvKernel, SparseTensor, pack_coords, sparse_conv, transposed_conv
from .template import TemplateModel, build_toy_template, load_template, save_template
from .training import (
    Adam,
    LossBreakdown,
    ToySample,
    TrainConfig,
    bce_multiscale,
    make_toy_dataset,
    rate_term,
    train,
    train_one,
)

__version__ = "0.1.0"
