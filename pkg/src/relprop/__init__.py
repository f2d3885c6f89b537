"""relprop: fold batch normalization into linear layers and explain
classifier decisions with backward relevance propagation heat-maps."""

from .errors import (
    DimensionError,
    GeometryError,
    InvalidValueError,
    ParseError,
    PolicyError,
    PreconditionError,
    RelpropError,
    SchemaError,
    UnsupportedFusionError,
)
from .tensor import (
    BnParams,
    Tensor,
    as_tensor,
    avgpool,
    batchnorm_forward,
    conv2d_forward,
    conv_output_extent,
    dense_forward,
    flatten,
    maxpool,
    relu,
)
from .model import (
    AvgPool,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    ForwardResult,
    Layer,
    MaxPool,
    Network,
    PLACEMENT_AFTER,
    PLACEMENT_BEFORE,
    ReLU,
    forward,
    layer_kind,
    load_model,
    normalize_pixels,
    propagate_shapes,
    save_model,
)
from .fusion import (
    FusionRecord,
    FusionReport,
    POLICY_BYPASS,
    POLICY_FUSE,
    POLICY_LOWER,
    expand_bn_per_element,
    fuse_bn_conv_post,
    fuse_bn_conv_pre,
    fuse_bn_dense_post,
    fuse_bn_dense_pre,
    fuse_network,
    lower_conv_to_dense,
)
from .lrp import (
    BIAS_ABSORB,
    BIAS_REQUIRE_NONPOSITIVE,
    LrpConfig,
    POOL_PROPORTIONAL,
    POOL_WINNER,
    RelevanceTrace,
    explain,
    lrp_avgpool,
    lrp_conv_zB,
    lrp_conv_zplus,
    lrp_dense_zB,
    lrp_dense_zplus,
    lrp_maxpool,
)
from .heatmap import (
    Heatmap,
    load_image,
    read_csv,
    read_pnm,
    render_heatmap,
    write_csv,
    write_ppm,
)
from .verify import run_verification

__version__ = "0.1.0"
