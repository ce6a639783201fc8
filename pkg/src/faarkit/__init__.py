"""NVFP4 quantization with learnable format-aware rounding."""

from .codec import (
    NODE_MAX,
    NODES,
    QuantizedTensor,
    ScaleSet,
    compute_scales,
    dequantize,
    e2m1_decode,
    e4m3_round,
    find_interval,
    quantize_rtn,
)
from .config import (
    ConfigError,
    RunConfig,
    config_from_dict,
    load_config,
    resolved_dict,
    resolved_json,
)
from .optim import Adam, DivergenceError
from .oracles import (
    RoundingReport,
    brute_force_optimal,
    compare_rounding_study,
    stochastic_round_sample,
)
from .rounding import (
    BetaSchedule,
    RoundingVars,
    beta_at,
    clip_vars,
    harden,
    harden_to_quantized,
    init_rounding_vars,
    round_reg_loss,
    soft_quantize,
    soft_round,
)
from .stage1 import (
    CalibBatch,
    LinearLayer,
    Stage1Config,
    make_calib_batch,
    optimize_layer,
    quantize_activations,
    reconstruction_mse,
    stage1_grad,
    stage1_loss,
)
from .stage2 import (
    MicroNet,
    Stage2Config,
    align_model,
    backprop_stage2,
    forward,
    hardened_forward,
    kl_loss,
    make_micronet,
    stage2_loss,
)
from .tensorio import (
    FormatError,
    load_named_tensor,
    load_rounding_vars,
    load_tensor,
    pack_nvfp4,
    save_rounding_vars,
    save_tensor,
    unpack_nvfp4,
)

__version__ = "0.1.0"
