"""Chaotic-sequence watermarking for dense neural network weights."""

from .chaos import (
    CHAOTIC_R_MAX,
    CHAOTIC_R_MIN,
    ChaoticParams,
    InvalidParamsError,
    generate_batch,
    generate_chaotic_sequence,
    validate_params,
)
from .ga_verify import (
    DEFAULT_TOLERANCES,
    FitnessWeights,
    GAConfig,
    Individual,
    VerificationReport,
    blend_crossover,
    correlation_distance,
    decide_ownership,
    fitness,
    lhs_init,
    mse,
    mutate,
    run_ga,
    tournament_select,
)
from .tensor_store import (
    ModelWeights,
    WatermarkManifest,
    WeightTensor,
    flatten_layer,
    load_manifest,
    load_weights,
    save_manifest,
    save_weights,
    unflatten_layer,
)
from .watermark import (
    DeltaSequence,
    DensityData,
    density_histogram,
    density_l1,
    embed,
    extract,
)

__version__ = "0.1.0"
