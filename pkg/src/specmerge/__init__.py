"""Data-free model merging over a portable tensor interchange format.

Merging happens on task vectors (fine-tuned minus pretrained weights).  The
flagship method truncates each weight matrix in its own spectral space at a
cumulative singular-value-mass threshold, rescales the surviving singular
values to restore the matrix nuclear norm, reconstructs, and averages.
Element-wise baselines (plain averaging, scaled-sum arithmetic, trim-and-
elect-sign, random drop-and-rescale) share the same pipeline.
"""

from .errors import (
    DegenerateSpectrumError,
    FormatError,
    NumericalError,
    ShapeError,
    TruncatedDataError,
    ValidationError,
)
from .harness import (
    EvalReport,
    RankProfile,
    SynthSpec,
    TaskScore,
    evaluate,
    generate_synth_task_vectors,
    normalized_average,
    pretrained_baseline,
    rank_profile,
    read_scores_csv,
    recovery_experiment,
)
from .merge import (
    METHODS,
    MergeConfig,
    MergeResult,
    dare_sparsify,
    merge,
    merge_task_vectors,
    prepare_task_vectors,
    simple_average,
    star_merge,
    task_arithmetic,
    ties_merge,
)
from .spectral import (
    ConflictBoundReport,
    SpectralDecomposition,
    conflict_bound,
    nuclear_norm,
    numerical_rank,
    rank_keep,
    rescale_singular_values,
    svd,
    truncate_reconstruct,
)
from .tensorstore import (
    LoraFactorPair,
    TaskVector,
    TensorMap,
    TensorMeta,
    apply_delta,
    compute_task_vector,
    load_checkpoint,
    load_lora_adapter,
    lora_to_task_vector,
    materialize_lora,
    save_checkpoint,
    save_lora_adapter,
)

__version__ = "0.1.0"
