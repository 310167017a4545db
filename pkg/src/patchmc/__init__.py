"""patchmc: MCMC-guided, prior-driven, patch-based 3D volume segmentation."""

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    AffineTransform,
    Geometry,
    MaskVolume,
    Volume,
    read_mask,
    read_volume,
    resample,
    write_volume,
)
from .registration import (  # noqa: F401
    RegistrationConfig,
    RegistrationResult,
    compose,
    dissimilarity,
    invert,
    register_affine,
)
from .prior import (  # noqa: F401
    PriorMap,
    build_prior,
    dilate,
    make_sampling_target,
    threshold_prior,
)
from .mcmc import (  # noqa: F401
    ChainConfig,
    SampleSet,
    SamplingTarget,
    acceptance_prob,
    run_chain,
    run_chains,
)
from .patches import (  # noqa: F401
    Patch,
    PatchDataset,
    build_training_set,
    extract_patch,
)
from .classifier import (  # noqa: F401
    BaselineModel,
    PatchPrediction,
    TrainConfig,
    plugin_session,
    predict,
    train_baseline,
)
from .fusion import (  # noqa: F401
    SegmentResult,
    VoteState,
    accumulate,
    finalize,
    segment,
)
from .metrics import (  # noqa: F401
    Confusion,
    RocCurve,
    Scores,
    confusion,
    hausdorff_mm,
    roc_sweep,
    scores,
)
from .phantom import make_phantom  # noqa: F401
from .pipeline import PipelineConfig, run_pipeline  # noqa: F401
