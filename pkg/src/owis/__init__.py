"""Open-world 3D instance segmentation at desk scale.

A small query-based voxel segmenter plus the open-world machinery around
it: unknown pseudo-labeling, prototype contrastive clustering,
reachability-based probability correction, exemplar-replay incremental
learning, and the full open-set evaluation protocol with split generation.
"""

from .autolabel import AutoLabelConfig, objectness_score, select_pseudo_labels
from .errors import (
    ConfigError,
    NumericError,
    ParseError,
    StateError,
    ValidationError,
)
from .estimator import OpenWorldSegmenter
from .matching import assign_targets, assignment_cost, hungarian
from .metrics import (
    Detection,
    EvalConfig,
    EvalReport,
    a_ose,
    average_precision,
    evaluate,
    match_predictions,
    u_recall,
    wilderness_impact,
)
from .model import (
    ModelParams,
    Prediction,
    TrainConfig,
    detect_scene,
    forward,
    init_params,
    train_task,
    training_loss,
)
from .prototypes import (
    PCCalibration,
    PrototypeBank,
    QueryStore,
    calibrate_pc,
    contrastive_loss,
    correct_probabilities,
    reachability,
    store_labeled_queries,
    update_prototypes,
)
from .scene import (
    ClassCatalog,
    IGNORE_LABEL,
    Instance,
    Scene,
    UNKNOWN_LABEL,
    binarize,
    mask_iou,
    read_scene,
    write_scene,
)
from .splits import (
    SceneTypeMatrix,
    TaskSplit,
    load_bundled,
    scannet200_catalog,
    scene_type_similarity,
    split_frequency,
    split_random,
    split_region,
)
from .synth import GenConfig, generate
from .tasks import (
    ReplayConfig,
    TaskState,
    advance_task,
    relabel_for_eval,
    relabel_for_training,
    select_exemplars,
)

__version__ = "0.1.0"
