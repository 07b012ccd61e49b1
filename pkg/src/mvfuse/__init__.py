"""Multiview 2D->3D semantic label fusion toolkit."""

__version__ = "0.1.0"

from .scene import (  # noqa: F401
    SENTINEL,
    Category,
    ClassTaxonomy,
    CameraFrame,
    LabelImage,
    LidarPoint,
    PointCloud,
    SceneBundle,
    Surfel,
    SurfelArray,
    validate_scene,
)
from .scene_io import (  # noqa: F401
    DataFormatError,
    FusionConfig,
    default_config,
    read_scene,
    write_scene,
)
from .geometry import (  # noqa: F401
    RadiusAttempt,
    SpatialIndex,
    SurfelEstimationParams,
    build_spatial_index,
    estimate_all_surfels,
    estimate_surfel,
    estimate_surfel_trace,
)
from .camera import (  # noqa: F401
    Projection,
    frustum_select,
    is_backfacing,
    project,
    project_points,
)
from .render import (  # noqa: F401
    DepthImage,
    new_depth_image,
    rasterize_surfel,
    render_depth_image,
)
from .fusion import (  # noqa: F401
    Correspondence,
    CorrespondenceSet,
    FusionParams,
    PointLabeling,
    Provenance,
    feature_defaults,
    fill_unlabeled,
    find_correspondences,
    fuse,
    supervision_defaults,
    tally_votes,
    vote_weight,
)
from .supervision import (  # noqa: F401
    TrainingRecord,
    TrainingRecordSet,
    coupling_audit,
    generate_training_records,
    read_records,
    write_records,
)
from .sampling import (  # noqa: F401
    ClassVector,
    SamplingParams,
    SelectionResult,
    compute_class_vector,
    greedy_select,
    objective,
    prefilter_rare,
)
from .evaluation import (  # noqa: F401
    ConfusionMatrix,
    EvalReport,
    accumulate,
    category_counts,
    format_report,
    included_categories,
    iou_per_category,
    summarize,
)
from .synth import (  # noqa: F401
    SCENARIOS,
    SynthConfig,
    SynthScene,
    generate,
    scenario_report,
)
