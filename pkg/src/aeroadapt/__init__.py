"""aeroadapt: domain translation for annotated synthetic aerial imagery.

Three label-preserving stages move rendered training images toward a real
target domain: global style transfer in diffusion latent space, mask-
restricted one-step local refinement, and embedding-prototype filtering of
hallucinated instances.  Quality is tracked with image/patch Fréchet
distance and detection mAP.
"""

from .annotations import (
    AnnotatedImage,
    AnnotationError,
    BBox,
    CropRegion,
    DatasetManifest,
    DegenerateBoxError,
    InstanceMask,
    crop_instance,
    masks_or_rasterized,
    paste_patch,
    rasterize_box_mask,
    round_half_up,
)
from .backbone import (
    AttentionProjections,
    BackboneAdapter,
    LatentTensor,
    NoiseSchedule,
    PromptCondition,
    ToyBackbone,
    Trajectory,
    UNCONDITIONAL,
    ddim_invert,
    ddim_step,
    timestep_grid,
)
from .compositor import BlendConfig, blend
from .formats import (
    FormatError,
    load_annotations,
    load_predictions,
    save_annotations,
    save_predictions,
)
from .halluc_filter import (
    EmbeddingModel,
    Eraser,
    FilterConfig,
    Prototype,
    RetentionPlan,
    build_prototype,
    cosine_scores,
    erase_instances,
    mean_real_embedding,
    objective_value,
    plan_retention,
    prototype,
    retention_probs,
    select_retained,
)
from .imageops import area_downsample, bicubic_upsample, block_any_pool
from .local_refine import (
    Captioner,
    RefineConfig,
    local_refine,
    masked_latent_merge,
    one_step_refine,
)
from .metrics import (
    Detection,
    FeatureExtractor,
    GaussianStats,
    MapResult,
    frechet_distance,
    gaussian_stats,
    image_fid,
    map_eval,
    patch_fid,
)
from .pipeline import (
    ConfigError,
    PipelineConfig,
    assemble_train_set,
    parse_config,
    run_pipeline,
)
from .style_transfer import (
    StyleTransferConfig,
    adain,
    choose_style,
    cross_attention_align,
    gst_reverse_step,
    gst_transfer,
)
from .toydata import (
    FixedTagCaptioner,
    PooledEmbedder,
    PooledFeatureExtractor,
    RingMeanEraser,
    make_toy_manifest,
    make_toy_pair,
)

__version__ = "0.1.0"
