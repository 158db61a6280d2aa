"""Generator-defined views for test-time ensembling of image classifiers.

The pipeline projects each image into a style-based generator's latent
space, perturbs the recovered latent to synthesize nearby views, and blends
classifier logits over those views with the original prediction.  Modules:

- ``shapes``: procedural labeled dataset of flat geometric shapes
- ``generator``: style-latent generators (trainable toy GAN, linear oracle)
- ``projection``: alignment, encoder, and iterative latent optimization
- ``cache``: append-only binary store for projected latents
- ``perturb``: isotropic, principal-direction, and style-mixing view samplers
- ``ensemble``: weighted logit averaging, alpha selection, bootstrap errors
- ``classifier``: small conv net with view-based training and finetuning
- ``robustness``: gradient attacks, corruptions, projection-based defense
- ``cli``: stage-by-stage experiment driver with cached artifacts
"""

from .cache import CacheError, LatentCache
from .classifier import (
    ClassifierConfig,
    ClassifierHandle,
    LabeledImages,
    TrainDataError,
    TrainSource,
    finetune_on_views,
    train,
)
from .config import ConfigError, ExperimentConfig
from .container import ContainerError, read_container, write_container
from .ensemble import (
    EnsembleConfig,
    EvalReport,
    LogitsRecord,
    bootstrap_stderr,
    ensemble_logits,
    ensembled_accuracy,
    evaluate_split,
    mixed_crop_ensemble,
    select_alpha,
    select_alpha_2d,
    standard_accuracy,
)
from .generator import (
    GeneratorHandle,
    GeneratorSpec,
    GeneratorTrainingError,
    LinearOracleGenerator,
    ToyGeneratorConfig,
    ToyStyleGenerator,
    mean_w,
    sample_z,
    train_toy_generator,
)
from .latent import (
    BlockPartition,
    BlockRangeError,
    Granularity,
    StyleLatent,
    add_block_delta,
    default_partition,
    style_mix,
)
from .lbfgs import MinimizeResult, minimize_adam, minimize_lbfgs
from .metrics import DegenerateMaskError, MetricConfig, image_loss, masked_l1, perceptual_distance
from .perturb import (
    SIGMA_GRIDS,
    PCABasis,
    PerturbationSpec,
    fit_pca,
    generate_views,
    sample_isotropic,
    sample_pca,
    sample_stylemix,
    sample_views,
)
from .projection import (
    AlignmentTransform,
    Encoder,
    EncoderTrainConfig,
    ProjectionConfig,
    ProjectionResult,
    align_and_mask,
    project,
    project_batch,
    shift_image,
    train_encoder,
    write_projection_log,
)
from .robustness import (
    AttackConfig,
    attack,
    choose_epsilon,
    corrupt,
    defend_and_ensemble,
    fgsm,
    pgd,
)
from .seeds import derive_rng, derive_seed
from .shapes import (
    DatasetError,
    DatasetSpec,
    ShapeDataset,
    SplitData,
    generate_dataset,
    load_dataset,
    render_sample,
    save_dataset,
)

__version__ = "0.1.0"
