"""jointadv: universal adversarial perturbations that also fool interpreters.

Trains noise-to-perturbation generators whose output changes a classifier's
predictions while leaving its attribution maps (CAM, GradCAM, RTS) visually
unchanged, and ships the classifiers, interpreters, baselines, and metrics
needed to study the attack end to end at desk scale.
"""

from .attacks import (
    AttackConfig,
    AttackRunRecord,
    baseline_iterative_uap,
    baseline_pgd,
    classifier_loss,
    interpreter_loss,
    joint_loss,
    rts_encoder_loss,
    train_jap_per_image,
    train_juap,
)
from .classifiers import (
    TrainConfig,
    build_classifier,
    capture_activations,
    load_checkpoint,
    predict,
    save_checkpoint,
    set_activation_mode,
    smoothed_relu,
    smoothed_relu_gate,
    train_classifier,
)
from .data import AugmentConfig, DataError, DatasetManifest, ImageBatch, Split, augment, load_dataset
from .evaluation import (
    EvalReport,
    detection_gap_experiment,
    evaluate_attack,
    fooling_ratio,
    iou_score,
    l1_discrepancy,
    render_attribution_grid,
)
from .generators import (
    Perturbation,
    apply_perturbation,
    build_generator,
    default_zeta,
    generate_perturbation,
    sample_noise,
)
from .interpreters import (
    AttributionMap,
    RTSModel,
    RTSTrainConfig,
    binarize,
    cam_attribution,
    compute_attribution,
    gradcam_attribution,
    rts_attribution,
    train_rts,
)
from .synthetic import generate_shapes_dataset

__version__ = "0.1.0"
