"""Guided-diffusion editing and analysis-by-synthesis anomaly detection."""

from .autodiff import (
    Graph,
    GraphBuilder,
    Tensor,
    as_tensor,
    finite_difference_check,
    forward_eval,
    vjp,
)
from .data import (
    ImageDataset,
    PointDataset,
    TextureParams,
    gen_gmm_dataset,
    gen_texture_dataset,
)
from .diffusion import (
    NoiseSchedule,
    ddim_step,
    ddim_timesteps,
    ddpm_reverse_step,
    estimate_x0,
    forward_diffuse,
    make_schedule,
)
from .gmm import (
    GmmDistribution,
    GmmScoreModel,
    gmm_exact_eps,
    gmm_log_marginal,
    gmm_mu0,
    gmm_posterior,
    gmm_score,
    gmm_vjp_mu0,
)
from .guidance import (
    EditResult,
    GuidanceConfig,
    SimilarityKernel,
    grad_log_rsim,
    guidance_forward_match,
    guidance_naive,
    guidance_reverse_match,
    guided_sample,
    guided_sample_batch,
    ideal_guidance_gmm,
    rsim,
)
from .metrics import LabeledScores, auc_pr, f1_star, from_map
from .mlp import MlpEpsModel, TrainConfig, train_mlp
from .pipeline import (
    AnomalyMap,
    FeatureExtractor,
    Segmentation,
    detect,
    extract_features,
    fit_patch_pca,
    pixel_distance,
    refine_with_segments,
    segment_image,
)

__version__ = "0.1.0"
