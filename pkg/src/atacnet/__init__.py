"""Weakly supervised anomaly detection with attention-guided cropping and deviation loss."""

from .config import ConfigError, RunConfig
from .data import CutMixConfig, DatasetManifest, Sample, SynthConfig, cutmix, generate_synthetic, load_dataset, sample_episode
from .evaluation import ScoredSample, auroc, export_heatmap, gradcam, score_histogram
from .loss import LossConfig, ReferenceDistribution, batch_loss, deviation, deviation_loss
from .model import AtacNet, AttentionConfig, BackboneConfig, ModelConfig, calibrate_mapper
from .scoring import (
    AtacOutput,
    AttentionMap,
    CropBox,
    CropPolicy,
    ScoringConfig,
    atac_forward,
    channel_mean_map,
    crop_and_resize,
    extract_crop_box,
    threshold_mask,
    topk_mean,
)
from .tensor import Tensor, grad_check, precision, strict
from .training import Schedule, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
