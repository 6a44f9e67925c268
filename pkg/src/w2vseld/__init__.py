"""Self-supervised sound event localization and detection on first-order Ambisonics."""

from .ambisonics import (AmbisonicClip, RotationTransform, SceneEvent, SyntheticSceneSpec, apply_rotation,
                         encode_direction, encode_foa, read_wav, resample, rotation_table, standardize,
                         synthesize_scene, write_wav)
from .annotation import SeldAnnotation
from .dataset import FrameTargets, SegmentWindow, emit_csv, parse_csv, rasterize, window_iter
from .errors import ConfigError, DataError, NumericalError
from .finetune import FinetuneConfig, SeldModel, finetune_loop, postprocess, predict_clip, seld_loss
from .metrics import MetricsReport, angular_distance, doa_metrics, sed_metrics, seld_score
from .model import ModelConfig, W2vSeld, conv_output_length, span_mask
from .pretrain import PretrainConfig, contrastive_loss, diversity_loss, lr_schedule, pretrain_loop

__version__ = "0.1.0"
