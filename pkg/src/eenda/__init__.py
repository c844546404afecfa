"""Multi-domain end-to-end neural speaker diarization with per-domain
adapters and an auxiliary domain classification head."""

from .datagen import (
    DomainSpec,
    FeatureConfig,
    FrameFeatures,
    Mixture,
    SpeakerActivityMatrix,
    crop_sample,
    extract_logmel,
    frames_to_labels,
    generate_corpus,
    simulate_mixture,
)
from .encoder import Adapter, ConformerEncoder, EncoderConfig, EncoderOutput
from .eda import AttractorSet, EncoderDecoderAttractor, detach_for_eda
from .inference import DiarizationResult, InferenceConfig, diarize, predict_domain
from .losses import (
    DomainHead,
    LossWeights,
    attractor_existence_loss,
    combined_loss,
    domain_classification_loss,
    frame_speaker_posteriors,
    pit_diarization_loss,
)
from .model import DiarizationModel, ModelConfig, load_checkpoint, save_checkpoint
from .scoring import DerBreakdown, RttmSegment, compute_der, evaluation_grid, parse_rttm, write_rttm
from .training import TrainConfig, TrainSample, average_checkpoints, noam_lr, select_best, train

__version__ = "0.1.0"
