from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .decoders import MlpDecoder, ScoreDecoder, modality_index, sinusoidal_embedding
from .encoders import MlpEncoder, PoseTransformerEncoder
from .layers import LayerNorm, Linear, MlpBlockStack, Module, MultiHeadSelfAttention, ResidualBlock, TransformerLayer
from .optim import AdamState, adam_step
from .trimodal import Batch, ModelConfig, TriModalModel, bbox_features, make_batch

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "MlpDecoder", "ScoreDecoder", "modality_index", "sinusoidal_embedding",
    "MlpEncoder", "PoseTransformerEncoder",
    "LayerNorm", "Linear", "MlpBlockStack", "Module", "MultiHeadSelfAttention", "ResidualBlock", "TransformerLayer",
    "AdamState", "adam_step",
    "Batch", "ModelConfig", "TriModalModel", "bbox_features", "make_batch",
]
