from .detector import (CENTER_RANGE, SYOLO, TOY_CONFIG, HeadOutput, ModelConfig, decode_boxes,
                       decode_predictions, to_tensor)
from .loss import Target, assign, detection_loss
from .neck import SPAFPN, spafpn_forward
from .ssm import SSMAttention, ssm_attention
from .train import NonFiniteLossError, Trainer, load_checkpoint, load_model

__all__ = [
    "CENTER_RANGE", "SYOLO", "TOY_CONFIG", "HeadOutput", "ModelConfig", "decode_boxes",
    "decode_predictions", "to_tensor", "Target", "assign", "detection_loss", "SPAFPN",
    "spafpn_forward", "SSMAttention", "ssm_attention", "NonFiniteLossError", "Trainer",
    "load_checkpoint", "load_model",
]
