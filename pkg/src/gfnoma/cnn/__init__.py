from .estimator import (CnnActivityDetector, Dataset, TrainConfig, TrainingDivergedError,
                        hypothesis_test, input_to_tensor, tensor_to_input, train)
from .network import (AdamState, CnnParameters, adam_step, backward, bce_loss, bce_with_logits,
                      default_architecture, forward, forward_logits, init_parameters,
                      zero_parameters)

__all__ = [
    "AdamState", "CnnActivityDetector", "CnnParameters", "Dataset", "TrainConfig",
    "TrainingDivergedError", "adam_step", "backward", "bce_loss", "bce_with_logits",
    "default_architecture", "forward", "forward_logits", "hypothesis_test", "init_parameters",
    "input_to_tensor", "tensor_to_input", "train", "zero_parameters",
]
