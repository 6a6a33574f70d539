from .engine import forward
from .ops import ShapeError, softmax_cross_entropy
from .optim import NonFiniteGradient, OptimizerState, sgd_step
from .tape import Tape, TapeError, TapeNode, backward

__all__ = [
    "forward", "backward", "Tape", "TapeNode", "TapeError", "ShapeError",
    "softmax_cross_entropy", "OptimizerState", "sgd_step", "NonFiniteGradient",
]
