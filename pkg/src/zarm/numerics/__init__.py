"""Small dense-tensor engine with reverse-mode differentiation."""
from . import ops
from .gradcheck import DeterminismError, GradCheckReport, TensorReport, grad_check, relative_error
from .ops import dense, inject_fault, softmax
from .params import ParamStore
from .tensor import (
    ContractError,
    DimensionError,
    EmptySupportError,
    NumericalError,
    Tape,
    Tensor,
    as_tensor,
    no_record,
)


def backward(tape: Tape, loss: Tensor, sink=None):
    """Accumulate d(loss)/d(leaf) into every trainable leaf recorded on ``tape``."""
    return tape.backward(loss, sink=sink)


__all__ = [
    "ContractError", "DeterminismError", "DimensionError", "EmptySupportError",
    "GradCheckReport", "NumericalError", "ParamStore", "Tape", "Tensor", "TensorReport",
    "as_tensor", "backward", "dense", "grad_check", "inject_fault", "no_record", "ops",
    "relative_error", "softmax",
]
