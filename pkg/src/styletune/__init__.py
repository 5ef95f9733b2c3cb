"""styletune: style-bank guided prompt tuning for a miniature dual encoder."""

__version__ = "0.1.0"

from .tensor import (
    Tensor,
    concat,
    cosine_similarity,
    finite_difference_check,
    finite_difference_check_params,
    l2_normalize,
    load_tensor,
    matmul,
    moments,
    save_tensor,
    softmax,
)

__all__ = [
    "Tensor",
    "concat",
    "cosine_similarity",
    "finite_difference_check",
    "finite_difference_check_params",
    "l2_normalize",
    "load_tensor",
    "matmul",
    "moments",
    "save_tensor",
    "softmax",
    "__version__",
]
