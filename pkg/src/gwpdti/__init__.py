"""DTI field interpolation with generalized Wishart processes."""

__version__ = "0.1.0"

from .estimators import (  # noqa: E402
    GWPInterpolator,
    LinearInterpolator,
    LogEuclideanInterpolator,
    make_interpolator,
)
from .field import TensorGrid, downsample_by_two, read_field, write_field  # noqa: E402

__all__ = [
    "GWPInterpolator",
    "LinearInterpolator",
    "LogEuclideanInterpolator",
    "TensorGrid",
    "__version__",
    "downsample_by_two",
    "make_interpolator",
    "read_field",
    "write_field",
]
