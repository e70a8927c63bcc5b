"""Dense prediction with rectified flow at toy scale: depth, normals and matting."""

import os as _os

# E2P_THREADS caps BLAS/OpenMP worker threads; must be set before numpy loads.
if _os.environ.get("E2P_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["E2P_THREADS"])

from .encoding import DepthEncoding, PointPrompt, depth_decode, depth_encode  # noqa: E402
from .flow import NoiseSchedule, PyramidNoise, euler_sample, multires_noise  # noqa: E402
from .losses import LossReport, adaptive_lambda, angular_loss, ssi_l1_depth  # noqa: E402
from .metrics import EvalResult, avg_rank  # noqa: E402
from .quant import Mapping, QuantReport, analytic_error, bf16_round  # noqa: E402
from .tensorio import DenseMap, SeededRng, Task, read_dtf, write_dtf  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "DenseMap", "DepthEncoding", "EvalResult", "LossReport", "Mapping", "NoiseSchedule", "PointPrompt",
    "PyramidNoise", "QuantReport", "SeededRng", "Task", "adaptive_lambda", "analytic_error", "angular_loss",
    "avg_rank", "bf16_round", "depth_decode", "depth_encode", "euler_sample", "multires_noise", "read_dtf",
    "ssi_l1_depth", "write_dtf",
]
