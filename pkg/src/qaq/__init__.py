"""Quality-adaptive quantization of transformer KV caches.

Per-token bit widths are derived from attention statistics, outliers are kept
in a full-precision sidecar, and an attention window guards against tokens
whose importance changes abruptly.
"""

from qaq.allocator import QuantConfig, QueryCalibration, allocate_bits, calibrate_query_norm
from qaq.attention import AttentionOutput, attention_forward, softmax, softmax_jacobian
from qaq.engine import CacheStats, KVCacheEngine, StepResult
from qaq.outliers import OutlierSet, extract_outliers, merge_outliers
from qaq.quantizer import QuantizedToken, dequantize, quantize_token, uniform_quantize
from qaq.window import ScoreWindow

__version__ = "0.1.0"

__all__ = [
    "AttentionOutput",
    "CacheStats",
    "KVCacheEngine",
    "OutlierSet",
    "QuantConfig",
    "QuantizedToken",
    "QueryCalibration",
    "ScoreWindow",
    "StepResult",
    "allocate_bits",
    "attention_forward",
    "calibrate_query_norm",
    "dequantize",
    "extract_outliers",
    "merge_outliers",
    "quantize_token",
    "softmax",
    "softmax_jacobian",
    "uniform_quantize",
]
