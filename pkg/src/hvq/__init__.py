"""Hessian-guided vector quantization of weight matrices into (d, n, k) codebook/index form."""

from .bitformat import BitReport, bits_per_weight, dequantize, deserialize, serialize
from .errors import CorruptionError, FormatError, HVQError, NumericalError, ValidationError
from .hessian import HessianState, accumulate_hessian, eliminate_group, finalize, group_metric
from .layer import QuantConfig, QuantizedLayer
from .quantizer import proxy_loss, quantize_matrix, residual_lowrank, rtn_baseline
from .tensorio import ingest_calibration, load_matrix, store_matrix

__version__ = "0.1.0"
