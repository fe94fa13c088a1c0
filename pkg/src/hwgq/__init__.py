"""Half-wave Gaussian quantized networks: quantizer design, binary-weight
layers, bit-packed kernels, a numpy trainer and a command-line front end."""

from .quantizer import QuantizerSpec, design, quantize
from .tensor import Rng

__all__ = ["QuantizerSpec", "Rng", "design", "quantize"]
__version__ = "0.1.0"
