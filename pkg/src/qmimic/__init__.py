"""Quantized feature-map mimicking for small detection CNNs, in plain numpy."""

from .mimic import MimicConfig, joint_loss, matching_ratio, mimic_loss
from .nets import BackboneConfig, Detector, RoI
from .quantize import QuantizationScheme, make_pow2, make_uniform, quantize, quantized_relu

__version__ = "0.1.0"
