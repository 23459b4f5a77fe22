"""
Activation Codec Core
=====================
Transform-domain compression of layer activations: KLT, uniform
quantization and canonical Huffman coding, plus rate-distortion tooling.

Modules:
    tensor   — ActivationTensor, block partitioning, ATCT tensor files
    stats    — covariance accumulation, Jacobi eigensolver, KLTransform
    quant    — uniform quantizer, step/rate laws, rate allocation
    vlc      — histograms, canonical Huffman codebooks, bit-exact coding
    codec    — calibration, encode/decode, ATCS container, conv/BN/KLT folding
    engine   — CodecEngine: profile-holding encode/decode front end
    harness  — synthetic sources, layer chains, sweeps and studies, reports
    cli      — command-line front end
"""

from actcodec_core.codec import CalibrationProfile, CompressedActivation, LayerCodecConfig, calibrate
from actcodec_core.engine import CodecEngine
from actcodec_core.tensor import ActivationTensor, BlockShape

__all__ = [
    "ActivationTensor",
    "BlockShape",
    "CalibrationProfile",
    "CodecEngine",
    "CompressedActivation",
    "LayerCodecConfig",
    "calibrate",
]
