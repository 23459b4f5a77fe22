"""
Activation Codec Engine
=======================
Single entry point for encoding and decoding with a calibrated profile.

Usage:
    from actcodec_core.engine import CodecEngine

    engine = CodecEngine(profile_path='profiles/chain.joblib')

    # Per layer output, at the memory boundary:
    stream = engine.encode(tensor, layer_id='conv1')
    restored = engine.decode(stream, layer_id='conv1')
"""

import logging

import numpy as np

from actcodec_core.codec import (
    CalibrationProfile,
    CompressedActivation,
    decode_layer,
    decode_symbols,
    encode_layer,
    measured_rate,
)
from actcodec_core.tensor import ActivationTensor

logger = logging.getLogger(__name__)


class CodecEngine:
    """
    Stateless encode/decode front end over one calibration profile.

    Parameters
    ----------
    profile : CalibrationProfile, optional
        An in-memory profile.
    profile_path : str, optional
        Path to a profile saved with ``CalibrationProfile.save``. Used when
        ``profile`` is not given.
    """

    def __init__(self, profile=None, profile_path=None):
        if profile is None:
            profile = CalibrationProfile.load(profile_path)
        self.profile = profile

    @property
    def layer_ids(self):
        return self.profile.layer_ids

    def encode(self, tensor: ActivationTensor, layer_id) -> CompressedActivation:
        """Compress one layer output with that layer's profile entry."""
        return encode_layer(tensor, self.profile.entry(layer_id))

    def decode(self, stream: CompressedActivation, layer_id=None, raw=False) -> ActivationTensor:
        """
        Reconstruct a tensor from a container.

        Parameters
        ----------
        stream : CompressedActivation
            Container produced by :meth:`encode` or loaded from disk.
        layer_id : str, optional
            Profile entry to decode against. Required unless the container
            embeds its transform.
        raw : bool
            Skip the layer's after-decoder ReLU, so the result re-encodes
            to the same stream.

        Returns
        -------
        ActivationTensor
        """
        entry = None if layer_id is None else self.profile.entry(layer_id)
        return decode_layer(stream, entry, raw=raw)

    def round_trip(self, tensor: ActivationTensor, layer_id, stream=None) -> dict:
        """
        Encode and decode ``tensor`` and summarise the result.

        Parameters
        ----------
        stream : CompressedActivation, optional
            Reuse an already encoded container instead of encoding again.

        Returns
        -------
        dict
            {
                "layer": str,
                "mse": float,             # mean squared reconstruction error
                "payload_bits": int,
                "header_bits": int,
                "rate": float,            # payload bits per value
                "rate_with_header": float
            }
        """
        if stream is None:
            stream = self.encode(tensor, layer_id)
        restored = self.decode(stream, layer_id)
        diff = restored.data.astype(np.float64) - tensor.data
        return {
            "layer": str(layer_id),
            "mse": float(np.mean(diff * diff)),
            "payload_bits": stream.payload_bits,
            "header_bits": stream.header_bits,
            "rate": measured_rate(stream),
            "rate_with_header": measured_rate(stream, include_header=True),
        }

    def symbols(self, stream: CompressedActivation):
        """Bin indices carried by ``stream``, one row per block."""
        return decode_symbols(stream)
