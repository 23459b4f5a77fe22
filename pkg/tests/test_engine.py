"""
Test: CodecEngine encode / decode at a layer boundary
=====================================================
Scenario: a profile with two layers is saved to disk and reopened by the
engine. One activation goes through encode and decode for each layer.

Expected behaviour:
- round_trip reports MSE, payload and header bits, and both rates
- streams that embed their transform decode without naming the layer
- external streams need a layer id; unknown ids are rejected
"""

import numpy as np
import pytest

from actcodec_core import CalibrationProfile, CodecEngine, LayerCodecConfig, calibrate
from actcodec_core.errors import ValidationError


@pytest.fixture
def engine(tmp_path, small_tensors):
    profile = calibrate(
        [small_tensors, small_tensors],
        [
            LayerCodecConfig("1x1x8", step=0.05, relu_placement="none"),
            LayerCodecConfig("1x1x8", step=0.05, relu_placement="none", embed_transform=True),
        ],
        layer_ids=["conv1", "conv2"],
    )
    path = tmp_path / "profile.joblib"
    profile.save(path)
    return CodecEngine(profile_path=path)


def test_engine_loads_profile(engine):
    assert engine.layer_ids == ["conv1", "conv2"]
    assert isinstance(engine.profile, CalibrationProfile)


def test_round_trip_summary(engine, small_tensors):
    summary = engine.round_trip(small_tensors[0], "conv1")
    assert set(summary) == {"layer", "mse", "payload_bits", "header_bits", "rate", "rate_with_header"}
    assert summary["layer"] == "conv1"
    assert summary["mse"] < 0.05 ** 2
    assert summary["rate"] == summary["payload_bits"] / small_tensors[0].size
    assert summary["rate_with_header"] > summary["rate"]


def test_round_trip_reuses_stream(engine, small_tensors):
    stream = engine.encode(small_tensors[0], "conv1")
    assert engine.round_trip(small_tensors[0], "conv1", stream)["payload_bits"] == stream.payload_bits


def test_embedded_stream_decodes_without_layer(engine, small_tensors):
    stream = engine.encode(small_tensors[0], "conv2")
    assert engine.decode(stream) == engine.decode(stream, "conv2")


def test_external_stream_needs_layer(engine, small_tensors):
    stream = engine.encode(small_tensors[0], "conv1")
    with pytest.raises(ValidationError):
        engine.decode(stream)
    with pytest.raises(ValidationError):
        engine.encode(small_tensors[0], "conv9")


def test_symbols(engine, small_tensors):
    symbols = engine.symbols(engine.encode(small_tensors[0], "conv1"))
    assert symbols.shape == (30, 8)
    assert np.issubdtype(symbols.dtype, np.integer)
