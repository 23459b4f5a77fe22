"""
Experiment harness: sources, the conv/BN/ReLU chain, sweeps, studies and
report files.
"""

import json
import math

import numpy as np
import pandas as pd
import pytest

from actcodec_core.codec import ConvParams, LayerCodecConfig, build_entry, calibrate
from actcodec_core.errors import ValidationError
from actcodec_core.harness import (
    REPORT_COLUMNS,
    LayerChainSpec,
    RateDistortionPoint,
    SeparableSource,
    SyntheticSource,
    _philox,
    ablation_study,
    apply_mode,
    block_shape_study,
    calibrate_chain,
    coding_gain,
    conv2d,
    emit_report,
    energy_ratio_report,
    measure_layer,
    rd_sweep,
    rd_sweep_chain,
    read_report,
    reference_chain,
    run_chain,
    standard_normal,
    step_grid,
    synthetic_inputs,
    tree_balance_study,
    truncation_study,
    write_frame,
)
from actcodec_core.tensor import ActivationTensor, save_tensor

CHAIN = {
    "input_dims": [6, 6, 3],
    "seed": 5,
    "source": {"rho": 0.5},
    "layers": [
        {"name": "conv1", "in_channels": 3, "out_channels": 4, "kernel": 3},
        {"name": "conv2", "in_channels": 4, "out_channels": 4, "kernel": 1, "codec": {"step": 0.05}},
    ],
}


@pytest.fixture
def chain():
    return LayerChainSpec.from_dict(CHAIN)


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------

def test_standard_normal_is_seeded():
    a = standard_normal(_philox(3), 101)
    b = standard_normal(_philox(3), 101)
    assert a.shape == (101,)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, standard_normal(_philox(4), 101))


def test_standard_normal_moments():
    z = standard_normal(_philox(0), 200_000)
    assert abs(z.mean()) < 0.01
    assert z.var() == pytest.approx(1.0, abs=0.01)
    assert np.isfinite(z).all()


def test_synthetic_source_covariance():
    source = SyntheticSource.equicorrelated(4, 0.5, seed=1)
    x = source.generate(20000)
    np.testing.assert_allclose(np.cov(x, rowvar=False), source.cov, atol=0.05)


def test_source_streams_and_spawn():
    a = SyntheticSource.identity(3, seed=9)
    b = SyntheticSource.identity(3, seed=9)
    np.testing.assert_array_equal(a.generate(5), b.generate(5))
    # the stream advances
    assert not np.array_equal(a.generate(5), SyntheticSource.identity(3, seed=9).generate(5))
    fresh = SyntheticSource.identity(3, seed=9).generate(5)
    np.testing.assert_array_equal(a.spawn(0).generate(5), fresh)
    assert not np.array_equal(a.spawn(1).generate(5), fresh)


def test_from_spectrum_has_requested_eigenvalues():
    spectrum = np.array([5.0, 2.0, 1.0, 0.5])
    source = SyntheticSource.from_spectrum(spectrum, seed=2)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(source.cov))[::-1], spectrum, atol=1e-10)


def test_rank_one_source_is_sampled():
    source = SyntheticSource.rank_one([1.0, 2.0, -1.0], seed=0)
    x = source.generate(50)
    # every sample lies on the span of the vector
    residual = x - np.outer(x @ [1.0, 2.0, -1.0] / 6.0, [1.0, 2.0, -1.0])
    assert np.abs(residual).max() < 1e-4


def test_source_errors():
    with pytest.raises(ValidationError):
        SyntheticSource(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValidationError):
        SyntheticSource(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValidationError):
        SyntheticSource.equicorrelated(4, -0.5)
    with pytest.raises(ValidationError):
        SyntheticSource(np.eye(2), mean=np.zeros(3))


def test_source_tensors_have_source_channels():
    tensors = SyntheticSource.identity(5, seed=1).tensors(3, 4, 2)
    assert len(tensors) == 3
    assert all(t.dims == (4, 2, 5) for t in tensors)


def test_separable_source_channel_correlation():
    tensors = SeparableSource(4, channel_rho=0.8, seed=1).tensors(4, 16, 16)
    x = np.concatenate([t.data.reshape(-1, 4) for t in tensors]).astype(np.float64)
    corr = np.corrcoef(x, rowvar=False)
    assert corr[~np.eye(4, dtype=bool)].mean() == pytest.approx(0.8, abs=0.05)


def test_separable_source_spatial_correlation():
    tensors = SeparableSource(8, spatial_rho=0.8, seed=2).tensors(4, 16, 16)
    data = np.stack([t.data for t in tensors]).astype(np.float64)
    left, right = data[:, :, :-1, :].reshape(-1), data[:, :, 1:, :].reshape(-1)
    assert np.corrcoef(left, right)[0, 1] == pytest.approx(0.8, abs=0.05)
    channels = data.reshape(-1, 8)
    assert np.abs(np.corrcoef(channels, rowvar=False)[0, 1:]).max() < 0.3


# ---------------------------------------------------------------------------
# Layer chain
# ---------------------------------------------------------------------------

def _direct_conv(x, weights, bias):
    out_c, _, kh, kw = weights.shape
    padded = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    out = np.zeros(x.shape[:2] + (out_c,))
    for h in range(x.shape[0]):
        for w in range(x.shape[1]):
            patch = padded[h:h + kh, w:w + kw, :]
            out[h, w] = np.einsum("ijc,ocij->o", patch, weights) + bias
    return out


@pytest.mark.parametrize("kernel", [1, 3, 5])
def test_conv2d_matches_direct_loop(rng, kernel):
    conv = ConvParams(rng.standard_normal((3, 2, kernel, kernel)), rng.standard_normal(3))
    x = rng.standard_normal((5, 6, 2))
    np.testing.assert_allclose(conv2d(x, conv), _direct_conv(x, conv.weights, conv.bias), atol=1e-12)


def test_conv2d_stride_and_channel_check(rng):
    conv = ConvParams(rng.standard_normal((2, 2, 3, 3)), np.zeros(2))
    assert conv2d(rng.standard_normal((7, 6, 2)), conv, stride=2).shape == (4, 3, 2)
    with pytest.raises(ValidationError):
        conv2d(np.zeros((4, 4, 3)), conv)


def test_chain_spec_defaults(chain):
    assert chain.layer_ids == ["conv1", "conv2"]
    conv1, conv2 = chain.layers
    assert conv1.kernel == 3
    assert str(conv1.config.block_shape) == "1x1x4"
    assert conv1.config.rate == 4.0
    assert conv2.config.step == 0.05 and conv2.config.rate is None
    # He-normal weights are seeded
    np.testing.assert_array_equal(LayerChainSpec.from_dict(CHAIN).layers[0].conv.weights, conv1.conv.weights)


def test_chain_spec_validation():
    broken = json.loads(json.dumps(CHAIN))
    broken["layers"][1]["in_channels"] = 5
    with pytest.raises(ValidationError):
        LayerChainSpec.from_dict(broken)
    with pytest.raises(ValidationError):
        LayerChainSpec.from_dict({"layers": []})
    with pytest.raises(ValidationError):
        LayerChainSpec.from_dict({"input_dims": [4, 4, 3], "layers": [{"in_channels": 3}]})
    duplicate = json.loads(json.dumps(CHAIN))
    duplicate["layers"][1]["name"] = "conv1"
    with pytest.raises(ValidationError):
        LayerChainSpec.from_dict(duplicate)


def test_chain_spec_file_with_weights(tmp_path, rng):
    weights = rng.standard_normal((4, 3, 1))
    save_tensor(ActivationTensor(weights), tmp_path / "w.atct")
    payload = {
        "input_dims": [4, 4, 3],
        "layers": [{"name": "c", "in_channels": 3, "out_channels": 4, "weights": "w.atct", "bias": [0, 1, 2, 3]}],
    }
    (tmp_path / "chain.json").write_text(json.dumps(payload))
    spec = LayerChainSpec.load(tmp_path / "chain.json")
    np.testing.assert_allclose(spec.layers[0].conv.weights[:, :, 0, 0], weights[:, :, 0].astype(np.float32))
    np.testing.assert_array_equal(spec.layers[0].conv.bias, [0, 1, 2, 3])

    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ValidationError):
        LayerChainSpec.load(tmp_path / "bad.json")


def test_with_configs(chain):
    changed = chain.with_configs(keep=2, use_klt=False)
    assert all(layer.config.keep == 2 and not layer.config.use_klt for layer in changed.layers)
    assert chain.layers[0].config.keep is None


def test_reference_chain_output_is_rectified(chain):
    x = synthetic_inputs(chain, 1)[0]
    pre, out = reference_chain(chain, x)
    assert len(pre) == 2
    assert pre[0].shape == (6, 6, 4)
    np.testing.assert_array_equal(out, np.maximum(pre[1], 0))


def test_compressed_chain_tracks_reference(chain):
    inputs = synthetic_inputs(chain, 3)
    profile = calibrate_chain(chain, inputs)
    assert profile.layer_ids == ["conv1", "conv2"]
    result = run_chain(chain, inputs[0], profile)
    _, reference = reference_chain(chain, inputs[0])
    assert result.output.dims == (6, 6, 4)
    assert [m.layer for m in result.layers] == ["conv1", "conv2"]
    assert result.output_mse < 0.05 * float(np.mean(reference ** 2))
    for m in result.layers:
        assert m.values == 6 * 6 * 4
        assert m.rate == m.payload_bits / m.values
        assert m.entropy_bits <= m.rate + 1e-9


def test_fine_step_chain_matches_reference(chain):
    fine = chain.with_configs(rate=None, step=1e-4, clip_multiplier=10.0)
    inputs = synthetic_inputs(fine, 3)
    profile = calibrate_chain(fine, inputs)
    result = run_chain(fine, inputs[0], profile)
    _, reference = reference_chain(fine, inputs[0])
    assert np.abs(result.output.data - reference).max() <= 1e-3 * np.abs(reference).max()


def test_single_pass_and_progressive_calibration_differ(chain):
    inputs = synthetic_inputs(chain, 2)
    progressive = calibrate_chain(chain, inputs, progressive=True)
    single = calibrate_chain(chain, inputs, progressive=False)
    np.testing.assert_array_equal(progressive.entry("conv1").spectrum, single.entry("conv1").spectrum)
    assert not np.array_equal(progressive.entry("conv2").spectrum, single.entry("conv2").spectrum)


def test_folded_chain_matches_unfolded(chain):
    inputs = synthetic_inputs(chain, 2)
    profile = calibrate_chain(chain, inputs)
    plain = run_chain(chain, inputs[1], profile)
    folded = run_chain(chain, inputs[1], profile, folded=True)
    scale = np.abs(plain.output.data).max()
    assert np.abs(folded.output.data - plain.output.data).max() <= 1e-4 * scale
    for a, b in zip(plain.layers, folded.layers):
        assert b.payload_bits == pytest.approx(a.payload_bits, rel=0.02)


def test_folded_chain_rejects_relu_before_encoder(chain):
    spec = chain.with_configs(relu_placement="before-encoder")
    inputs = synthetic_inputs(spec, 1)
    profile = calibrate_chain(spec, inputs)
    with pytest.raises(ValidationError):
        run_chain(spec, inputs[0], profile, folded=True)


def test_run_chain_checks_profile(chain, small_tensors):
    profile = calibrate([small_tensors, small_tensors], [LayerCodecConfig("1x1x8", step=0.1)] * 2, ["conv1", "conv2"])
    with pytest.raises(ValidationError):
        run_chain(chain, synthetic_inputs(chain, 1)[0], profile)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _point(**changes):
    base = dict(layer="l", step=0.1, entropy_bits=2.5, huffman_bits=2.6, header_bits=0.3, mse=1e-3)
    base.update(changes)
    return RateDistortionPoint(**base)


def test_apply_mode():
    point = _point()
    assert apply_mode(point, "both") == point
    vlc = apply_mode(point, "vlc-only")
    assert vlc.entropy_bits == vlc.huffman_bits == 2.6
    theory = apply_mode(point, "theoretical-only")
    assert theory.huffman_bits == theory.entropy_bits == 2.5
    assert theory.header_bits == 0.0
    with pytest.raises(ValidationError):
        apply_mode(point, "neither")


def test_rd_sweep_keeps_config_order(small_tensors):
    base = LayerCodecConfig("1x1x8", step=0.1, relu_placement="none")
    steps = [0.4, 0.05, 0.2, 0.1]
    points = rd_sweep(small_tensors, step_grid(base, steps), layer="conv1")
    assert [p.step for p in points] == pytest.approx(steps)
    by_step = sorted(points, key=lambda p: p.step)
    assert all(a.huffman_bits > b.huffman_bits for a, b in zip(by_step, by_step[1:]))
    assert all(a.mse < b.mse for a, b in zip(by_step, by_step[1:]))
    assert all(p.layer == "conv1" and p.output_mse is None for p in points)


def test_rd_sweep_is_thread_count_independent(small_tensors):
    grid = step_grid(LayerCodecConfig("1x1x8", rate=2.0, codebook_scope="coefficient"), [0.05, 0.1, 0.2])
    assert rd_sweep(small_tensors, grid, threads=1) == rd_sweep(small_tensors, grid, threads=3)


def test_rd_sweep_from_source():
    source = SyntheticSource.equicorrelated(4, 0.5, seed=4)
    grid = step_grid(LayerCodecConfig("1x1x4", step=0.1, relu_placement="none"), [0.1, 0.3])
    points = rd_sweep(source, grid, count=2, dims=(4, 4))
    assert len(points) == 2
    with pytest.raises(ValidationError):
        rd_sweep(source, [])


def test_measure_layer_rectifies_reference(small_tensors):
    entry = build_entry("conv1", small_tensors, LayerCodecConfig("1x1x8", step=0.05))
    point = measure_layer(small_tensors, entry)
    assert point.mse < 0.05 ** 2
    assert point.huffman_bits > point.entropy_bits - 0.05


def test_rd_sweep_chain(chain):
    inputs = synthetic_inputs(chain, 2)
    tests = synthetic_inputs(chain, 2, seed=99)
    points = rd_sweep_chain(chain, inputs, [0.05, 0.2], tests)
    assert [p.layer for p in points] == ["conv1", "conv2", "conv1", "conv2"]
    assert points[0].output_mse == points[1].output_mse
    assert points[0].output_mse < points[2].output_mse
    theory = rd_sweep_chain(chain, inputs, [0.05], tests, mode="theoretical-only")
    assert all(p.header_bits == 0.0 for p in theory)


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------

def test_coding_gain():
    assert coding_gain(np.eye(4)) == 0.0
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    assert coding_gain(cov) == pytest.approx(0.25 * np.log2(1 / 0.19))
    assert coding_gain(np.ones((2, 2))) == float("inf")


def test_energy_ratio_report(small_tensors):
    profile = calibrate([small_tensors], [LayerCodecConfig("1x1x8", step=0.1)], ["conv1"])
    table = energy_ratio_report(profile, fractions=(0.5, 0.9, 1.0))
    assert list(table.columns) == ["layer", "n", "fraction", "count", "ratio"]
    assert list(table["count"]) == sorted(table["count"])
    assert table["count"].iloc[-1] == 8
    assert table["ratio"].iloc[-1] == 1.0


def test_energy_ratio_report_by_source():
    sources = {
        "rank1": SyntheticSource.rank_one(np.linspace(0.5, 2.0, 8), seed=61),
        "white": SyntheticSource.identity(8, seed=62),
        "corr": SyntheticSource.equicorrelated(8, 0.9, seed=63),
    }
    batches = [source.tensors(4, 32, 32) for source in sources.values()]
    configs = [LayerCodecConfig("1x1x8", step=0.1)] * len(sources)
    profile = calibrate(batches, configs, list(sources))
    fractions = (0.3, 0.6, 0.8, 0.9, 0.95)
    counts = energy_ratio_report(profile, fractions).set_index(["layer", "fraction"])["count"]
    for f in fractions:
        assert counts["rank1", f] == 1
        assert counts["white", f] == math.ceil(f * 8)
    for f in (0.8, 0.9, 0.95):
        assert counts["corr", f] < counts["white", f]


def test_ablation_study_layout(small_tensors):
    table = ablation_study(small_tensors, 0.05)
    assert list(table["arm"]) == ["fixed-width", "klt+fixed-width", "vlc", "klt+vlc"]
    fixed = table.set_index("arm").loc[["fixed-width", "klt+fixed-width"], "rate"]
    assert all(float(r).is_integer() for r in fixed)


def test_truncation_study(small_tensors):
    table = truncation_study(small_tensors, 0.05, [8, 4, 2])
    assert list(table["keep"]) == [8, 4, 2]
    assert table["payload_bits"].is_monotonic_decreasing
    assert table["mse"].is_monotonic_increasing


def test_tree_balance_study(small_tensors):
    table = tree_balance_study(small_tensors, 0.05)
    assert list(table["arm"]) == ["identity", "klt"]
    assert (table["spread"] == table["max_len"] - table["min_len"]).all()


def test_klt_widens_the_shared_code_tree(correlated_tensors):
    spread = tree_balance_study(correlated_tensors, 0.05).set_index("arm")["spread"]
    assert spread["klt"] >= spread["identity"]


def test_block_shape_does_not_matter_for_white_source():
    tensors = SyntheticSource.identity(16, seed=64).tensors(4, 32, 32)
    points = block_shape_study(tensors, ["1x1x16", "2x2x4", "4x4x1"], 0.1)
    for field in ("huffman_bits", "entropy_bits"):
        rates = [getattr(p, field) for p in points]
        assert max(rates) - min(rates) <= 0.05


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_report_round_trip(tmp_path, fmt):
    points = [_point(step=0.1 / 3), _point(layer="007", mse=1 / 7, output_mse=2 / 3)]
    path = tmp_path / f"rd.{fmt}"
    emit_report(points, path, fmt)
    assert read_report(path) == points


def test_report_schema(tmp_path):
    path = tmp_path / "rd.csv"
    emit_report([_point()], path)
    assert pd.read_csv(path).columns.tolist() == REPORT_COLUMNS
    other = tmp_path / "other.csv"
    pd.DataFrame({"layer": ["x"], "rate": [1.0]}).to_csv(other, index=False)
    with pytest.raises(ValidationError):
        read_report(other)


def test_json_report_is_a_row_list(tmp_path):
    path = tmp_path / "rd.json"
    emit_report([_point()], path, "json")
    rows = json.loads(path.read_text())
    assert rows[0]["output_mse"] is None
    assert list(rows[0]) == REPORT_COLUMNS


def test_write_frame_rejects_unknown_format(tmp_path):
    with pytest.raises(ValidationError):
        write_frame(pd.DataFrame(), tmp_path / "x.txt", "xml")
