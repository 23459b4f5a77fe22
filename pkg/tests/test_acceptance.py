"""
Test: end-to-end properties of the codec on synthetic Gaussian sources
======================================================================
Scenario: desk-scale checks that stand in for full-network experiments.
Every activation comes from a seeded Gaussian source with a known
covariance, so the expected rates and distortions follow from the
covariance alone.

Expected behaviour:
- Huffman rate lies in [H, H + 1) and coding is lossless, escapes included
- the KLT diagonalises the covariance with an orthonormal matrix
- the quantizer follows the high-rate law D = (pi e / 6) 2^(-2R) at R = 4
- decorrelation saves (1/2n) log2(prod sigma^2 / det) bits at matched MSE
- folded conv + BN + KLT equals the composed pipeline
- KLT + VLC beats VLC alone, which beats fixed-width codes
- 1x1xC blocks win on channel-correlated data
- truncating the weak components halves the payload for < 2x the MSE
- calibration and encoding are bit-for-bit reproducible
"""

import math

import numpy as np
import pytest
from scipy.optimize import brentq

from actcodec_core.codec import BatchNormParams, ConvParams, LayerCodecConfig, build_entry, calibrate, encode_layer, fold
from actcodec_core.harness import (
    SeparableSource,
    SyntheticSource,
    ablation_study,
    batch_norm,
    block_shape_study,
    coding_gain,
    conv2d,
    measure_layer,
    truncation_study,
)
from actcodec_core.quant import (
    HIGH_RATE_FACTOR,
    QuantizerSpec,
    allocate_rates,
    dequantize,
    quantize,
    step_for_rate_approx,
    step_for_rate_exact,
)
from actcodec_core.stats import CovarianceModel, klt_forward, make_klt
from actcodec_core.vlc import SymbolHistogram, average_rate, build_codebook, decode, encode, entropy


def test_huffman_rate_within_one_bit_of_entropy():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        alphabet = int(rng.integers(1, 257))
        counts = rng.integers(0, int(rng.integers(1, 10_000)) + 1, alphabet)
        counts[rng.integers(alphabet)] += 1
        h = SymbolHistogram(int(rng.integers(-128, 128)), counts)
        H = entropy(h)
        rate = average_rate(build_codebook(h), h)
        assert H - 1e-9 <= rate < H + 1


def test_vlc_is_lossless():
    rng = np.random.default_rng(77)
    for trial in range(10_000):
        alphabet = int(rng.integers(1, 17))
        weights = rng.integers(0, 8, alphabet)
        weights[rng.integers(alphabet)] += 1
        low = int(rng.integers(-20, 20))
        escape = trial % 2 == 1
        cb = build_codebook(SymbolHistogram(low, weights), escape=escape)
        present = np.flatnonzero(weights) + low
        symbols = rng.choice(present, size=int(rng.integers(0, 33)))
        if escape and symbols.size:
            # values the histogram never saw go through the escape code
            unseen = rng.integers(-(2 ** 31), 2 ** 31, size=symbols.size)
            symbols = np.where(rng.random(symbols.size) < 0.2, unseen, symbols)
        stream = encode(symbols, cb)
        np.testing.assert_array_equal(decode(stream, cb, symbols.size), symbols)


@pytest.mark.parametrize("n", [2, 8, 64])
def test_klt_diagonalises_random_covariances(n):
    rng = np.random.default_rng(n)
    for _ in range(34):
        a = rng.standard_normal((n, int(rng.integers(1, 2 * n + 1))))
        cov = a @ a.T
        T = make_klt(CovarianceModel(n, np.zeros(n), cov, 1)).matrix
        projected = T @ cov @ T.T
        off = projected - np.diag(np.diag(projected))
        assert np.abs(off).max() <= 1e-8 * np.trace(cov)
        assert np.abs(T @ T.T - np.eye(n)).max() <= 1e-10


def test_high_rate_distortion_law():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(1_000_000)
    step = step_for_rate_exact(4.0, 1.0)
    spec = QuantizerSpec(step, 8.0)
    k = quantize(x, spec)
    mse = np.mean((dequantize(k, spec) - x) ** 2)
    assert mse == pytest.approx(HIGH_RATE_FACTOR * 2.0 ** -8, rel=0.05)
    assert entropy(SymbolHistogram.from_symbols(k)) == pytest.approx(4.0, abs=0.05)


@pytest.mark.parametrize("rate", [2, 3, 4, 5, 6])
def test_step_rate_constant(rate):
    assert step_for_rate_exact(rate, 1.0) == pytest.approx(step_for_rate_approx(rate), rel=0.05)


def _lagrange_rates(variances, target):
    def mean_rate(theta):
        return np.maximum(0.5 * np.log2(variances / theta), 0.0).mean() - target

    theta = brentq(mean_rate, variances.max() * 2.0 ** (-2 * target * variances.size - 2), variances.max(),
                   xtol=1e-300, rtol=1e-15)
    return np.maximum(0.5 * np.log2(variances / theta), 0.0)


def test_rate_allocation_matches_constrained_minimiser():
    rng = np.random.default_rng(6)
    for _ in range(100):
        variances = np.exp(rng.uniform(-8.0, 4.0, int(rng.integers(2, 32))))
        target = float(rng.uniform(0.1, 6.0))
        rates = allocate_rates(variances, target, mode="waterfill").rates
        np.testing.assert_allclose(rates, _lagrange_rates(variances, target), atol=1e-4)

        high = target + 20.0
        log_sigma = 0.5 * np.log2(variances)
        expected = high + log_sigma - log_sigma.mean()
        np.testing.assert_allclose(allocate_rates(variances, high, mode="clamp").rates, expected, rtol=1e-12)


def _rate_gap(source, **scope):
    tensors = source.tensors(8, 64, 64)
    step = step_for_rate_exact(4.0, 1.0)
    points = {}
    for use_klt in (False, True):
        config = LayerCodecConfig("1x1x2", step=step, use_klt=use_klt, relu_placement="none", **scope)
        points[use_klt] = measure_layer(tensors, build_entry("gain", tensors, config))
    assert points[True].mse == pytest.approx(points[False].mse, rel=0.05)
    return points[False].entropy_bits - points[True].entropy_bits


def test_coding_gain_of_correlated_pair():
    source = SyntheticSource.equicorrelated(2, 0.9, seed=21)
    predicted = coding_gain(source.cov)
    assert predicted == pytest.approx(0.25 * math.log2(1 / 0.19))
    assert _rate_gap(source) == pytest.approx(predicted, abs=0.1)


def test_no_coding_gain_for_white_source():
    assert abs(_rate_gap(SyntheticSource.identity(2, seed=22))) <= 0.05


def test_shared_layer_codebook_loses_most_of_the_gain():
    # one codebook over coefficients of unequal variance codes them all alike
    source = SyntheticSource.equicorrelated(2, 0.9, seed=21)
    assert LayerCodecConfig("1x1x2", step=0.1).codebook_scope == "coefficient"
    assert _rate_gap(source, codebook_scope="layer") < 0.5 * coding_gain(source.cov)


def test_fold_equals_composed_pipeline():
    rng = np.random.default_rng(8)
    for trial in range(100):
        kernel = 1 if trial % 2 == 0 else 3
        out_c, in_c = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        conv = ConvParams(rng.standard_normal((out_c, in_c, kernel, kernel)), rng.standard_normal(out_c))
        bn = BatchNormParams(
            rng.uniform(0.2, 3.0, out_c), rng.standard_normal(out_c),
            rng.standard_normal(out_c), rng.uniform(0.2, 3.0, out_c),
        )
        x = rng.standard_normal((5, 5, in_c))
        z = batch_norm(conv2d(x, conv), bn).reshape(-1, out_c)
        T = make_klt(CovarianceModel(out_c, z.mean(axis=0), np.cov(z, rowvar=False, bias=True) * len(z), len(z)))
        expected = klt_forward(T, z)
        got = conv2d(x, fold(conv, bn, T, LayerCodecConfig(f"1x1x{out_c}", step=0.1).block_shape))
        assert np.abs(got.reshape(-1, out_c) - expected).max() <= 1e-4 * np.abs(expected).max()


def test_ablation_ordering(correlated_tensors):
    step8 = 2 * 4.0 / 255
    table = ablation_study(correlated_tensors, 0.99 * step8).set_index("arm")
    rate = table["rate"]
    assert rate["klt+vlc"] < rate["vlc"] < rate["fixed-width"]
    assert rate["klt+vlc"] <= 0.7 * 8
    assert table.loc["klt+vlc", "mse"] <= step8 ** 2 / 12


def test_channel_vector_blocks_win_on_channel_correlation():
    tensors = SeparableSource(64, channel_rho=0.9, spatial_rho=0.0, seed=31).tensors(4, 16, 16)
    points = {p.layer: p for p in block_shape_study(tensors, ["1x1x64", "4x4x4", "8x8x1"], 0.1)}
    assert points["1x1x64"].huffman_bits < points["4x4x4"].huffman_bits < points["8x8x1"].huffman_bits
    mses = [p.mse for p in points.values()]
    assert max(mses) < 1.1 * min(mses)


def test_spatial_blocks_win_on_spatial_correlation():
    tensors = SeparableSource(64, channel_rho=0.0, spatial_rho=0.9, seed=32).tensors(4, 16, 16)
    points = {p.layer: p for p in block_shape_study(tensors, ["1x1x64", "4x4x4", "8x8x1"], 0.1)}
    assert points["8x8x1"].huffman_bits < points["4x4x4"].huffman_bits < points["1x1x64"].huffman_bits


def test_truncation_tradeoff():
    spectrum = np.concatenate([np.full(16, 4.05), np.full(48, 0.15)])
    assert spectrum[:16].sum() / spectrum.sum() == pytest.approx(0.9)
    tensors = SyntheticSource.from_spectrum(spectrum, seed=41).tensors(8, 16, 16)
    table = truncation_study(tensors, 1.0, [64, 16]).set_index("keep")
    assert table.loc[16, "mse"] < 2 * table.loc[64, "mse"]
    assert table.loc[16, "payload_bits"] <= 0.5 * table.loc[64, "payload_bits"]


def test_calibration_and_encoding_are_reproducible(tmp_path):
    def run(tag):
        source = SyntheticSource.equicorrelated(16, 0.7, seed=51)
        tensors = source.tensors(3, 8, 8)
        profile = calibrate([tensors], [LayerCodecConfig("1x1x16", rate=3.0)], ["conv1"], model_id="det")
        profile.save(tmp_path / f"{tag}.joblib")
        test = source.spawn(1).tensors(1, 8, 8)[0]
        encode_layer(test, profile.entry("conv1")).save(tmp_path / f"{tag}.atcs")

    run("a")
    run("b")
    assert (tmp_path / "a.joblib").read_bytes() == (tmp_path / "b.joblib").read_bytes()
    assert (tmp_path / "a.atcs").read_bytes() == (tmp_path / "b.atcs").read_bytes()
