"""
Experiment harness: synthetic Gaussian sources, a small conv/BN/ReLU chain,
rate-distortion sweeps, ablations and report files.

Random numbers come from numpy's Philox counter-based bit generator; raw
64-bit words are turned into standard normals with the Box-Muller transform
so a seed fixes the sample stream independent of numpy's Gaussian sampler.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import LinAlgError, cholesky

from actcodec_core import settings
from actcodec_core.codec import (
    BatchNormParams,
    CalibrationProfile,
    ConvParams,
    LayerCodecConfig,
    build_entry,
    calibrate,
    decode_layer,
    decode_symbols,
    encode_coefficients,
    encode_layer,
    fold,
    measured_rate,
)
from actcodec_core.errors import ValidationError
from actcodec_core.fileio import atomic_path
from actcodec_core.stats import energy_ratio
from actcodec_core.tensor import ActivationTensor, BlockShape, load_tensor
from actcodec_core.vlc import SymbolHistogram, entropy, tree_balance

logger = logging.getLogger(__name__)

CHOLESKY_JITTER = (0.0, 1e-12, 1e-10, 1e-8)
ENERGY_FRACTIONS = (0.80, 0.90, 0.95, 0.99)
REPORT_COLUMNS = ["layer", "step", "entropy_bits", "huffman_bits", "header_bits", "mse", "output_mse"]


# ---------------------------------------------------------------------------
# Random sources
# ---------------------------------------------------------------------------

def standard_normal(bit_generator, size) -> np.ndarray:
    """``size`` N(0, 1) draws from a numpy bit generator via Box-Muller."""
    pairs = (size + 1) // 2
    raw = bit_generator.random_raw(2 * pairs).astype(np.uint64)
    mantissa = raw >> np.uint64(11)
    u1 = (mantissa[0::2].astype(np.float64) + 1.0) * 2.0 ** -53  # (0, 1]
    u2 = mantissa[1::2].astype(np.float64) * 2.0 ** -53
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(theta)
    z[1::2] = radius * np.sin(theta)
    return z[:size]


def _philox(seed):
    return np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF)


def _cholesky_factor(cov):
    n = cov.shape[0]
    scale = max(float(np.trace(cov)) / n, np.finfo(float).tiny)
    for jitter in CHOLESKY_JITTER:
        try:
            return cholesky(cov + jitter * scale * np.eye(n), lower=True)
        except LinAlgError:
            continue
    raise ValidationError("source covariance is not positive semi-definite")


class SyntheticSource:
    """Gaussian vectors x = mu + L z with L L^T = cov."""

    def __init__(self, cov, mean=None, seed=None):
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValidationError(f"source covariance must be square, got shape {cov.shape}")
        if not np.allclose(cov, cov.T):
            raise ValidationError("source covariance is not symmetric")
        self.cov = cov
        self.mean = np.zeros(cov.shape[0]) if mean is None else np.asarray(mean, dtype=np.float64)
        if self.mean.shape != (cov.shape[0],):
            raise ValidationError(f"mean of length {self.mean.size} for a {cov.shape[0]}-dim source")
        self.seed = settings.SEED if seed is None else int(seed)
        self.factor = _cholesky_factor(cov)
        self._bit_generator = _philox(self.seed)

    @property
    def n(self) -> int:
        return self.cov.shape[0]

    def generate(self, count) -> np.ndarray:
        """Next ``count`` vectors of the stream, one per row."""
        z = standard_normal(self._bit_generator, count * self.n).reshape(count, self.n)
        return self.mean + z @ self.factor.T

    def tensors(self, count, height, width):
        """``count`` H x W x n tensors whose pixels are independent source vectors."""
        data = self.generate(count * height * width).reshape(count, height, width, self.n)
        return [ActivationTensor(d) for d in data]

    def spawn(self, index):
        """Independent clone seeded with ``seed ^ index``."""
        return SyntheticSource(self.cov, self.mean, self.seed ^ int(index))

    # -- constructors ------------------------------------------------------

    @classmethod
    def identity(cls, n, seed=None, mean=None):
        return cls(np.eye(n), mean, seed)

    @classmethod
    def equicorrelated(cls, n, rho, variance=1.0, seed=None):
        if not -1.0 / max(n - 1, 1) <= rho <= 1.0:
            raise ValidationError(f"correlation {rho} is not valid for {n} dimensions")
        cov = variance * ((1.0 - rho) * np.eye(n) + rho * np.ones((n, n)))
        return cls(cov, None, seed)

    @classmethod
    def from_spectrum(cls, spectrum, seed=None):
        """Covariance with eigenvalues ``spectrum`` along a seeded random rotation."""
        spectrum = np.asarray(spectrum, dtype=np.float64)
        g = standard_normal(_philox(seed if seed is not None else settings.SEED), spectrum.size ** 2)
        q, r = np.linalg.qr(g.reshape(spectrum.size, spectrum.size))
        q = q * np.sign(np.diag(r))
        cov = (q * spectrum) @ q.T
        return cls(0.5 * (cov + cov.T), None, seed)

    @classmethod
    def rank_one(cls, vector, seed=None):
        vector = np.asarray(vector, dtype=np.float64)
        return cls(np.outer(vector, vector), None, seed)


def _ar1(size, rho):
    index = np.arange(size)
    return rho ** np.abs(index[:, None] - index[None, :])


class SeparableSource:
    """Tensors with covariance spatial_h (x) spatial_w (x) channel.

    Channels are equicorrelated with ``channel_rho``; rows and columns
    follow an AR(1) law with ``spatial_rho``.
    """

    def __init__(self, channels, channel_rho=0.0, spatial_rho=0.0, seed=None):
        self.channels = channels
        self.channel_rho = channel_rho
        self.spatial_rho = spatial_rho
        self.seed = settings.SEED if seed is None else int(seed)
        channel_cov = (1.0 - channel_rho) * np.eye(channels) + channel_rho * np.ones((channels, channels))
        self.channel_factor = _cholesky_factor(channel_cov)
        self._bit_generator = _philox(self.seed)

    def tensors(self, count, height, width):
        row_factor = _cholesky_factor(_ar1(height, self.spatial_rho))
        col_factor = _cholesky_factor(_ar1(width, self.spatial_rho))
        out = []
        for _ in range(count):
            z = standard_normal(self._bit_generator, height * width * self.channels)
            z = z.reshape(height, width, self.channels)
            x = np.einsum("ij,jwc->iwc", row_factor, z)
            x = np.einsum("ij,hjc->hic", col_factor, x)
            out.append(ActivationTensor(x @ self.channel_factor.T))
        return out


# ---------------------------------------------------------------------------
# Layer chain
# ---------------------------------------------------------------------------

def conv2d(x, conv: ConvParams, stride=1) -> np.ndarray:
    """Direct 'same'-padded convolution of an H x W x C array."""
    x = np.asarray(x.data if isinstance(x, ActivationTensor) else x, dtype=np.float64)
    if x.shape[2] != conv.in_channels:
        raise ValidationError(f"input has {x.shape[2]} channels, conv expects {conv.in_channels}")
    _, _, kh, kw = conv.weights.shape
    padded = np.pad(x, ((kh // 2, kh - 1 - kh // 2), (kw // 2, kw - 1 - kw // 2), (0, 0)))
    windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))[::stride, ::stride]
    return np.einsum("hwcij,ocij->hwo", windows, conv.weights) + conv.bias


def batch_norm(x, bn: BatchNormParams) -> np.ndarray:
    return bn.gamma * (np.asarray(x, dtype=np.float64) - bn.mean) / bn.std + bn.beta


def relu(x):
    return np.maximum(x, 0.0)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    conv: ConvParams
    bn: BatchNormParams
    config: LayerCodecConfig
    stride: int = 1

    @property
    def kernel(self) -> int:
        return self.conv.weights.shape[2]

    def pre_activation(self, x) -> np.ndarray:
        return batch_norm(conv2d(x, self.conv, self.stride), self.bn)


def he_weights(out_channels, in_channels, kernel, seed) -> np.ndarray:
    """Seeded He-normal kernel, std = sqrt(2 / fan_in)."""
    fan_in = in_channels * kernel * kernel
    z = standard_normal(_philox(seed), out_channels * fan_in)
    return (math.sqrt(2.0 / fan_in) * z).reshape(out_channels, in_channels, kernel, kernel)


def load_weights(path, out_channels, in_channels, kernel) -> np.ndarray:
    """Kernel stored as an ATCT tensor of dims (out, in, kh * kw), (out, in, kh, kw) C-order."""
    t = load_tensor(path)
    if t.dims != (out_channels, in_channels, kernel * kernel):
        raise ValidationError(
            f"weight file {path} has dims {t.dims}, expected {(out_channels, in_channels, kernel * kernel)}"
        )
    return t.data.astype(np.float64).reshape(out_channels, in_channels, kernel, kernel)


@dataclass(frozen=True)
class LayerChainSpec:
    layers: tuple
    input_dims: tuple
    seed: int = 0
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("layer chain has no layers")
        channels = self.input_dims[2]
        for layer in self.layers:
            if layer.conv.in_channels != channels:
                raise ValidationError(
                    f"layer {layer.name} expects {layer.conv.in_channels} input channels, gets {channels}"
                )
            channels = layer.conv.out_channels
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError(f"layer names must be unique: {names}")

    @property
    def layer_ids(self):
        return [layer.name for layer in self.layers]

    @classmethod
    def from_dict(cls, payload, base_dir="."):
        try:
            input_dims = tuple(int(v) for v in payload["input_dims"])
            seed = int(payload.get("seed", settings.SEED))
            layers = []
            for index, raw in enumerate(payload["layers"]):
                kernel = int(raw.get("kernel", 1))
                in_c, out_c = int(raw["in_channels"]), int(raw["out_channels"])
                if raw.get("weights"):
                    weights = load_weights(Path(base_dir) / raw["weights"], out_c, in_c, kernel)
                else:
                    weights = he_weights(out_c, in_c, kernel, seed ^ (index + 1))
                bias = np.asarray(raw.get("bias", np.zeros(out_c)), dtype=np.float64)
                bn = raw.get("bn")
                bn = BatchNormParams(**bn) if bn else BatchNormParams.identity(out_c)
                codec = dict(raw.get("codec", {}))
                codec.setdefault("block_shape", f"1x1x{out_c}")
                if not {"rate", "step", "bitwidth"} & set(codec):
                    codec["rate"] = 4.0
                layers.append(
                    LayerSpec(
                        name=str(raw.get("name", f"layer{index}")),
                        conv=ConvParams(weights, bias),
                        bn=bn,
                        config=LayerCodecConfig.from_dict(codec),
                        stride=int(raw.get("stride", 1)),
                    )
                )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed chain spec: {exc!r}") from exc
        return cls(tuple(layers), input_dims, seed, dict(payload.get("source", {})))

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(payload, base_dir=path.parent)

    def with_configs(self, **changes):
        """Copy with every layer config updated by ``changes``."""
        layers = tuple(replace(layer, config=replace(layer.config, **changes)) for layer in self.layers)
        return replace(self, layers=layers)


def synthetic_inputs(spec: LayerChainSpec, count, seed=None):
    """Chain inputs from the spec's ``source`` block (equicorrelated channels)."""
    height, width, channels = spec.input_dims
    rho = float(spec.source.get("rho", 0.0))
    seed = spec.seed if seed is None else seed
    return SyntheticSource.equicorrelated(channels, rho, seed=seed).tensors(count, height, width)


def reference_chain(spec: LayerChainSpec, x: ActivationTensor):
    """Uncompressed forward pass; returns the pre-activation of every layer and the output."""
    current = x.data.astype(np.float64)
    pre = []
    for layer in spec.layers:
        z = layer.pre_activation(current)
        pre.append(z)
        current = relu(z)
    return pre, current


def _compressed_layer(layer, entry, x, folded):
    if folded:
        if entry.config.relu_placement == "before-encoder":
            raise ValidationError(f"layer {layer.name} cannot run folded with this codec config")
        folded_conv = fold(layer.conv, layer.bn, entry.coding_transform, entry.config.block_shape)
        coeffs = conv2d(x, folded_conv, layer.stride)
        stream = encode_coefficients(coeffs.reshape(-1, coeffs.shape[2]), coeffs.shape, entry)
        z = None
    else:
        z = ActivationTensor(layer.pre_activation(x))
        stream = encode_layer(z, entry)
    decoded = decode_layer(stream, entry).data.astype(np.float64)
    if entry.config.relu_placement == "none":
        decoded = relu(decoded)
    return stream, z, decoded


@dataclass(frozen=True)
class LayerMetrics:
    layer: str
    values: int
    payload_bits: int
    header_bits: int
    rate: float
    entropy_bits: float
    mse: float


@dataclass(frozen=True)
class ChainResult:
    output: ActivationTensor
    layers: tuple
    output_mse: float


def _stream_entropy_bits(stream) -> float:
    """Empirical entropy of the coded symbols, in bits per tensor value."""
    symbols = decode_symbols(stream)
    groups = [symbols.reshape(-1)] if stream.codebook_scope == "layer" else list(symbols.T)
    bits = sum(entropy(SymbolHistogram.from_symbols(g)) * g.size for g in groups)
    return bits / stream.value_count


def run_chain(spec: LayerChainSpec, x: ActivationTensor, profile: CalibrationProfile, folded=False) -> ChainResult:
    """Forward pass with every layer output sent through encode/decode."""
    for layer in spec.layers:
        entry = profile.entry(layer.name)
        if entry.n != layer.config.block_shape.n or entry.channels != layer.conv.out_channels:
            raise ValidationError(f"profile entry {layer.name} does not match the chain spec")
    _, reference = reference_chain(spec, x)
    current = x.data.astype(np.float64)
    metrics = []
    for layer in spec.layers:
        entry = profile.entry(layer.name)
        stream, z, decoded = _compressed_layer(layer, entry, current, folded)
        target = relu(layer.pre_activation(current)) if z is None else relu(z.data.astype(np.float64))
        diff = decoded - target
        metrics.append(
            LayerMetrics(
                layer=layer.name,
                values=stream.value_count,
                payload_bits=stream.payload_bits,
                header_bits=stream.header_bits,
                rate=measured_rate(stream),
                entropy_bits=_stream_entropy_bits(stream),
                mse=float(np.mean(diff * diff)),
            )
        )
        current = decoded
    diff = current - reference
    return ChainResult(ActivationTensor(current), tuple(metrics), float(np.mean(diff * diff)))


def calibrate_chain(spec: LayerChainSpec, inputs, progressive=True, model_id="chain") -> CalibrationProfile:
    """Calibrate every layer of ``spec`` on ``inputs``.

    Progressive calibration feeds layer l the decoded outputs of layers
    before it; otherwise all layers see the clean uncompressed chain.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValidationError("chain calibration needs at least one input tensor")

    if not progressive:
        clean = [reference_chain(spec, x)[0] for x in inputs]
        batches = [[ActivationTensor(pre[l]) for pre in clean] for l in range(len(spec.layers))]
    else:
        def batch_for(index):
            def batch(profile):
                out = []
                for x in inputs:
                    current = x.data.astype(np.float64)
                    for layer in spec.layers[:index]:
                        _, _, current = _compressed_layer(layer, profile.entry(layer.name), current, False)
                    out.append(ActivationTensor(spec.layers[index].pre_activation(current)))
                return out
            return batch
        batches = [batch_for(i) for i in range(len(spec.layers))]

    return calibrate(batches, [layer.config for layer in spec.layers], spec.layer_ids, model_id)


# ---------------------------------------------------------------------------
# Rate-distortion points and sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateDistortionPoint:
    layer: str
    step: float
    entropy_bits: float
    huffman_bits: float
    header_bits: float
    mse: float
    output_mse: Optional[float] = None

    def as_row(self) -> dict:
        return {name: getattr(self, name) for name in REPORT_COLUMNS}


SWEEP_MODES = ("both", "vlc-only", "theoretical-only")


def apply_mode(point: RateDistortionPoint, mode) -> RateDistortionPoint:
    """``vlc-only`` reports the Huffman rate in both rate columns,
    ``theoretical-only`` the entropy in both with zero header bits."""
    if mode not in SWEEP_MODES:
        raise ValidationError(f"unknown sweep mode {mode!r}")
    if mode == "vlc-only":
        return replace(point, entropy_bits=point.huffman_bits)
    if mode == "theoretical-only":
        return replace(point, huffman_bits=point.entropy_bits, header_bits=0.0)
    return point


def _mse(a, b, rectify=False):
    reference = relu(b.data.astype(np.float64)) if rectify else b.data
    diff = a.data.astype(np.float64) - reference
    return float(np.mean(diff * diff))


def measure_layer(tensors, entry, layer="layer0", mode="both") -> RateDistortionPoint:
    """Encode ``tensors`` with ``entry`` and pool their rates and MSE.

    When the layer applies ReLU the reference is the rectified input.
    """
    rectify = entry.config.relu_placement != "none"
    values = payload = header = ent = err = 0.0
    for t in tensors:
        stream = encode_layer(t, entry)
        values += stream.value_count
        payload += stream.payload_bits
        header += stream.header_bits
        ent += _stream_entropy_bits(stream) * stream.value_count
        err += _mse(decode_layer(stream, entry), t, rectify) * stream.value_count
    point = RateDistortionPoint(layer, entry.quantizer.step, ent / values, payload / values, header / values, err / values)
    return apply_mode(point, mode)


def _sweep_point(data, calibration, config, layer, mode):
    entry = build_entry(layer, calibration, config)
    return measure_layer(data, entry, layer, mode)


def _threads(threads):
    return max(1, settings.THREADS if threads is None else int(threads))


def rd_sweep(data, configs, layer="layer0", calibration=None, mode="both", threads=None, count=8, dims=(8, 8)):
    """One point per config; points keep the order of ``configs``.

    ``data`` is a list of tensors or a source; a source is sampled once
    (``count`` tensors of ``dims``) so every point sees the same tensors.
    """
    configs = list(configs)
    if not configs:
        raise ValidationError("rate-distortion sweep needs a non-empty config grid")
    if hasattr(data, "tensors"):
        data = data.tensors(count, *dims)
    data = list(data)
    calibration = data if calibration is None else list(calibration)
    points = Parallel(n_jobs=_threads(threads), prefer="threads")(
        delayed(_sweep_point)(data, calibration, config, layer, mode) for config in configs
    )
    logger.info("swept %d points for %s", len(points), layer)
    return list(points)


def step_grid(base, steps):
    """Configs that differ from ``base`` only in the explicit step."""
    return [replace(base, rate=None, bitwidth=None, step=float(s)) for s in steps]


def _chain_point_rows(spec, inputs, test_inputs, step, progressive):
    stepped = spec.with_configs(rate=None, bitwidth=None, step=float(step))
    profile = calibrate_chain(stepped, inputs, progressive=progressive)
    results = [run_chain(stepped, x, profile) for x in test_inputs]
    rows = []
    for index, layer in enumerate(stepped.layers):
        per = [r.layers[index] for r in results]
        weight = len(per)
        rows.append(
            RateDistortionPoint(
                layer=layer.name,
                step=profile.entry(layer.name).quantizer.step,
                entropy_bits=sum(m.entropy_bits for m in per) / weight,
                huffman_bits=sum(m.rate for m in per) / weight,
                header_bits=sum(m.header_bits / m.values for m in per) / weight,
                mse=sum(m.mse for m in per) / weight,
                output_mse=sum(r.output_mse for r in results) / len(results),
            )
        )
    return rows


def rd_sweep_chain(spec: LayerChainSpec, inputs, steps, test_inputs=None, progressive=True, mode="both", threads=None):
    """Per-layer points for every step, each carrying the chain-output MSE."""
    steps = list(steps)
    if not steps:
        raise ValidationError("chain sweep needs at least one step")
    test_inputs = list(inputs) if test_inputs is None else list(test_inputs)
    batches = Parallel(n_jobs=_threads(threads), prefer="threads")(
        delayed(_chain_point_rows)(spec, list(inputs), test_inputs, s, progressive) for s in steps
    )
    return [apply_mode(point, mode) for rows in batches for point in rows]


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------

def coding_gain(cov) -> float:
    """(1 / 2n) log2(prod sigma_i^2 / det cov): bits/sample saved by decorrelation."""
    cov = np.asarray(cov, dtype=np.float64)
    n = cov.shape[0]
    variances = np.diag(cov)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0 or (variances <= 0).any():
        logger.warning("coding gain of a singular covariance is unbounded")
        return math.inf
    return float((np.log(variances).sum() - logdet) / (2.0 * n * math.log(2.0)))


def block_shape_study(tensors, shapes, step, calibration=None, codebook_scope=None, threads=None):
    """RD points at a common step for block shapes of equal n; ``layer`` is the shape."""
    codebook_scope = codebook_scope or settings.CODEBOOK_SCOPE
    shapes = [BlockShape.parse(s) if not isinstance(s, BlockShape) else s for s in shapes]
    if len({s.n for s in shapes}) != 1:
        raise ValidationError(f"block shapes must share n, got {[str(s) for s in shapes]}")
    tensors = list(tensors)
    calibration = tensors if calibration is None else list(calibration)
    jobs = [
        (str(shape), LayerCodecConfig(shape, step=step, relu_placement="none", codebook_scope=codebook_scope))
        for shape in shapes
    ]
    return list(
        Parallel(n_jobs=_threads(threads), prefer="threads")(
            delayed(_sweep_point)(tensors, calibration, config, name, "both") for name, config in jobs
        )
    )


def energy_ratio_report(profile: CalibrationProfile, fractions=ENERGY_FRACTIONS) -> pd.DataFrame:
    rows = []
    for entry in profile.entries:
        for fraction in fractions:
            count = energy_ratio(entry.spectrum, fraction)
            rows.append(
                {"layer": entry.layer_id, "n": entry.n, "fraction": fraction, "count": count, "ratio": count / entry.n}
            )
    return pd.DataFrame(rows, columns=["layer", "n", "fraction", "count", "ratio"])


def _fixed_width_bits(quantizer):
    return math.ceil(math.log2(quantizer.levels))


def ablation_study(tensors, step, block_shape=None, calibration=None, codebook_scope=None) -> pd.DataFrame:
    """Rate and MSE of the four encoder arms at a common step.

    Fixed-width arms spend ceil(log2(levels)) bits per value; VLC arms
    report the measured Huffman payload.
    """
    codebook_scope = codebook_scope or settings.CODEBOOK_SCOPE
    tensors = list(tensors)
    calibration = tensors if calibration is None else list(calibration)
    shape = block_shape or BlockShape(1, 1, tensors[0].channels)
    rows = []
    for use_klt in (False, True):
        config = LayerCodecConfig(
            shape, step=step, use_klt=use_klt, relu_placement="none", codebook_scope=codebook_scope
        )
        entry = build_entry("ablation", calibration, config)
        point = measure_layer(tensors, entry)
        prefix = "klt+" if use_klt else ""
        rows.append({"arm": prefix + "fixed-width", "rate": float(_fixed_width_bits(entry.quantizer)), "mse": point.mse})
        rows.append({"arm": prefix + "vlc", "rate": point.huffman_bits, "mse": point.mse})
    order = ["fixed-width", "klt+fixed-width", "vlc", "klt+vlc"]
    return pd.DataFrame(rows).set_index("arm").loc[order].reset_index()


def truncation_study(tensors, step, keeps, block_shape=None, calibration=None, codebook_scope=None):
    """Payload bits and MSE versus the kept component count."""
    codebook_scope = codebook_scope or settings.CODEBOOK_SCOPE
    tensors = list(tensors)
    calibration = tensors if calibration is None else list(calibration)
    shape = block_shape or BlockShape(1, 1, tensors[0].channels)
    rows = []
    for keep in keeps:
        config = LayerCodecConfig(shape, step=step, keep=int(keep), relu_placement="none", codebook_scope=codebook_scope)
        entry = build_entry("truncation", calibration, config)
        payload = sum(encode_layer(t, entry).payload_bits for t in tensors)
        point = measure_layer(tensors, entry)
        rows.append({"keep": int(keep), "payload_bits": payload, "rate": point.huffman_bits, "mse": point.mse})
    return pd.DataFrame(rows, columns=["keep", "payload_bits", "rate", "mse"])


def tree_balance_study(tensors, step, block_shape=None) -> pd.DataFrame:
    """Layer-codebook length spread with and without the transform."""
    tensors = list(tensors)
    shape = block_shape or BlockShape(1, 1, tensors[0].channels)
    rows = []
    for use_klt in (False, True):
        config = LayerCodecConfig(shape, step=step, use_klt=use_klt, relu_placement="none", codebook_scope="layer")
        balance = tree_balance(build_entry("balance", tensors, config).codebooks[0])
        rows.append(
            {
                "arm": "klt" if use_klt else "identity",
                "max_len": balance.max_len,
                "min_len": balance.min_len,
                "spread": balance.spread,
            }
        )
    return pd.DataFrame(rows, columns=["arm", "max_len", "min_len", "spread"])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def points_frame(points) -> pd.DataFrame:
    return pd.DataFrame([p.as_row() for p in points], columns=REPORT_COLUMNS)


def _json_scalar(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def write_frame(frame: pd.DataFrame, path, fmt="csv"):
    """Atomically write ``frame`` as CSV or as a JSON list of row objects."""
    if fmt not in ("csv", "json"):
        raise ValidationError(f"unknown report format {fmt!r}")
    with atomic_path(path) as tmp:
        if fmt == "csv":
            frame.to_csv(tmp, index=False)
        else:
            rows = frame.astype(object).where(frame.notna(), None).to_dict(orient="records")
            tmp.write_text(json.dumps(rows, indent=1, default=_json_scalar) + "\n")


def emit_report(points, path, fmt="csv"):
    """Write one row per point with the fixed column schema."""
    frame = points_frame(points)
    write_frame(frame, path, fmt)
    logger.info("wrote %d report rows to %s", len(frame), path)


def read_report(path, fmt=None):
    """Parse a report written by :func:`emit_report` back into points."""
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    if fmt == "csv":
        frame = pd.read_csv(path, dtype={"layer": str}, float_precision="round_trip")
    else:
        with open(path) as fh:
            frame = pd.DataFrame(json.load(fh))
    if list(frame.columns) != REPORT_COLUMNS and len(frame):
        raise ValidationError(f"report columns {list(frame.columns)} differ from {REPORT_COLUMNS}")
    points = []
    for row in frame.to_dict(orient="records"):
        output_mse = row["output_mse"]
        points.append(
            RateDistortionPoint(
                layer=str(row["layer"]),
                step=float(row["step"]),
                entropy_bits=float(row["entropy_bits"]),
                huffman_bits=float(row["huffman_bits"]),
                header_bits=float(row["header_bits"]),
                mse=float(row["mse"]),
                output_mse=None if output_mse is None or pd.isna(output_mse) else float(output_mse),
            )
        )
    return points
