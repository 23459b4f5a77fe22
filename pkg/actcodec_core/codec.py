"""
Layer codec: calibration, encode/decode of activation tensors, transform
quantization and conv/BN/KLT folding.

Encode chain per layer:

    tensor -> blocks -> KLT -> drop tail coefficients -> uniform quantizer
           -> Huffman VLC -> ATCS container

Every layer uses one quantizer step for all of its transform channels. The
step and the clip range are anchored on the highest-variance channel.
"""

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import joblib
import numpy as np

from actcodec_core import settings
from actcodec_core.errors import (
    BadMagic,
    CorruptStream,
    DegenerateSpectrum,
    FormatError,
    Truncated,
    ValidationError,
    VersionMismatch,
)
from actcodec_core.fileio import atomic_path, atomic_write_bytes
from actcodec_core.quant import QuantizerSpec, dequantize, quantize, step_for_rate_exact
from actcodec_core.stats import CovarianceModel, KLTransform, accumulate, klt_forward, klt_inverse, make_klt
from actcodec_core.tensor import ActivationTensor, BlockSequence, BlockShape, PaddingPolicy, partition, reassemble
from actcodec_core.vlc import (
    BitStream,
    HuffmanCodebook,
    SymbolHistogram,
    build_codebook,
    decode,
    decode_blocks,
    encode,
    encode_blocks,
)

logger = logging.getLogger(__name__)

STREAM_MAGIC = b"ATCS"
STREAM_VERSION = 1

TRANSFORM_EXTERNAL = 0
TRANSFORM_FLOAT32 = 1
TRANSFORM_INT8 = 2

PRECISIONS = ("float32", "int8")
RELU_PLACEMENTS = ("after-decoder", "before-encoder", "none")
CODEBOOK_SCOPES = ("layer", "coefficient")

# magic, version, H, W, C, bw, bh, bc, step, clip, keep, transform mode
_HEADER = struct.Struct("<4sHIIIHHHffHB")
_SCOPE = struct.Struct("<BH")
_COUNT = struct.Struct("<Q")
_INT8_SCALE = 127


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerCodecConfig:
    """Per-layer codec settings.

    Exactly one of ``rate`` (bits/value), ``step`` or ``bitwidth`` selects
    the quantizer step. ``keep`` is the truncation count t (default n).
    """

    block_shape: BlockShape
    rate: Optional[float] = None
    step: Optional[float] = None
    bitwidth: Optional[int] = None
    clip_multiplier: float = field(default_factory=lambda: settings.CLIP_MULTIPLIER)
    keep: Optional[int] = None
    transform_precision: str = "float32"
    relu_placement: str = "after-decoder"
    use_klt: bool = True
    embed_transform: bool = False
    codebook_scope: str = field(default_factory=lambda: settings.CODEBOOK_SCOPE)

    def __post_init__(self):
        if isinstance(self.block_shape, (str, list, tuple)):
            object.__setattr__(self, "block_shape", BlockShape.parse(self.block_shape))
        chosen = [name for name in ("rate", "step", "bitwidth") if getattr(self, name) is not None]
        if len(chosen) != 1:
            raise ValidationError(f"exactly one of rate, step or bitwidth must be set, got {chosen or 'none'}")
        if self.rate is not None and not self.rate > 0:
            raise ValidationError(f"target rate must be positive, got {self.rate}")
        if self.step is not None and not (self.step > 0 and math.isfinite(self.step)):
            raise ValidationError(f"quantizer step must be positive, got {self.step}")
        if self.bitwidth is not None and not 1 <= int(self.bitwidth) <= 30:
            raise ValidationError(f"bitwidth must lie in 1..30, got {self.bitwidth}")
        if not self.clip_multiplier > 0:
            raise ValidationError(f"clip multiplier must be positive, got {self.clip_multiplier}")
        n = self.block_shape.n
        if self.keep is not None and not 1 <= self.keep <= n:
            raise ValidationError(f"keep count {self.keep} outside 1..{n}")
        if n > 0xFFFF:
            raise ValidationError(f"block of {n} values does not fit the container")
        if self.transform_precision not in PRECISIONS:
            raise ValidationError(f"unknown transform precision {self.transform_precision!r}")
        if self.relu_placement not in RELU_PLACEMENTS:
            raise ValidationError(f"unknown nonlinearity placement {self.relu_placement!r}")
        if self.codebook_scope not in CODEBOOK_SCOPES:
            raise ValidationError(f"unknown codebook scope {self.codebook_scope!r}")

    @property
    def keep_count(self) -> int:
        return self.block_shape.n if self.keep is None else int(self.keep)

    def to_dict(self) -> dict:
        return {
            "block_shape": str(self.block_shape),
            "rate": self.rate,
            "step": self.step,
            "bitwidth": self.bitwidth,
            "clip_multiplier": self.clip_multiplier,
            "keep": self.keep,
            "transform_precision": self.transform_precision,
            "relu_placement": self.relu_placement,
            "use_klt": self.use_klt,
            "embed_transform": self.embed_transform,
            "codebook_scope": self.codebook_scope,
        }

    @classmethod
    def from_dict(cls, payload: dict):
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown codec config keys: {sorted(unknown)}")
        if "block_shape" not in payload:
            raise ValidationError("codec config needs a block_shape")
        return cls(**payload)


# ---------------------------------------------------------------------------
# Transform quantization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantizedTransform:
    """int8 transform matrix; entry (i, j) decodes to values[i, j] * peak / 127."""

    values: np.ndarray
    peak: float

    @property
    def scale(self) -> float:
        return self.peak / _INT8_SCALE

    def matrix(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.peak / _INT8_SCALE


def quantize_transform(T: KLTransform) -> QuantizedTransform:
    peak = float(np.float32(np.abs(T.matrix).max()))
    if peak == 0.0:
        return QuantizedTransform(np.zeros(T.matrix.shape, dtype=np.int8), 1.0)
    scaled = T.matrix * _INT8_SCALE / peak
    values = np.clip(np.sign(scaled) * np.floor(np.abs(scaled) + 0.5), -_INT8_SCALE, _INT8_SCALE)
    return QuantizedTransform(values.astype(np.int8), peak)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerStatistics:
    covariance: CovarianceModel
    transform: KLTransform
    pad_fill: np.ndarray


def _apply_relu(t: ActivationTensor) -> ActivationTensor:
    return ActivationTensor(np.maximum(t.data, 0.0))


def _as_tensors(batch):
    if isinstance(batch, ActivationTensor):
        return [batch]
    tensors = list(batch)
    if not tensors:
        raise ValidationError("calibration batch is empty")
    for t in tensors:
        if not isinstance(t, ActivationTensor):
            raise ValidationError(f"calibration batch holds {type(t).__name__}, expected ActivationTensor")
    channels = {t.channels for t in tensors}
    if len(channels) != 1:
        raise ValidationError(f"calibration tensors disagree on channel count: {sorted(channels)}")
    return tensors


def fit_statistics(tensors, config: LayerCodecConfig) -> LayerStatistics:
    """Covariance and transform of the blocks of ``tensors``.

    Spatial padding is filled with the per-channel calibration mean.
    """
    tensors = _as_tensors(tensors)
    if config.relu_placement == "before-encoder":
        tensors = [_apply_relu(t) for t in tensors]
    values = sum(t.size // t.channels for t in tensors)
    pad_fill = sum(t.channel_means() * (t.size // t.channels) for t in tensors) / values
    model = CovarianceModel(config.block_shape.n)
    model = accumulate((partition(t, config.block_shape, fill=pad_fill).blocks for t in tensors), model)
    if config.use_klt:
        transform = make_klt(model)
    else:
        transform = KLTransform.identity(model.mean, np.diag(model.cov).copy(), model.sample_count)
    return LayerStatistics(model, transform, pad_fill.astype(np.float32))


def anchor_quantizer(spectrum, config: LayerCodecConfig) -> QuantizerSpec:
    """Shared layer quantizer anchored on the highest-variance channel."""
    sigma = math.sqrt(float(np.max(spectrum)))
    clip = config.clip_multiplier * sigma
    if config.step is not None:
        step = config.step
    elif sigma == 0.0:
        raise DegenerateSpectrum("all-zero spectrum leaves no anchor channel for the step rule")
    elif config.rate is not None:
        step = step_for_rate_exact(config.rate, sigma)
    else:
        step = 2.0 * clip / (2 ** config.bitwidth - 1)
    step = float(np.float32(step))
    # Clip sits on the outer edge of the last cell, so |x| <= clip errs by <= step/2.
    clip = float(np.float32((math.floor(max(clip, step / 2.0) / step) + 0.5) * step))
    spec = QuantizerSpec(step, clip)
    if spec.max_index >= 2 ** 31:
        raise ValidationError(f"step {step} is too small for clip {clip}")
    return spec


@dataclass(frozen=True)
class ProfileEntry:
    """Everything needed to encode and decode one layer."""

    layer_id: str
    config: LayerCodecConfig
    transform: KLTransform
    coding_transform: KLTransform
    quantized_transform: Optional[QuantizedTransform]
    quantizer: QuantizerSpec
    codebooks: tuple
    pad_fill: np.ndarray
    channels: int

    @property
    def n(self) -> int:
        return self.config.block_shape.n

    @property
    def keep(self) -> int:
        return self.config.keep_count

    @property
    def spectrum(self) -> np.ndarray:
        return self.transform.spectrum

    @property
    def sample_count(self) -> int:
        return self.transform.sample_count


def _coding_transform(transform, config):
    mean = np.float32(transform.mean).astype(np.float64)
    if config.transform_precision == "int8":
        qt = quantize_transform(transform)
        return KLTransform(qt.matrix(), mean, transform.spectrum, transform.sample_count), qt
    matrix = np.float32(transform.matrix).astype(np.float64)
    return KLTransform(matrix, mean, transform.spectrum, transform.sample_count), None


def _quantized_coefficients(coeffs, entry):
    return quantize(coeffs[:, :entry.keep], entry.quantizer)


def build_entry(layer_id, tensors, config: LayerCodecConfig) -> ProfileEntry:
    """Calibrate one layer: statistics, quantizer, then codebooks on the same blocks."""
    tensors = _as_tensors(tensors)
    stats = fit_statistics(tensors, config)
    coding, qt = _coding_transform(stats.transform, config)
    quantizer = anchor_quantizer(stats.transform.spectrum, config)
    entry = ProfileEntry(
        layer_id=str(layer_id),
        config=config,
        transform=stats.transform,
        coding_transform=coding,
        quantized_transform=qt,
        quantizer=quantizer,
        codebooks=(),
        pad_fill=stats.pad_fill,
        channels=tensors[0].channels,
    )

    symbols = np.concatenate([_quantized_coefficients(_project(t, entry), entry) for t in tensors])
    if config.codebook_scope == "layer":
        codebooks = (build_codebook(SymbolHistogram.from_symbols(symbols), escape=True),)
    else:
        codebooks = tuple(
            build_codebook(SymbolHistogram.from_symbols(symbols[:, j]), escape=True)
            for j in range(entry.keep)
        )
    logger.info(
        "calibrated %s: n=%d keep=%d step=%.6g clip=%.6g from %d blocks",
        layer_id, entry.n, entry.keep, quantizer.step, quantizer.clip, stats.covariance.sample_count,
    )
    return replace(entry, codebooks=codebooks)


@dataclass(frozen=True)
class CalibrationProfile:
    entries: tuple
    model_id: str = "model"

    @property
    def layer_ids(self):
        return [e.layer_id for e in self.entries]

    @property
    def sample_count(self) -> int:
        return sum(e.sample_count for e in self.entries)

    def entry(self, layer_id) -> ProfileEntry:
        for e in self.entries:
            if e.layer_id == str(layer_id):
                return e
        raise ValidationError(f"unknown layer id {layer_id!r}; profile has {self.layer_ids}")

    def save(self, path):
        with atomic_path(path) as tmp:
            joblib.dump(self, tmp)
        logger.debug("saved profile %s (%d layers) to %s", self.model_id, len(self.entries), path)

    @classmethod
    def load(cls, path):
        profile = joblib.load(path)
        if not isinstance(profile, cls):
            raise FormatError(f"{path} does not hold a calibration profile")
        return profile


def calibrate(layer_batches, configs, layer_ids=None, model_id="model") -> CalibrationProfile:
    """Layer-by-layer calibration.

    ``layer_batches[l]`` is an iterable of ActivationTensors, or a callable
    taking the profile calibrated so far and returning one; the callable
    form lets layer l see the decoded outputs of layers before it.
    """
    layer_batches, configs = list(layer_batches), list(configs)
    if len(layer_batches) != len(configs):
        raise ValidationError(f"{len(layer_batches)} layer batches but {len(configs)} configs")
    layer_ids = [f"layer{i}" for i in range(len(configs))] if layer_ids is None else [str(i) for i in layer_ids]
    if len(set(layer_ids)) != len(layer_ids) or len(layer_ids) != len(configs):
        raise ValidationError(f"layer ids must be unique, one per config: {layer_ids}")

    profile = CalibrationProfile((), model_id)
    for layer_id, batch, config in zip(layer_ids, layer_batches, configs):
        if callable(batch):
            batch = batch(profile)
        entry = build_entry(layer_id, batch, config)
        profile = CalibrationProfile(profile.entries + (entry,), model_id)
    return profile


# ---------------------------------------------------------------------------
# Container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompressedActivation:
    dims: tuple
    block_shape: BlockShape
    step: float
    clip: float
    keep: int
    codebook_scope: str
    codebooks: tuple
    symbol_count: int
    stream: BitStream
    transform_mode: int = TRANSFORM_EXTERNAL
    transform_matrix: Optional[np.ndarray] = None  # keep x n rows, float32 or int8
    transform_peak: float = 0.0
    transform_mean: Optional[np.ndarray] = None

    @property
    def value_count(self) -> int:
        return int(np.prod(self.dims))

    @property
    def payload_bits(self) -> int:
        return self.stream.bit_count

    @property
    def header_bits(self) -> int:
        return 8 * len(self._header_bytes())

    def _header_bytes(self) -> bytes:
        height, width, channels = self.dims
        shape = self.block_shape
        parts = [
            _HEADER.pack(
                STREAM_MAGIC, STREAM_VERSION, height, width, channels,
                shape.bw, shape.bh, shape.bc, self.step, self.clip, self.keep, self.transform_mode,
            )
        ]
        if self.transform_mode == TRANSFORM_FLOAT32:
            parts.append(self.transform_matrix.astype("<f4").tobytes())
            parts.append(self.transform_mean.astype("<f4").tobytes())
        elif self.transform_mode == TRANSFORM_INT8:
            parts.append(self.transform_matrix.astype(np.int8).tobytes())
            parts.append(struct.pack("<f", self.transform_peak))
            parts.append(self.transform_mean.astype("<f4").tobytes())
        parts.append(_SCOPE.pack(CODEBOOK_SCOPES.index(self.codebook_scope), len(self.codebooks)))
        parts.extend(cb.to_bytes() for cb in self.codebooks)
        parts.append(_COUNT.pack(self.symbol_count))
        return b"".join(parts)

    def to_bytes(self) -> bytes:
        return self._header_bytes() + self.stream.data

    @classmethod
    def from_bytes(cls, raw: bytes):
        if len(raw) < 4 or raw[:4] != STREAM_MAGIC:
            raise BadMagic(f"not an ATCS stream (magic {bytes(raw[:4])!r})")
        if len(raw) < _HEADER.size:
            raise Truncated("stream header is truncated")
        (_, version, height, width, channels, bw, bh, bc, step, clip, keep, mode) = _HEADER.unpack_from(raw)
        if version != STREAM_VERSION:
            raise VersionMismatch(f"stream version {version}, expected {STREAM_VERSION}")
        try:
            shape = BlockShape(bw, bh, bc)
            QuantizerSpec(step, clip)
        except ValidationError as exc:
            raise FormatError(f"bad stream header: {exc}") from exc
        if min(height, width, channels) < 1 or not 1 <= keep <= shape.n:
            raise FormatError(f"bad stream header: dims {(height, width, channels)}, keep {keep}")
        offset = _HEADER.size

        def take(size, what):
            nonlocal offset
            if len(raw) < offset + size:
                raise Truncated(f"stream {what} is truncated")
            chunk = raw[offset:offset + size]
            offset += size
            return chunk

        matrix, peak, mean = None, 0.0, None
        n = shape.n
        if mode == TRANSFORM_FLOAT32:
            matrix = np.frombuffer(take(4 * keep * n, "transform"), dtype="<f4").reshape(keep, n)
            mean = np.frombuffer(take(4 * n, "transform mean"), dtype="<f4")
        elif mode == TRANSFORM_INT8:
            matrix = np.frombuffer(take(keep * n, "transform"), dtype=np.int8).reshape(keep, n)
            (peak,) = struct.unpack("<f", take(4, "transform scale"))
            mean = np.frombuffer(take(4 * n, "transform mean"), dtype="<f4")
        elif mode != TRANSFORM_EXTERNAL:
            raise FormatError(f"unknown transform mode {mode}")
        if matrix is not None and not (np.isfinite(mean).all() and np.isfinite(np.asarray(matrix, np.float64)).all()):
            raise FormatError("embedded transform holds NaN or Inf")

        scope_code, count = _SCOPE.unpack(take(_SCOPE.size, "codebook table"))
        if scope_code >= len(CODEBOOK_SCOPES):
            raise FormatError(f"unknown codebook scope code {scope_code}")
        scope = CODEBOOK_SCOPES[scope_code]
        expected = 1 if scope == "layer" else keep
        if count != expected:
            raise FormatError(f"{scope} scope needs {expected} codebooks, stream has {count}")
        codebooks = []
        for _ in range(count):
            codebook, offset = HuffmanCodebook.from_bytes(raw, offset)
            codebooks.append(codebook)
        (symbol_count,) = _COUNT.unpack(take(_COUNT.size, "symbol count"))
        payload = bytes(raw[offset:])
        return cls(
            dims=(height, width, channels),
            block_shape=shape,
            step=step,
            clip=clip,
            keep=keep,
            codebook_scope=scope,
            codebooks=tuple(codebooks),
            symbol_count=symbol_count,
            # The exact bit count is not stored; the decoder validates the pad.
            stream=BitStream(payload, 8 * len(payload)),
            transform_mode=mode,
            transform_matrix=matrix,
            transform_peak=peak,
            transform_mean=mean,
        )

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Encode / decode
# ---------------------------------------------------------------------------

def _project(t: ActivationTensor, entry: ProfileEntry) -> np.ndarray:
    if t.channels != entry.channels:
        raise ValidationError(f"tensor has {t.channels} channels, layer {entry.layer_id} expects {entry.channels}")
    if entry.config.relu_placement == "before-encoder":
        t = _apply_relu(t)
    blocks = partition(t, entry.config.block_shape, fill=entry.pad_fill).blocks
    return klt_forward(entry.coding_transform, blocks)


def _embedded_transform(entry):
    config = entry.config
    if not config.embed_transform:
        return {}
    mean = entry.coding_transform.mean.astype(np.float32)
    if entry.quantized_transform is not None:
        return {
            "transform_mode": TRANSFORM_INT8,
            "transform_matrix": entry.quantized_transform.values[:entry.keep].copy(),
            "transform_peak": entry.quantized_transform.peak,
            "transform_mean": mean,
        }
    return {
        "transform_mode": TRANSFORM_FLOAT32,
        "transform_matrix": entry.coding_transform.matrix[:entry.keep].astype(np.float32),
        "transform_mean": mean,
    }


def encode_coefficients(coeffs, dims, entry: ProfileEntry) -> CompressedActivation:
    """Quantize and entropy-code transform-domain blocks (one row per block)."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    if coeffs.shape[1] != entry.n:
        raise ValidationError(f"coefficient rows of length {coeffs.shape[1]}, layer expects {entry.n}")
    shape = entry.config.block_shape
    height, width, channels = dims
    blocks = -(-height // shape.bh) * -(-width // shape.bw) * -(-channels // shape.bc)
    if coeffs.shape[0] != blocks:
        raise ValidationError(f"{coeffs.shape[0]} coefficient blocks for dims {tuple(dims)}, expected {blocks}")
    symbols = _quantized_coefficients(coeffs, entry)
    if entry.config.codebook_scope == "layer":
        stream = encode(symbols.reshape(-1), entry.codebooks[0])
    else:
        stream = encode_blocks(symbols, entry.codebooks)
    return CompressedActivation(
        dims=tuple(int(d) for d in dims),
        block_shape=shape,
        step=entry.quantizer.step,
        clip=entry.quantizer.clip,
        keep=entry.keep,
        codebook_scope=entry.config.codebook_scope,
        codebooks=entry.codebooks,
        symbol_count=int(symbols.size),
        stream=stream,
        **_embedded_transform(entry),
    )


def encode_layer(t: ActivationTensor, entry: ProfileEntry) -> CompressedActivation:
    return encode_coefficients(_project(t, entry), t.dims, entry)


def _check_against_entry(ca, entry):
    mismatches = []
    if ca.block_shape != entry.config.block_shape:
        mismatches.append(f"block shape {ca.block_shape} vs {entry.config.block_shape}")
    if ca.keep != entry.keep:
        mismatches.append(f"keep {ca.keep} vs {entry.keep}")
    if (ca.step, ca.clip) != (entry.quantizer.step, entry.quantizer.clip):
        mismatches.append(f"quantizer ({ca.step}, {ca.clip}) vs ({entry.quantizer.step}, {entry.quantizer.clip})")
    if ca.dims[2] != entry.channels:
        mismatches.append(f"channels {ca.dims[2]} vs {entry.channels}")
    if mismatches:
        raise ValidationError(f"stream does not match layer {entry.layer_id}: " + "; ".join(mismatches))


def _stream_transform(ca, entry):
    if ca.transform_mode == TRANSFORM_EXTERNAL:
        if entry is None:
            raise ValidationError("stream carries no transform; a profile entry is required")
        return entry.coding_transform
    n = ca.block_shape.n
    rows = np.asarray(ca.transform_matrix, dtype=np.float64)
    if ca.transform_mode == TRANSFORM_INT8:
        rows = rows * float(np.float32(ca.transform_peak)) / _INT8_SCALE
    matrix = np.zeros((n, n))
    matrix[:ca.keep] = rows
    return KLTransform(matrix, np.asarray(ca.transform_mean, dtype=np.float64), np.zeros(n))


def decode_symbols(ca: CompressedActivation) -> np.ndarray:
    """Bin indices of ``ca`` as a (blocks, keep) array."""
    shape = ca.block_shape
    height, width, channels = ca.dims
    blocks = -(-height // shape.bh) * -(-width // shape.bw) * -(-channels // shape.bc)
    if ca.symbol_count != blocks * ca.keep:
        raise CorruptStream(f"header symbol count {ca.symbol_count} != {blocks} blocks x {ca.keep} kept")
    if ca.codebook_scope == "layer":
        return decode(ca.stream, ca.codebooks[0], ca.symbol_count).reshape(blocks, ca.keep)
    return decode_blocks(ca.stream, ca.codebooks, blocks)


def decode_layer(ca: CompressedActivation, entry: Optional[ProfileEntry] = None, raw=False) -> ActivationTensor:
    """VLD, dequantize, zero-fill truncated coefficients, inverse KLT, crop.

    ReLU is applied only when ``entry`` places the nonlinearity after the
    decoder and ``raw`` is false. A raw decode of a float32-transform stream
    whose dims are block multiples re-encodes to the same bytes.
    """
    if entry is not None:
        _check_against_entry(ca, entry)
    transform = _stream_transform(ca, entry)
    symbols = decode_symbols(ca)
    coeffs = np.zeros((symbols.shape[0], ca.block_shape.n))
    coeffs[:, :ca.keep] = dequantize(symbols, QuantizerSpec(ca.step, ca.clip))
    blocks = klt_inverse(transform, coeffs)
    t = reassemble(BlockSequence(blocks, ca.dims, ca.block_shape, PaddingPolicy(None, 0)))
    if not raw and entry is not None and entry.config.relu_placement == "after-decoder":
        t = _apply_relu(t)
    return t


def measured_rate(ca: CompressedActivation, include_header=False) -> float:
    bits = ca.payload_bits + (ca.header_bits if include_header else 0)
    return bits / ca.value_count


# ---------------------------------------------------------------------------
# Folding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvParams:
    """Convolution bank: weights (out, in, kh, kw) and bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if weights.ndim != 4 or bias.size != weights.shape[0]:
            raise ValidationError(f"conv weights {weights.shape} do not match bias of {bias.size}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, k), dtype=np.float64).reshape(-1) for k in ("gamma", "beta", "mean", "std")]
        if len({a.size for a in arrays}) != 1:
            raise ValidationError("batch-norm parameters differ in length")
        if (arrays[3] <= 0).any():
            raise ValidationError("batch-norm running std must be positive")
        for name, a in zip(("gamma", "beta", "mean", "std"), arrays):
            object.__setattr__(self, name, a)

    @classmethod
    def identity(cls, channels):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))


def fold(conv: ConvParams, bn: BatchNormParams, T: KLTransform, block_shape: BlockShape) -> ConvParams:
    """Merge conv, BN and a 1x1xC KLT into one convolution.

    W' = T diag(gamma/s) W per tap, b' = T (diag(gamma/s)(b - m) + beta - mu).
    """
    channels = conv.out_channels
    if not (block_shape.is_channel_vector and block_shape.bc == channels):
        raise ValidationError(f"folding needs 1x1x{channels} blocks, got {block_shape}")
    if T.n != channels or bn.gamma.size != channels:
        raise ValidationError(f"transform size {T.n} / BN size {bn.gamma.size} vs {channels} conv outputs")
    gain = bn.gamma / bn.std
    mixed = T.matrix * gain[None, :]
    weights = (mixed @ conv.weights.reshape(channels, -1)).reshape(conv.weights.shape)
    bias = T.matrix @ (gain * (conv.bias - bn.mean) + bn.beta - T.mean)
    return ConvParams(weights, bias)
