"""Binary weight storage (CWMT container) and watermark key manifests."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from .chaos import ChaoticParams

MAGIC = b"CWMT"
FORMAT_VERSION = 1

# dtype tag -> on-disk element type (always little-endian)
_DTYPE_BY_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorStoreError(Exception):
    pass


class BadMagicError(TensorStoreError):
    pass


class UnsupportedVersionError(TensorStoreError):
    pass


class TruncatedFileError(TensorStoreError):
    pass


class FormatError(TensorStoreError):
    pass


class UnknownLayerError(TensorStoreError):
    pass


def atomic_write_bytes(dest, payload: bytes) -> None:
    """Write via a temp file + rename so a crash never leaves a partial file."""
    dest = os.fspath(dest)
    directory = os.path.dirname(dest) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, dest)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(dest, text: str) -> None:
    atomic_write_bytes(dest, text.encode("utf-8"))


@dataclass
class WeightTensor:
    """One named weight array. Rank >= 1, extents positive, float32/float64."""

    name: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype not in _TAG_BY_DTYPE:
            raise FormatError(
                f"tensor {self.name!r}: unsupported dtype {self.data.dtype}"
            )
        if self.data.ndim < 1:
            raise FormatError(f"tensor {self.name!r}: rank must be at least 1")
        if any(extent <= 0 for extent in self.data.shape):
            raise FormatError(
                f"tensor {self.name!r}: extents must be positive, got {self.data.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)


@dataclass
class ModelWeights:
    """Ordered collection of uniquely named weight tensors."""

    tensors: list[WeightTensor] = field(default_factory=list)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise FormatError(f"duplicate tensor names: {dupes}")

    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    def layer(self, name: str) -> WeightTensor:
        for tensor in self.tensors:
            if tensor.name == name:
                return tensor
        raise UnknownLayerError(f"no layer named {name!r}; have {self.names()}")

    def with_layer(self, name: str, data: np.ndarray) -> "ModelWeights":
        """Return a copy with one layer's data replaced (order preserved)."""
        self.layer(name)
        tensors = [
            WeightTensor(t.name, data) if t.name == name else t for t in self.tensors
        ]
        return ModelWeights(tensors, version=self.version)

    def digest(self) -> str:
        return hashlib.sha256(encode_weights(self)).hexdigest()


def encode_weights(weights: ModelWeights) -> bytes:
    if not weights.tensors:
        raise FormatError("refusing to encode an empty tensor collection")
    parts = [MAGIC, struct.pack("<II", weights.version, len(weights.tensors))]
    for tensor in weights.tensors:
        name = tensor.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise FormatError(f"tensor name too long ({len(name)} bytes)")
        tag = _TAG_BY_DTYPE[tensor.data.dtype]
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BB", tag, tensor.data.ndim))
        parts.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        parts.append(
            np.ascontiguousarray(tensor.data).astype(_DTYPE_BY_TAG[tag]).tobytes()
        )
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise TruncatedFileError(
                f"needed {count} bytes at offset {self.offset}, "
                f"file ends at {len(self.payload)}"
            )
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_weights(payload: bytes) -> ModelWeights:
    reader = _Reader(payload)
    magic = reader.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {magic!r}")
    version, count = reader.unpack("<II")
    if version > FORMAT_VERSION or version < 1:
        raise UnsupportedVersionError(
            f"format version {version} not supported (newest is {FORMAT_VERSION})"
        )
    tensors = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        tag, rank = reader.unpack("<BB")
        if tag not in _DTYPE_BY_TAG:
            raise FormatError(f"tensor {name!r}: unknown dtype tag {tag}")
        if rank < 1:
            raise FormatError(f"tensor {name!r}: rank must be at least 1")
        shape = reader.unpack(f"<{rank}I")
        if any(extent <= 0 for extent in shape):
            raise FormatError(f"tensor {name!r}: non-positive extent in {shape}")
        dtype = _DTYPE_BY_TAG[tag]
        element_count = int(np.prod(shape))
        raw = reader.take(element_count * dtype.itemsize)
        data = np.frombuffer(raw, dtype=dtype).reshape(shape)
        tensors.append(WeightTensor(name, data.astype(dtype.newbyteorder("="))))
    if reader.offset != len(payload):
        raise FormatError(
            f"{len(payload) - reader.offset} trailing bytes after the last tensor"
        )
    return ModelWeights(tensors, version=version)


def save_weights(weights: ModelWeights, dest) -> None:
    atomic_write_bytes(dest, encode_weights(weights))


def load_weights(src) -> ModelWeights:
    with open(src, "rb") as handle:
        return decode_weights(handle.read())


def flatten_layer(weights: ModelWeights, layer: str) -> np.ndarray:
    """Layer values as a 1-D copy in row-major element order."""
    return weights.layer(layer).data.reshape(-1).copy()


def unflatten_layer(weights: ModelWeights, layer: str, flat) -> ModelWeights:
    """Inverse of flatten_layer: rebuild the layer from a row-major vector."""
    tensor = weights.layer(layer)
    flat = np.asarray(flat)
    if flat.ndim != 1 or flat.size != tensor.size:
        raise FormatError(
            f"layer {layer!r} holds {tensor.size} elements, "
            f"got a vector of shape {flat.shape}"
        )
    return weights.with_layer(layer, flat.reshape(tensor.shape))


# --- watermark manifests ---------------------------------------------------

FLATTEN_ORDER = "row-major"


@dataclass
class WatermarkManifest:
    """Secret record tying a key to the layer and reference weights it marked.

    Keep manifests away from distributed weights; whoever holds one can
    re-derive and therefore forge the watermark.
    """

    model_id: str
    layer: str
    params: ChaoticParams
    flatten_order: str = FLATTEN_ORDER
    reference_digest: str = ""
    created_at: str = ""


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH makes embedding runs byte-reproducible when needed.
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    else:
        moment = datetime.now(tz=timezone.utc)
    return moment.isoformat()


def new_manifest(
    model_id: str, layer: str, params: ChaoticParams, reference_digest: str
) -> WatermarkManifest:
    return WatermarkManifest(
        model_id=model_id,
        layer=layer,
        params=params,
        reference_digest=reference_digest,
        created_at=_timestamp(),
    )


def save_manifest(manifest: WatermarkManifest, dest) -> None:
    record = {
        "model_id": manifest.model_id,
        "layer": manifest.layer,
        "r": manifest.params.r,
        "x0": manifest.params.x0,
        "epsilon": manifest.params.epsilon,
        "length": manifest.params.length,
        "flatten_order": manifest.flatten_order,
        "reference_digest": manifest.reference_digest,
        "created_at": manifest.created_at,
    }
    # json writes floats at repr precision, so reals round-trip exactly
    atomic_write_text(dest, json.dumps(record, indent=2) + "\n")


def load_manifest(src) -> WatermarkManifest:
    with open(src, "r", encoding="utf-8") as handle:
        try:
            record = json.load(handle)
        except json.JSONDecodeError as err:
            raise FormatError(f"manifest is not valid JSON: {err}") from err
    if not isinstance(record, dict):
        raise FormatError("manifest must be a JSON object")
    required = (
        "model_id",
        "layer",
        "r",
        "x0",
        "epsilon",
        "length",
        "flatten_order",
        "reference_digest",
        "created_at",
    )
    missing = [key for key in required if key not in record]
    if missing:
        raise FormatError(f"manifest missing fields: {missing}")
    # unknown extra fields are deliberately ignored
    return WatermarkManifest(
        model_id=str(record["model_id"]),
        layer=str(record["layer"]),
        params=ChaoticParams(
            r=float(record["r"]),
            x0=float(record["x0"]),
            epsilon=float(record["epsilon"]),
            length=int(record["length"]),
        ),
        flatten_order=str(record["flatten_order"]),
        reference_digest=str(record["reference_digest"]),
        created_at=str(record["created_at"]),
    )


def check_manifest(manifest: WatermarkManifest, reference: ModelWeights) -> list[str]:
    """Validate a manifest against candidate reference weights.

    Structural problems (absent layer, length mismatch, unknown flatten
    order) raise; a digest mismatch is survivable and comes back as a
    warning so the caller can decide what the difference means.
    """
    tensor = reference.layer(manifest.layer)
    if manifest.flatten_order != FLATTEN_ORDER:
        raise FormatError(
            f"unsupported flatten order {manifest.flatten_order!r}"
        )
    if manifest.params.length != tensor.size:
        raise FormatError(
            f"manifest length {manifest.params.length} != element count "
            f"{tensor.size} of layer {manifest.layer!r}"
        )
    warnings = []
    if manifest.reference_digest and manifest.reference_digest != reference.digest():
        warnings.append(
            "reference digest mismatch: these are not the weights the manifest "
            "was created against (expected "
            f"{manifest.reference_digest[:12]}..., got {reference.digest()[:12]}...)"
        )
    return warnings


def with_length(params: ChaoticParams, length: int) -> ChaoticParams:
    return replace(params, length=length)
