"""Embedding and recovery of chaotic watermark signals in weight tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chaos import ChaoticParams, generate_chaotic_sequence, require_valid
from .tensor_store import (
    FormatError,
    ModelWeights,
    WatermarkManifest,
    atomic_write_text,
    flatten_layer,
    new_manifest,
)


class ZeroRangeError(ValueError):
    """All layer values are identical, so equal-width bins are undefined."""


@dataclass
class DeltaSequence:
    """Element-wise difference between two models on one flattened layer."""

    values: np.ndarray
    layer: str
    suspect_count: int
    reference_count: int


@dataclass
class DensityData:
    """Normalized histogram of one layer's values."""

    bin_edges: np.ndarray
    counts: np.ndarray
    densities: np.ndarray
    label: str = ""


def embed(
    reference: ModelWeights,
    layer: str,
    params: ChaoticParams,
    model_id: str = "",
) -> tuple[ModelWeights, WatermarkManifest]:
    """Add epsilon-scaled chaotic noise to one layer of a model.

    Returns the marked model plus the manifest needed to verify it later.
    The marked layer is produced in 64-bit precision regardless of the
    stored dtype; every other tensor is passed through untouched. A zero
    params.length is filled in from the layer's element count; any other
    mismatch is an error.
    """
    tensor = reference.layer(layer)
    if params.length == 0:
        params = ChaoticParams(params.r, params.x0, params.epsilon, tensor.size)
    elif params.length != tensor.size:
        raise FormatError(
            f"params.length {params.length} != element count {tensor.size} "
            f"of layer {layer!r}"
        )
    require_valid(params)
    signal = generate_chaotic_sequence(params)
    flat = flatten_layer(reference, layer).astype(np.float64)
    marked = flat + params.epsilon * signal
    watermarked = reference.with_layer(layer, marked.reshape(tensor.shape))
    digest = reference.digest()
    manifest = new_manifest(model_id or f"cwmt-{digest[:12]}", layer, params, digest)
    return watermarked, manifest


def extract(suspect: ModelWeights, reference: ModelWeights, layer: str) -> DeltaSequence:
    """Difference suspect minus reference on one layer, flattened row-major.

    Verification against the pre-watermark reference isolates the embedded
    signal (plus whatever post-embedding training added). Differencing two
    sibling snapshots instead is a legitimate diagnostic, but the result
    then mixes both models' signals.
    """
    suspect_tensor = suspect.layer(layer)
    reference_tensor = reference.layer(layer)
    if suspect_tensor.shape != reference_tensor.shape:
        raise FormatError(
            f"layer {layer!r} shape mismatch: suspect {suspect_tensor.shape} "
            f"vs reference {reference_tensor.shape}"
        )
    delta = flatten_layer(suspect, layer).astype(np.float64) - flatten_layer(
        reference, layer
    ).astype(np.float64)
    return DeltaSequence(
        values=delta,
        layer=layer,
        suspect_count=suspect_tensor.size,
        reference_count=reference_tensor.size,
    )


def density_histogram(
    weights: ModelWeights,
    layer: str,
    bin_count: int = 100,
    value_range: tuple[float, float] | None = None,
    label: str = "",
) -> DensityData:
    """Equal-width density histogram of one layer's values.

    Bins are half-open with the last bin closed. By default the grid spans
    the layer's own [min, max]; pass value_range to histogram several models
    onto a shared grid. Densities integrate to exactly 1 over the grid.
    """
    if bin_count < 2:
        raise ValueError(f"bin_count must be at least 2, got {bin_count}")
    values = flatten_layer(weights, layer).astype(np.float64)
    if value_range is None:
        low, high = float(values.min()), float(values.max())
    else:
        low, high = float(value_range[0]), float(value_range[1])
    if not high > low:
        raise ZeroRangeError(
            f"layer {layer!r} spans [{low}, {high}]; equal-width bins need a "
            "positive value range"
        )
    counts, edges = np.histogram(values, bins=bin_count, range=(low, high))
    total = int(counts.sum())
    if total == 0:
        raise ZeroRangeError(f"no values of layer {layer!r} fall inside [{low}, {high}]")
    width = (high - low) / bin_count
    densities = counts / (total * width)
    return DensityData(bin_edges=edges, counts=counts, densities=densities, label=label)


def density_l1(first: DensityData, second: DensityData) -> float:
    """Integrated absolute difference between two densities on one grid."""
    if first.bin_edges.shape != second.bin_edges.shape or not np.allclose(
        first.bin_edges, second.bin_edges
    ):
        raise ValueError("densities were built on different bin grids")
    widths = np.diff(first.bin_edges)
    return float(np.sum(np.abs(first.densities - second.densities) * widths))


def save_density_table(density: DensityData, dest) -> None:
    """Write the histogram as CSV: bin_left, bin_right, count, density."""
    lines = ["bin_left,bin_right,count,density"]
    for i in range(density.counts.size):
        lines.append(
            f"{float(density.bin_edges[i])!r},{float(density.bin_edges[i + 1])!r},"
            f"{int(density.counts[i])},{float(density.densities[i])!r}"
        )
    atomic_write_text(dest, "\n".join(lines) + "\n")
