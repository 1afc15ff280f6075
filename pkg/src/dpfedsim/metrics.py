"""Training diagnostics: norm histograms, clip-factor statistics,
empirical update sensitivity, and sharpness/landscape probes.

Probes are read-only: they never modify the model or data they inspect.
Directions use per-layer filter normalization (each layer block of the
random direction rescaled to that layer's weight norm) for model probes,
or plain global unit normalization for generic loss callables.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .rng import philox


@dataclass
class NormHistogram:
    """Histogram of pre-clip update norms; out-of-range values are clamped
    into the end bins."""

    edges: np.ndarray
    counts: np.ndarray
    round_index: int | None = None


def default_norm_edges(clip_bound: float, bins: int = 32) -> np.ndarray:
    """Uniform bins over [0, 2C], centering the clip threshold."""
    return np.linspace(0.0, 2.0 * clip_bound, bins + 1)


def _pre_clip_norms(reports: Sequence) -> np.ndarray:
    if len(reports) and hasattr(reports[0], "pre_clip_norm"):
        return np.array([r.pre_clip_norm for r in reports], dtype=np.float64)
    return np.asarray(reports, dtype=np.float64)


def update_norm_histogram(
    reports: Sequence, edges: np.ndarray, round_index: int | None = None
) -> NormHistogram:
    """Histogram of per-client pre-clip norms (reports or raw values)."""
    edges = np.asarray(edges, dtype=np.float64)
    if len(edges) < 2:
        raise ValueError("need at least 2 histogram edges")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("histogram edges must be strictly increasing")
    norms = _pre_clip_norms(reports)
    clamped = np.clip(norms, edges[0], np.nextafter(edges[-1], -np.inf))
    counts, _ = np.histogram(clamped, bins=edges)
    return NormHistogram(edges=edges, counts=counts, round_index=round_index)


def histogram_csv(hist: NormHistogram) -> str:
    """Comma-separated export with a self-describing header line."""
    round_part = f" round={hist.round_index}" if hist.round_index is not None else ""
    lines = [
        f"# update-norm histogram:{round_part} bins={len(hist.counts)} "
        f"range=[{float(hist.edges[0])!r},{float(hist.edges[-1])!r}]",
        "bin_left,bin_right,count",
    ]
    for left, right, count in zip(hist.edges, hist.edges[1:], hist.counts):
        lines.append(f"{float(left)!r},{float(right)!r},{int(count)}")
    return "\n".join(lines) + "\n"


def clip_factor_stats(reports: Sequence) -> tuple[float, float, float]:
    """(mean clip factor, mean absolute deviation, mean pre-clip norm)
    over the sampled clients of one round."""
    factors = np.array([r.clip_factor for r in reports], dtype=np.float64)
    alpha_bar = float(np.mean(factors))
    alpha_tilde = float(np.mean(np.abs(factors - alpha_bar)))
    return alpha_bar, alpha_tilde, float(np.mean(_pre_clip_norms(reports)))


# ---------------------------------------------------------------------------
# Sharpness and landscape probes.

def probe_direction(
    w: np.ndarray,
    generator: np.random.Generator,
    layer_blocks: Sequence[tuple[int, int]] | None = None,
) -> np.ndarray:
    """One random probe direction.

    With layer blocks, each block is rescaled to the corresponding weight
    block norm (filter normalization); otherwise the whole direction is
    normalized to unit length.
    """
    direction = generator.normal(size=w.shape)
    if layer_blocks is None:
        return direction / np.linalg.norm(direction)
    for start, end in layer_blocks:
        block_norm = np.linalg.norm(direction[start:end])
        if block_norm > 0:
            direction[start:end] *= np.linalg.norm(w[start:end]) / block_norm
    return direction


@dataclass
class SharpnessProbe:
    radii: np.ndarray
    mean_increase: np.ndarray
    directions: int
    base_loss: float


def sharpness_probe_fn(
    w: np.ndarray,
    loss_fn: Callable[[np.ndarray], float],
    radii: Sequence[float],
    n_directions: int,
    seed: int,
    layer_blocks: Sequence[tuple[int, int]] | None = None,
) -> SharpnessProbe:
    """Mean loss(w + r*u) - loss(w) over sampled directions u, per radius."""
    radii = np.asarray(radii, dtype=np.float64)
    if 0.0 not in radii:
        raise ValueError("radii must include 0")
    if n_directions < 1:
        raise ValueError("need at least one probe direction")
    generator = philox(seed)
    base = float(loss_fn(w))
    increase = np.zeros(len(radii), dtype=np.float64)
    for _ in range(n_directions):
        direction = probe_direction(w, generator, layer_blocks)
        for i, r in enumerate(radii):
            increase[i] += loss_fn(w + r * direction) - base
    return SharpnessProbe(
        radii=radii,
        mean_increase=increase / n_directions,
        directions=n_directions,
        base_loss=base,
    )


def sharpness_probe(
    w: np.ndarray,
    arch: nn.MlpArchitecture,
    data: nn.Batch,
    radii: Sequence[float],
    n_directions: int,
    seed: int,
) -> SharpnessProbe:
    """Model-loss sharpness probe with per-layer filter normalization."""
    loss_fn = lambda v: nn.evaluate(v, arch, data)[0]
    return sharpness_probe_fn(
        w, loss_fn, radii, n_directions, seed, layer_blocks=arch.layer_blocks()
    )


def landscape_slice(
    w: np.ndarray,
    arch: nn.MlpArchitecture,
    data: nn.Batch,
    extent: float,
    resolution: int,
    seed: int,
) -> np.ndarray:
    """Loss on the grid w + a*u + b*v for two filter-normalized directions.

    Rows index a, columns index b, both over linspace(-extent, extent).
    With odd resolution the center cell is exactly loss(w).
    """
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    if extent <= 0:
        raise ValueError(f"extent must be > 0, got {extent}")
    generator = philox(seed)
    blocks = arch.layer_blocks()
    u = probe_direction(w, generator, blocks)
    v = probe_direction(w, generator, blocks)
    coords = np.linspace(-extent, extent, resolution)
    grid = np.empty((resolution, resolution), dtype=np.float64)
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            grid[i, j], _ = nn.evaluate(w + a * u + b * v, arch, data)
    return grid


# ---------------------------------------------------------------------------
# Empirical sensitivity of the local update (one-sample swap).

def empirical_sensitivity(
    client_id: int,
    global_w: np.ndarray,
    config,
    train,
    partition,
    swap_seed: int,
) -> float:
    """Squared L2 distance between local updates on one-sample-adjacent shards.

    Runs the configured method's local round twice from the same model,
    with identical seeds, on the client's shard and on a copy where one
    example is replaced by another training example.  Clipping and noise
    are disabled (the update is measured before the DP operations).
    """
    from . import federation  # local import: federation uses metrics for stats

    shard_idx = partition.shards[client_id]
    if len(shard_idx) < 2:
        raise ValueError("sensitivity probe needs a shard with at least 2 examples")
    swap_rng = philox(swap_seed)
    position = int(swap_rng.integers(len(shard_idx)))
    replacement = int(swap_rng.integers(len(train)))
    adjacent_idx = shard_idx.copy()
    adjacent_idx[position] = replacement

    probe_privacy = dataclasses.replace(
        config.privacy, noise_multiplier=0.0, clip_bound=np.inf
    )
    probe_config = dataclasses.replace(config, privacy=probe_privacy)

    updates = []
    for indices in (shard_idx, adjacent_idx):
        shard = nn.Batch(
            train.inputs[indices], train.labels[indices], train.num_classes
        )
        report = federation.local_round(client_id, 0, global_w, shard, probe_config)
        updates.append(report.raw_update)
    return float(np.sum((updates[0] - updates[1]) ** 2))
