"""Discrete codebooks: exact nearest-neighbor quantization, straight-through
gradients, EMA updates, dead-entry revival, and utilization accounting.

One Codebook class serves all four code spaces of the tokenizer (grid features,
Gaussian geometry, Gaussian features, opacity levels); only the dimension and
size differ. Quantization distances are always computed in float64 so the
accelerated path agrees with a brute-force scan on every query, not just
approximately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import torch

# Defensive smoothing for assignment-count divisions.
LAPLACE_EPS = 1e-5
DEFAULT_DECAY = 0.99
DEFAULT_STALE_THRESHOLD = 256
REVIVAL_NOISE_STD = 0.01

_QUANTIZE_CHUNK = 4096


@dataclass
class Codebook:
    """K code vectors of dimension d plus EMA accumulators and usage counters."""

    entries: torch.Tensor                       # (K, d)
    decay: float = DEFAULT_DECAY
    ema_count: torch.Tensor = None              # (K,)
    ema_sum: torch.Tensor = None                # (K, d)
    hit_count: torch.Tensor = None              # (K,) lifetime assignments
    stale_steps: torch.Tensor = None            # (K,) updates since last assignment

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] < 1 or self.entries.shape[1] < 1:
            raise ValueError(f"entries must be a (K>=1, d>=1) matrix, got {tuple(self.entries.shape)}")
        if not (0.0 <= self.decay < 1.0) and self.decay != 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")
        k, d = self.entries.shape
        if self.ema_count is None:
            self.ema_count = torch.zeros(k, dtype=self.entries.dtype)
        if self.ema_sum is None:
            self.ema_sum = torch.zeros(k, d, dtype=self.entries.dtype)
        if self.hit_count is None:
            self.hit_count = torch.zeros(k, dtype=torch.int64)
        if self.stale_steps is None:
            self.stale_steps = torch.zeros(k, dtype=torch.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def init_from_samples(
        cls,
        vectors: torch.Tensor,
        num_entries: int,
        rng: np.random.Generator,
        decay: float = DEFAULT_DECAY,
    ) -> "Codebook":
        """Seed entries by uniform sampling from a batch of raw vectors."""
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise ValueError("need a nonempty (N, d) matrix of candidate vectors")
        picks = rng.integers(0, vectors.shape[0], size=num_entries)
        entries = vectors.detach()[torch.from_numpy(picks)].clone()
        return cls(entries=entries, decay=decay)


@dataclass
class QuantizationResult:
    indices: torch.Tensor          # (N,) int64
    quantized: torch.Tensor        # (N, d), rows of the codebook
    commitment_loss: torch.Tensor  # scalar, carries gradient to the inputs


def tie_break(distances) -> int:
    """Lowest index among entries achieving the exact minimum distance."""
    distances = np.asarray(distances)
    if distances.size == 0:
        raise ValueError("distance list must be nonempty")
    minimum = distances.min()
    return int(np.nonzero(distances == minimum)[0][0])


def quantize_nn(vectors: torch.Tensor, codebook: Codebook, beta: float = 0.25) -> QuantizationResult:
    """Exact nearest-entry lookup under squared Euclidean distance.

    Ties resolve to the smallest index. The commitment loss is
    beta * mean_n ||v_n - sg(q_n)||^2 (sum over dimensions, mean over vectors)
    and is differentiable with respect to ``vectors``.
    """
    if vectors.ndim != 2:
        raise ValueError(f"vectors must be (N, d), got shape {tuple(vectors.shape)}")
    if vectors.shape[1] != codebook.dim:
        raise ValueError(
            f"vector dimension {vectors.shape[1]} does not match codebook dimension {codebook.dim}"
        )
    entries64 = codebook.entries.detach().to(torch.float64)
    chunks = []
    with torch.no_grad():
        for start in range(0, vectors.shape[0], _QUANTIZE_CHUNK):
            block = vectors[start : start + _QUANTIZE_CHUNK].detach().to(torch.float64)
            d2 = (block[:, None, :] - entries64[None, :, :]).pow(2).sum(-1)
            chunks.append(d2.argmin(dim=1))
    indices = torch.cat(chunks) if chunks else torch.zeros(0, dtype=torch.int64)
    quantized = codebook.entries[indices]
    commitment = beta * (vectors - quantized.detach().to(vectors.dtype)).pow(2).sum(-1).mean() \
        if vectors.shape[0] > 0 else vectors.sum() * 0.0
    return QuantizationResult(indices=indices, quantized=quantized, commitment_loss=commitment)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, raw, quantized):
        return quantized.clone()

    @staticmethod
    def backward(ctx, grad_output):
        # Identity Jacobian toward the raw input, nothing toward the quantized side.
        return grad_output, None


def straight_through(raw: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value is ``quantized`` bitwise; gradient passes to ``raw`` unchanged."""
    if raw.shape != quantized.shape:
        raise ValueError(f"shape mismatch: {tuple(raw.shape)} vs {tuple(quantized.shape)}")
    return _StraightThrough.apply(raw, quantized)


def ema_update(
    codebook: Codebook,
    indices: torch.Tensor,
    vectors: torch.Tensor,
    decay: Optional[float] = None,
) -> Codebook:
    """Move assigned entries toward their batch mean: e <- m*e + (1-m)*mean.

    Entries with no assignment this step stay bitwise unchanged. Updates the
    EMA accumulators, lifetime hit counts, and staleness counters in place.
    Callers must serialize updates (single designated updater).
    """
    m = codebook.decay if decay is None else decay
    k, d = codebook.entries.shape
    vectors = vectors.detach().to(codebook.entries.dtype)
    counts = torch.bincount(indices, minlength=k).to(codebook.entries.dtype)
    sums = torch.zeros(k, d, dtype=codebook.entries.dtype)
    sums.index_add_(0, indices, vectors)
    assigned = counts > 0
    safe_counts = counts + LAPLACE_EPS * (~assigned).to(counts.dtype)
    means = sums / safe_counts[:, None]
    with torch.no_grad():
        codebook.entries[assigned] = m * codebook.entries[assigned] + (1.0 - m) * means[assigned]
        codebook.ema_count.mul_(m).add_(counts, alpha=1.0 - m)
        codebook.ema_sum.mul_(m).add_(sums, alpha=1.0 - m)
        codebook.hit_count += counts.to(torch.int64)
        codebook.stale_steps[assigned] = 0
        codebook.stale_steps[~assigned] += 1
    return codebook


def reinit_dead_entries(
    codebook: Codebook,
    candidate_vectors: torch.Tensor,
    stale_threshold: Union[int, float, None],
    rng: np.random.Generator,
) -> int:
    """Overwrite entries stale for >= stale_threshold updates with noisy candidates.

    Each revived entry becomes a uniformly sampled candidate plus N(0, 0.01^2)
    noise. Pass ``None`` or ``math.inf`` to disable revival. Returns the number
    of revived entries.
    """
    if stale_threshold is None or (isinstance(stale_threshold, float) and math.isinf(stale_threshold)):
        return 0
    if candidate_vectors.ndim != 2 or candidate_vectors.shape[0] == 0:
        raise ValueError("candidate pool must be a nonempty (N, d) matrix")
    stale = codebook.stale_steps >= int(stale_threshold)
    count = int(stale.sum().item())
    if count == 0:
        return 0
    picks = rng.integers(0, candidate_vectors.shape[0], size=count)
    noise = rng.normal(0.0, REVIVAL_NOISE_STD, size=(count, codebook.dim))
    revived = candidate_vectors.detach()[torch.from_numpy(picks)].to(codebook.entries.dtype)
    revived = revived + torch.from_numpy(noise).to(codebook.entries.dtype)
    with torch.no_grad():
        codebook.entries[stale] = revived
        codebook.ema_count[stale] = 0
        codebook.ema_sum[stale] = 0
        codebook.stale_steps[stale] = 0
    return count


def utilization(codebook: Codebook, window_indices: torch.Tensor) -> float:
    """Fraction of entries assigned at least once within the given window."""
    if window_indices.numel() == 0:
        raise ValueError("utilization window must be nonempty")
    used = torch.unique(window_indices)
    return used.numel() / codebook.size
