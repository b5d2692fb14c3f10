"""Differentiable primitives shared by the losses and the augmenter blocks.

All functions accept and return autodiff Tensors (plain arrays are wrapped as
constants), so any scalar composed from them is exactly differentiable via
``autodiff.grad``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# variance guard inside the LayerNorm square root
LN_EPS = 1e-5
# norms below this are treated as zero vectors and rejected
NORM_FLOOR = 1e-12


@dataclass
class DiagGaussian:
    """Diagonal Gaussian: element-wise mean and standard deviation."""

    mean: Tensor
    stddev: Tensor

    def __post_init__(self):
        self.mean = ad.as_tensor(self.mean)
        self.stddev = ad.as_tensor(self.stddev)
        if self.mean.shape != self.stddev.shape:
            raise ValueError(
                f"mean/stddev shape mismatch: {self.mean.shape} vs {self.stddev.shape}")
        if not np.all(self.stddev.data > 0):
            raise ValueError("stddev entries must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def cosine_similarity(a, b) -> Tensor:
    """cos(a, b) for two vectors; zero-norm inputs are data bugs, not 0/0."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"expected equal-dim vectors, got {a.shape} and {b.shape}")
    for name, t in (("a", a), ("b", b)):
        if np.linalg.norm(t.data) < NORM_FLOOR:
            raise ValueError(f"cosine_similarity: argument {name!r} has zero norm")
    dot = (a * b).sum()
    return dot / (ad.sqrt((a * a).sum()) * ad.sqrt((b * b).sum()))


def cosine_matrix(src, tgt) -> Tensor:
    """All-pairs cosine similarities: rows of ``src`` against rows of ``tgt``.

    Returns the B_s x B_t similarity matrix used by the batch losses.
    """
    src, tgt = ad.as_tensor(src), ad.as_tensor(tgt)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[1] != tgt.shape[1]:
        raise ValueError(f"expected (B, d) matrices, got {src.shape} and {tgt.shape}")
    for name, t in (("src", src), ("tgt", tgt)):
        norms = np.linalg.norm(t.data, axis=1)
        bad = np.nonzero(norms < NORM_FLOOR)[0]
        if bad.size:
            raise ValueError(f"cosine_matrix: zero-norm {name} row(s) {bad.tolist()}")
    sn = src / ad.sqrt((src * src).sum(axis=1, keepdims=True))
    tn = tgt / ad.sqrt((tgt * tgt).sum(axis=1, keepdims=True))
    return sn @ ad.transpose(tn)


def log_softmax_row(scores, index: int) -> Tensor:
    """scores[index] - logsumexp(scores), max-shifted for stability."""
    scores = ad.as_tensor(scores)
    if scores.ndim != 1:
        raise ValueError(f"expected a vector of scores, got shape {scores.shape}")
    n = scores.shape[0]
    if not 0 <= index < n:
        raise IndexError(f"index {index} out of range for {n} scores")
    return scores[index] - ad.logsumexp(scores, axis=-1)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = ad.as_tensor(x), ad.as_tensor(gain), ad.as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ad.sqrt(var + eps) * gain + bias


def wasserstein2_sq(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    """Squared 2-Wasserstein distance between diagonal Gaussians.

    For diagonal covariances the Bures term collapses elementwise, leaving
    ||mu_p - mu_q||^2 + ||sigma_p - sigma_q||^2.
    """
    if p.mean.shape != q.mean.shape:
        raise ValueError(
            f"dimension mismatch: {p.mean.shape} vs {q.mean.shape}")
    dm = p.mean - q.mean
    ds = p.stddev - q.stddev
    return (dm * dm).sum() + (ds * ds).sum()


def wasserstein2_sq_pairwise(mu_a, sig_a, mu_b, sig_b) -> Tensor:
    """B x B matrix of wasserstein2_sq over row pairs.

    Computed from explicit broadcast differences (exact zeros for identical
    rows; the dot-product expansion loses that to cancellation).
    """
    mu_a, sig_a = ad.as_tensor(mu_a), ad.as_tensor(sig_a)
    mu_b, sig_b = ad.as_tensor(mu_b), ad.as_tensor(sig_b)
    if mu_a.ndim != 2 or mu_a.shape != sig_a.shape or mu_b.shape != sig_b.shape \
            or mu_a.shape[1] != mu_b.shape[1]:
        raise ValueError(
            f"expected aligned (B, d) stacks, got {mu_a.shape}/{sig_a.shape} "
            f"and {mu_b.shape}/{sig_b.shape}")
    ba, bb, d = mu_a.shape[0], mu_b.shape[0], mu_a.shape[1]
    dm = mu_a.reshape((ba, 1, d)) - mu_b.reshape((1, bb, d))
    ds = sig_a.reshape((ba, 1, d)) - sig_b.reshape((1, bb, d))
    return (dm * dm).sum(axis=2) + (ds * ds).sum(axis=2)
