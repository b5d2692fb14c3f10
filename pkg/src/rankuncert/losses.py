"""Training objectives.

The batch contrastive loss and its mined variant share one kernel so that the
mined loss with every gate at zero reproduces the plain loss bit for bit. The
mining gate (kappa) is computed from forward similarity values and treated as
a constant during backward: the indicator has no usable gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .functional import DiagGaussian, cosine_matrix, wasserstein2_sq_pairwise
from .ua import FeatureSequence


@dataclass
class BatchFeatures:
    """Row-aligned source/target feature matrices, one triplet per row."""

    source: Tensor
    target: Tensor

    def __post_init__(self):
        self.source = ad.as_tensor(self.source)
        self.target = ad.as_tensor(self.target)
        if self.source.ndim != 2 or self.source.shape != self.target.shape:
            raise ValueError(
                f"need matching (B, d) matrices, got {self.source.shape} "
                f"and {self.target.shape}")
        if self.source.shape[0] < 1:
            raise ValueError("batch must hold at least one row")

    @property
    def batch_size(self) -> int:
        return self.source.shape[0]


@dataclass
class EpochContext:
    """Where training stands: drives the mined-positive weight gamma."""

    current_epoch: int
    total_epochs: int
    cos_theta: float

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if not 0 <= self.current_epoch <= self.total_epochs:
            raise ValueError(
                f"current_epoch {self.current_epoch} outside "
                f"[0, {self.total_epochs}]")
        if not -1 < self.cos_theta <= 1:
            raise ValueError(f"cos_theta {self.cos_theta} outside (-1, 1]")

    @property
    def gamma(self) -> float:
        return 1.0 - self.current_epoch / self.total_epochs

    @classmethod
    def from_degrees(cls, current_epoch: int, total_epochs: int,
                     theta_degrees: float) -> "EpochContext":
        return cls(current_epoch, total_epochs,
                   math.cos(math.radians(theta_degrees)))


def kappa(s: float, ctx: EpochContext) -> float:
    """Mined-positive weight: gamma if similarity strictly exceeds cos theta."""
    return ctx.gamma if s > ctx.cos_theta else 0.0


def kappa_gate(sims: np.ndarray, ctx: EpochContext,
               exclude_diagonal: bool = False) -> np.ndarray:
    """kappa applied elementwise to a forward similarity matrix (a constant)."""
    gate = np.where(sims > ctx.cos_theta, ctx.gamma, 0.0)
    if exclude_diagonal:
        np.fill_diagonal(gate, 0.0)
    return gate


def _mined_softmax_loss(sims: Tensor, gate: np.ndarray) -> Tensor:
    """(1/B) sum_i -log[(exp(S_ii) + sum_j exp(S_ij) gate_ij) / sum_j exp(S_ij)].

    ``gate`` is a constant B x B weight matrix. Row maxima are subtracted as
    detached constants, so numerator and denominator stay finite at any scale.
    """
    b = sims.shape[0]
    if sims.shape != (b, b) or gate.shape != (b, b):
        raise ValueError(f"square matrices required, got {sims.shape}/{gate.shape}")
    shift = ad.as_tensor(sims.data.max(axis=1, keepdims=True))
    e = ad.exp(sims - shift)
    den = e.sum(axis=1)
    idx = np.arange(b)
    diag = e[idx, idx]
    num = diag + (e * ad.as_tensor(gate)).sum(axis=1)
    return (ad.log(den) - ad.log(num)).mean()


def loss_cl(batch: BatchFeatures) -> Tensor:
    """Batch contrastive loss over cosine similarities (diagonal positives)."""
    sims = cosine_matrix(batch.source, batch.target)
    return _mined_softmax_loss(sims, np.zeros((batch.batch_size,) * 2))


def loss_cs_pair(batch: BatchFeatures, ctx: EpochContext,
                 frozen_gate: np.ndarray | None = None,
                 exclude_diagonal: bool = False) -> Tensor:
    """Contrastive loss with similarity-mined extra positives in the numerator.

    Every j with S(i, j) > cos theta contributes exp(S(i, j)) * gamma to row
    i's numerator (the diagonal included, as the objective is written, so the
    value may go negative). ``frozen_gate`` bypasses gate recomputation for
    finite-difference checks.
    """
    sims = cosine_matrix(batch.source, batch.target)
    gate = (kappa_gate(sims.data, ctx, exclude_diagonal)
            if frozen_gate is None else frozen_gate)
    return _mined_softmax_loss(sims, gate)


def _stack_sequences(seqs) -> FeatureSequence:
    """Normalize a list of per-row sequences into one batched sequence."""
    if isinstance(seqs, FeatureSequence):
        return seqs
    ns = {s.n for s in seqs}
    if len(ns) != 1:
        raise ValueError(f"sequences disagree on chain length: {sorted(ns)}")
    feats = [ad.stack([s.features[i] for s in seqs], axis=0)
             for i in range(len(seqs[0].features))]
    dists = [DiagGaussian(ad.stack([s.distributions[i].mean for s in seqs], axis=0),
                          ad.stack([s.distributions[i].stddev for s in seqs], axis=0))
             for i in range(seqs[0].n)]
    return FeatureSequence(feats, dists)


def loss_cs_total(seq_s, seq_t, ctx: EpochContext,
                  frozen_gates: dict | None = None,
                  exclude_diagonal: bool = False) -> Tensor:
    """Mined contrastive loss over every (source level, target level) pair.

    Accepts batched FeatureSequences (features shaped (B, d)) or lists of B
    per-row sequences. The double sum over levels 0..n is scaled by 1/(2n);
    for n = 0 the single term is used as-is, so that mode stays defined.
    ``frozen_gates`` maps (k, m) level pairs to constant gate matrices.
    """
    seq_s = _stack_sequences(seq_s)
    seq_t = _stack_sequences(seq_t)
    if seq_s.n != seq_t.n:
        raise ValueError(f"chain length mismatch: {seq_s.n} vs {seq_t.n}")
    n = seq_s.n
    total = None
    for k in range(n + 1):
        for m in range(n + 1):
            batch = BatchFeatures(seq_s.features[k], seq_t.features[m])
            gate = frozen_gates.get((k, m)) if frozen_gates is not None else None
            term = loss_cs_pair(batch, ctx, frozen_gate=gate,
                                exclude_diagonal=exclude_diagonal)
            total = term if total is None else total + term
    return total if n == 0 else total * (1.0 / (2 * n))


def frozen_gates_for(seq_s, seq_t, ctx: EpochContext,
                     exclude_diagonal: bool = False) -> dict:
    """Evaluate every level pair's mining gate at current forward values.

    Finite-difference checks need the gates pinned: the indicator is a step
    function, so it must see identical values on both sides of the probe.
    """
    seq_s = _stack_sequences(seq_s)
    seq_t = _stack_sequences(seq_t)
    gates = {}
    for k in range(seq_s.n + 1):
        for m in range(seq_t.n + 1):
            sims = cosine_matrix(seq_s.features[k], seq_t.features[m])
            gates[(k, m)] = kappa_gate(sims.data, ctx, exclude_diagonal)
    return gates


def loss_dr(dists_s, dists_t) -> Tensor:
    """Distribution alignment across sides, one softmax per chain level.

    Each grid is a list of n batched DiagGaussians (means/stddevs (B, d));
    level k contributes a row-softmax over negative squared 2-Wasserstein
    distances with the matched pair on the diagonal. Empty grids (n = 0)
    contribute zero, keeping the no-augmentation ablation well defined.
    """
    if len(dists_s) != len(dists_t):
        raise ValueError(f"grid mismatch: {len(dists_s)} vs {len(dists_t)} levels")
    n = len(dists_s)
    if n == 0:
        return ad.as_tensor(0.0)
    total = None
    for ds, dt in zip(dists_s, dists_t):
        d2 = wasserstein2_sq_pairwise(ds.mean, ds.stddev, dt.mean, dt.stddev)
        logits = -d2
        b = logits.shape[0]
        idx = np.arange(b)
        rows = ad.logsumexp(logits, axis=1) - logits[idx, idx]
        term = rows.mean()
        total = term if total is None else total + term
    return total * (1.0 / n)


def loss_total(cs, dr) -> Tensor:
    """Final objective: plain average of the two components."""
    return (ad.as_tensor(cs) + ad.as_tensor(dr)) * 0.5
