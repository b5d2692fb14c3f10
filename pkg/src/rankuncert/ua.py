"""Uncertainty augmenter blocks and chains.

A block maps a feature vector to a diagonal Gaussian plus a reparameterized
sample: h = f + fc(attn(f)), mu = LN(h), log sigma^2 = h (the variance head
shares the trunk unless a separate head is configured), sample = mu + sigma*eps.
Chains apply n blocks in sequence, each feeding on the previous sample, so
uncertainty accumulates step by step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .functional import DiagGaussian, layer_norm

LOG_VAR_CLAMP = 10.0  # log sigma^2 limited to [-10, 10] before exponentiation

# canonical parameter names of one block, in checkpoint order
BLOCK_PARAM_NAMES = ("attn_wq", "attn_wk", "attn_wv", "fc_w", "fc_b",
                     "ln_gain", "ln_bias")
VAR_HEAD_PARAM_NAMES = ("var_w", "var_b")

# module-wide counter of ua_forward invocations; evaluation must leave it
# untouched (deployment drops the augmenter entirely)
_ua_forward_calls = 0


def ua_access_count() -> int:
    return _ua_forward_calls


def reset_ua_access_counter() -> None:
    global _ua_forward_calls
    _ua_forward_calls = 0


def block_param_shapes(dim: int, tokens: int,
                       separate_variance_head: bool = False) -> dict[str, tuple]:
    """Parameter name -> shape for one block; validates the token split."""
    if dim % tokens != 0:
        raise ValueError(f"dim {dim} not divisible by token count {tokens}")
    c = dim // tokens
    shapes = {
        "attn_wq": (c, c),
        "attn_wk": (c, c),
        "attn_wv": (c, c),
        "fc_w": (dim, dim),
        "fc_b": (dim,),
        "ln_gain": (dim,),
        "ln_bias": (dim,),
    }
    if separate_variance_head:
        shapes["var_w"] = (dim, dim)
        shapes["var_b"] = (dim,)
    return shapes


def init_block_params(rng: np.random.Generator, dim: int, tokens: int,
                      separate_variance_head: bool = False,
                      dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights ~ U(-1/sqrt(d), 1/sqrt(d)); biases 0; LN gain 1."""
    bound = 1.0 / math.sqrt(dim)
    out: dict[str, np.ndarray] = {}
    for name, shape in block_param_shapes(dim, tokens, separate_variance_head).items():
        if name.endswith("_b") or name == "ln_bias":
            out[name] = np.zeros(shape, dtype=dtype)
        elif name == "ln_gain":
            out[name] = np.ones(shape, dtype=dtype)
        else:
            out[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return out


@dataclass
class UABlock:
    """One augmenter block; ``params`` maps canonical names to tape Tensors."""

    params: dict[str, Tensor]
    dim: int
    tokens: int

    def __post_init__(self):
        if self.dim % self.tokens != 0:
            raise ValueError(f"dim {self.dim} not divisible by tokens {self.tokens}")
        want = set(BLOCK_PARAM_NAMES)
        have = set(self.params)
        if not want <= have:
            raise ValueError(f"missing block parameters: {sorted(want - have)}")
        self.separate_variance_head = "var_w" in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


@dataclass
class UAChain:
    """n blocks for one side (source or target); n = 0 is a pass-through."""

    blocks: list
    side: str
    chain_from_f0: bool = False

    def __post_init__(self):
        if self.side not in ("source", "target"):
            raise ValueError(f"side must be source or target, got {self.side!r}")
        dims = {b.dim for b in self.blocks}
        if len(dims) > 1:
            raise ValueError(f"blocks disagree on dim: {sorted(dims)}")

    @property
    def n(self) -> int:
        return len(self.blocks)


@dataclass
class FeatureSequence:
    """(f_0 .. f_n) plus the n distributions that produced f_1 .. f_n."""

    features: list
    distributions: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.features) != len(self.distributions) + 1:
            raise ValueError(
                f"need one more feature than distribution, got "
                f"{len(self.features)} features / {len(self.distributions)} dists")

    @property
    def n(self) -> int:
        return len(self.distributions)


def _attention(block: UABlock, f: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over m tokens of size d/m."""
    m, c = block.tokens, block.dim // block.tokens
    lead = f.shape[:-1]
    x = ad.reshape(f, lead + (m, c))
    q = x @ block["attn_wq"]
    k = x @ block["attn_wk"]
    v = x @ block["attn_wv"]
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(c))
    out = ad.softmax(scores, axis=-1) @ v
    return ad.reshape(out, lead + (block.dim,))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # vectors go through as 1-row matrices so matmul stays rank-2
    if x.ndim == 1:
        return ad.reshape(ad.reshape(x, (1, x.shape[0])) @ w, (w.shape[1],)) + b
    return x @ w + b


def ua_forward(block: UABlock, f, noise) -> tuple[Tensor, DiagGaussian]:
    """One augmentation step; accepts a (d,) vector or a (B, d) batch.

    ``noise`` must match f's shape; pass zeros for a deterministic pass.
    """
    global _ua_forward_calls
    _ua_forward_calls += 1
    f = ad.as_tensor(f)
    noise = ad.as_tensor(noise)
    if f.shape != noise.shape or f.shape[-1] != block.dim:
        raise ValueError(
            f"feature/noise shape mismatch: f {f.shape}, noise {noise.shape}, "
            f"block dim {block.dim}")
    h = f + _affine(_attention(block, f), block["fc_w"], block["fc_b"])
    mu = layer_norm(h, block["ln_gain"], block["ln_bias"])
    if block.separate_variance_head:
        log_var = _affine(_attention(block, f), block["var_w"], block["var_b"])
    else:
        log_var = h
    sigma = ad.exp(ad.clamp(log_var, -LOG_VAR_CLAMP, LOG_VAR_CLAMP) * 0.5)
    sample = mu + sigma * noise
    return sample, DiagGaussian(mu, sigma)


def chain_forward(chain: UAChain, f0, rng: np.random.Generator | None = None,
                  noises: list | None = None) -> FeatureSequence:
    """Run every block in order; f_i feeds on f_{i-1} (or f_0 if configured).

    Noise comes from ``rng`` (one standard-normal draw per block, in block
    order) unless explicit ``noises`` are supplied for reproducible tests.
    """
    f0 = ad.as_tensor(f0)
    if chain.blocks and f0.shape[-1] != chain.blocks[0].dim:
        raise ValueError(
            f"f0 dim {f0.shape[-1]} does not match chain dim {chain.blocks[0].dim}")
    if noises is not None and len(noises) != chain.n:
        raise ValueError(f"need {chain.n} noise draws, got {len(noises)}")
    feats = [f0]
    dists = []
    prev = f0
    for i, block in enumerate(chain.blocks):
        if noises is not None:
            eps = np.asarray(noises[i], dtype=f0.dtype)
        elif rng is not None:
            eps = rng.standard_normal(f0.shape).astype(f0.dtype, copy=False)
        else:
            raise ValueError("chain_forward needs an rng or explicit noises")
        src = f0 if chain.chain_from_f0 else prev
        sample, dist = ua_forward(block, src, eps)
        feats.append(sample)
        dists.append(dist)
        prev = sample
    return FeatureSequence(feats, dists)
