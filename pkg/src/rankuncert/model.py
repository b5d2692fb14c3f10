"""Model assembly: query combiner plus the two augmenter chains.

Model state is a flat name -> ndarray dict (what the optimizer and the
checkpoint see). Each forward pass wires those arrays into tape Tensors and
rebuilds the block structure around them, so the graph is fresh per step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import ua

COMBINER_MODES = ("add", "concat_project")
COMBINER_INITS = ("identity_sum", "uniform")


@dataclass
class ModelConfig:
    dim: int
    n_ua: int = 2
    tokens: int = 8
    combiner: str = "add"
    combiner_init: str = "identity_sum"
    separate_variance_head: bool = False
    chain_from_f0: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.n_ua < 0:
            raise ValueError(f"bad dim/n_ua: {self.dim}/{self.n_ua}")
        if self.combiner not in COMBINER_MODES:
            raise ValueError(f"unknown combiner mode {self.combiner!r}")
        if self.combiner_init not in COMBINER_INITS:
            raise ValueError(f"unknown combiner init {self.combiner_init!r}")
        if self.n_ua > 0:
            ua.block_param_shapes(self.dim, self.tokens)  # validates the split


@dataclass
class CombinerParams:
    mode: str
    w: Tensor | None = None  # (2d, d) in concat_project mode
    b: Tensor | None = None  # (d,)


def combine(img, txt, params: CombinerParams) -> Tensor:
    """Fuse source image and text features into the query feature."""
    img, txt = ad.as_tensor(img), ad.as_tensor(txt)
    if params.mode == "add":
        if img.shape != txt.shape:
            raise ValueError(
                f"add combiner needs equal dims, got {img.shape} and {txt.shape}")
        return img + txt
    if params.mode == "concat_project":
        cat = ad.concat([img, txt], axis=-1)
        two_d = params.w.shape[0]
        if cat.shape[-1] != two_d:
            raise ValueError(
                f"concat_project combiner expects img+txt dims summing to "
                f"{two_d}, got {cat.shape[-1]}")
        if cat.ndim == 1:
            out = ad.reshape(cat, (1, two_d)) @ params.w
            return ad.reshape(out, (params.w.shape[1],)) + params.b
        return cat @ params.w + params.b
    raise ValueError(f"unknown combiner mode {params.mode!r}")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Canonical parameter name -> shape, in checkpoint order."""
    shapes: dict[str, tuple] = {}
    if cfg.combiner == "concat_project":
        shapes["combiner/w"] = (2 * cfg.dim, cfg.dim)
        shapes["combiner/b"] = (cfg.dim,)
    block = ua.block_param_shapes(cfg.dim, cfg.tokens, cfg.separate_variance_head) \
        if cfg.n_ua > 0 else {}
    for side in ("src", "tgt"):
        for i in range(cfg.n_ua):
            for name, shape in block.items():
                shapes[f"{side}/ua{i}/{name}"] = shape
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    if cfg.combiner == "concat_project":
        d = cfg.dim
        if cfg.combiner_init == "identity_sum":
            # starts exactly at the additive combiner, then learns away from it
            w = np.concatenate([np.eye(d), np.eye(d)], axis=0)
        else:
            bound = 1.0 / np.sqrt(2 * d)
            w = rng.uniform(-bound, bound, size=(2 * d, d))
        params["combiner/w"] = w.astype(dtype)
        params["combiner/b"] = np.zeros(d, dtype=dtype)
    for side in ("src", "tgt"):
        for i in range(cfg.n_ua):
            block = ua.init_block_params(rng, cfg.dim, cfg.tokens,
                                         cfg.separate_variance_head, dtype=dtype)
            for name, arr in block.items():
                params[f"{side}/ua{i}/{name}"] = arr
    return params


@dataclass
class Model:
    cfg: ModelConfig
    combiner: CombinerParams
    src_chain: ua.UAChain
    tgt_chain: ua.UAChain


def build_model(cfg: ModelConfig, tensors: Mapping[str, Tensor]) -> Model:
    """Wire named Tensors (tape parameters or constants) into a Model."""
    if cfg.combiner == "concat_project":
        comb = CombinerParams("concat_project", tensors["combiner/w"],
                              tensors["combiner/b"])
    else:
        comb = CombinerParams("add")
    chains = {}
    for side, side_name in (("src", "source"), ("tgt", "target")):
        blocks = []
        for i in range(cfg.n_ua):
            names = ua.BLOCK_PARAM_NAMES + (ua.VAR_HEAD_PARAM_NAMES
                                            if cfg.separate_variance_head else ())
            block_params = {n: tensors[f"{side}/ua{i}/{n}"] for n in names}
            blocks.append(ua.UABlock(block_params, cfg.dim, cfg.tokens))
        chains[side] = ua.UAChain(blocks, side=side_name,
                                  chain_from_f0=cfg.chain_from_f0)
    return Model(cfg, comb, chains["src"], chains["tgt"])


def forward_sequences(model: Model, img, txt, tgt,
                      rng: np.random.Generator | None = None,
                      noises_s=None, noises_t=None):
    """Combine the query, then run both augmenter chains.

    Returns (seq_s, seq_t) FeatureSequences; level 0 holds the deployment
    features f_s0/f_t0.
    """
    f_s0 = combine(img, txt, model.combiner)
    f_t0 = ad.as_tensor(tgt)
    seq_s = ua.chain_forward(model.src_chain, f_s0, rng=rng, noises=noises_s)
    seq_t = ua.chain_forward(model.tgt_chain, f_t0, rng=rng, noises=noises_t)
    return seq_s, seq_t
