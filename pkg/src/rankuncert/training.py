"""The optimization loop: batching, forward/backward, schedule, persistence.

One step rebuilds the graph from the current parameter arrays, walks the
gradients back, and applies one optimizer update. All randomness (init,
epoch shuffles, augmenter noise) derives from the run seed through separate
seed streams, so a run is a pure function of (seed, config, data).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import PoisonedComputationError
from .checkpoint import CheckpointData, save_checkpoint
from .data import ResolvedDataset
from .evaluation import Gallery, Query, evaluate
from .losses import EpochContext, loss_cs_total, loss_dr, loss_total
from .model import CombinerParams, ModelConfig, build_model, combine, \
    forward_sequences, init_params
from .optim import AdamW, AdamWHyper


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dim: int = 64
    batch_size: int = 32
    epochs: int = 100
    learning_rate: float = 1e-6
    theta_degrees: float = 45.0
    n_ua: int = 2
    seed: int = 0
    combiner: str = "add"
    combiner_init: str = "identity_sum"
    tokens: int = 8
    enable_isu: bool = True
    enable_csu: bool = True
    enable_dr: bool = True
    separate_variance_head: bool = False
    chain_from_f0: bool = False
    exclude_diagonal_from_g: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    precision: str = "f32"
    eval_ks: tuple = (1, 5, 10, 50)
    eval_every: int = 1

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got "
                             f"{self.precision!r}")
        if self.enable_csu and self.batch_size < 2:
            raise ValueError("mining needs batch_size >= 2 when CSU is on")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def effective_n_ua(self) -> int:
        return self.n_ua if self.enable_isu else 0

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, n_ua=self.effective_n_ua,
                           tokens=self.tokens, combiner=self.combiner,
                           combiner_init=self.combiner_init,
                           separate_variance_head=self.separate_variance_head,
                           chain_from_f0=self.chain_from_f0)

    def hyper(self) -> AdamWHyper:
        return AdamWHyper(lr=self.learning_rate, beta1=self.beta1,
                          beta2=self.beta2, eps=self.eps,
                          weight_decay=self.weight_decay)

    def digest(self) -> bytes:
        doc = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(doc.encode("utf-8")).digest()

    def epoch_context(self, epoch: int) -> EpochContext:
        # CSU off pins gamma at zero: the mining gate never opens
        current = self.epochs if not self.enable_csu else epoch
        return EpochContext.from_degrees(current, max(self.epochs, 1),
                                         self.theta_degrees)


@dataclass
class TrainData:
    train: ResolvedDataset
    val: ResolvedDataset
    gallery: Gallery


@dataclass
class TrainState:
    params: dict
    opt: AdamW
    epoch: int = 0
    step: int = 0

    def checkpoint(self, digest: bytes) -> CheckpointData:
        return CheckpointData(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.opt.m.items()},
            {k: v.copy() for k, v in self.opt.v.items()},
            self.epoch, self.step, digest)


def init_state(cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    params = init_params(cfg.model_config(), rng, dtype=cfg.dtype)
    return TrainState(params, AdamW.for_params(params, cfg.hyper()))


def _batch_indices(cfg: TrainConfig, n: int, epoch: int):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch]))
    order = rng.permutation(n)
    b = cfg.batch_size
    for lo in range(0, n, b):
        chunk = order[lo:lo + b]
        if len(chunk) < b and cfg.enable_csu:
            return  # mining statistics depend on B: drop the partial batch
        yield chunk


def train_step(cfg: TrainConfig, state: TrainState, ctx: EpochContext,
               img: np.ndarray, txt: np.ndarray, tgt: np.ndarray,
               noise_rng: np.random.Generator,
               batch_ids=None) -> tuple[TrainState, dict]:
    """One forward/backward/update; returns (state, loss breakdown)."""
    tape = ad.GradientTape(dtype=cfg.dtype)
    tensors = {k: tape.parameter(k, v) for k, v in state.params.items()}
    model = build_model(cfg.model_config(), tensors)
    dt = cfg.dtype
    try:
        seq_s, seq_t = forward_sequences(
            model, img.astype(dt), txt.astype(dt), tgt.astype(dt), rng=noise_rng)
        cs = loss_cs_total(seq_s, seq_t, ctx,
                           exclude_diagonal=cfg.exclude_diagonal_from_g)
        if cfg.enable_dr and seq_s.n > 0:
            dr = loss_dr(seq_s.distributions, seq_t.distributions)
            total = loss_total(cs, dr)
        else:
            dr = ad.as_tensor(0.0)
            total = cs
        grads = tape.grad(total)
    except PoisonedComputationError as e:
        ids = list(batch_ids) if batch_ids is not None else "unknown"
        raise TrainingError(
            f"non-finite loss at epoch {state.epoch} step {state.step} "
            f"(first bad op: {e.op}); batch ids: {ids}") from e
    state.opt.step(state.params, grads)
    state.step += 1
    breakdown = {"L_CS": float(cs.data), "L_DR": float(dr.data),
                 "L_total": float(total.data)}
    return state, breakdown


def build_queries(cfg: TrainConfig, params: dict, ds: ResolvedDataset) -> list:
    """Deployment-side query features: combiner only, no augmenter."""
    if cfg.combiner == "concat_project":
        comb = CombinerParams("concat_project",
                              ad.as_tensor(params["combiner/w"]),
                              ad.as_tensor(params["combiner/b"]))
    else:
        comb = CombinerParams("add")
    feats = combine(ds.img, ds.txt, comb).data
    return [Query(id=r.source_image_id, combined_feature=feats[i],
                  target_id=r.target_image_id, subset_ids=r.subset_ids)
            for i, r in enumerate(ds.records)]


def _eval_state(cfg: TrainConfig, params: dict, datab: TrainData):
    queries = build_queries(cfg, params, datab.val)
    ks = [k for k in cfg.eval_ks if k <= datab.gallery.features.shape[0]]
    return evaluate(queries, datab.gallery, ks)


@dataclass
class TrainResult:
    best: CheckpointData
    final: CheckpointData
    best_report: object
    history: list = field(default_factory=list)


def run_training(cfg: TrainConfig, datab: TrainData,
                 out_dir=None) -> TrainResult:
    """Full loop. Writes checkpoint.runc + metrics.jsonl when out_dir given.

    The retained checkpoint is the best-by-validation one (largest R at the
    highest configured K); epochs=0 returns the initialized state untouched.
    """
    state = init_state(cfg)
    digest = cfg.digest()
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")

    history = []
    best = (-1.0, state.checkpoint(digest), None)

    def log_eval(epoch: int, gamma: float, cs, dr):
        nonlocal best
        report = _eval_state(cfg, state.params, datab)
        key_k = max(report.ks)
        entry = {"epoch": epoch, "gamma": gamma, "L_CS": cs, "L_DR": dr}
        entry.update({f"R@{k}": report.recalls[k] for k in report.ks})
        history.append(entry)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(entry) + "\n")
            metrics_fh.flush()
        score = report.recalls[key_k]
        if score > best[0]:
            best = (score, state.checkpoint(digest), report)
        return report

    try:
        log_eval(0, 1.0, None, None)
        n = len(datab.train)
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            ctx = cfg.epoch_context(epoch)
            sums = {"L_CS": 0.0, "L_DR": 0.0, "L_total": 0.0}
            steps = 0
            for batch in _batch_indices(cfg, n, epoch):
                noise_rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, 2, epoch, state.step]))
                ids = [datab.train.records[i].source_image_id for i in batch]
                _, breakdown = train_step(
                    cfg, state, ctx,
                    datab.train.img[batch], datab.train.txt[batch],
                    datab.train.tgt[batch], noise_rng, batch_ids=ids)
                for k in sums:
                    sums[k] += breakdown[k]
                steps += 1
            state.epoch = epoch + 1
            done = epoch + 1
            if (cfg.eval_every and done % cfg.eval_every == 0) \
                    or done == cfg.epochs:
                log_eval(done, 1.0 - done / max(cfg.epochs, 1),
                         sums["L_CS"] / max(steps, 1),
                         sums["L_DR"] / max(steps, 1))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final_ckpt = state.checkpoint(digest)
    result = TrainResult(best=best[1], final=final_ckpt,
                         best_report=best[2], history=history)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.runc", result.best)
        save_checkpoint(out_dir / "final.runc", final_ckpt)
    return result
