"""Finite-difference audit of every differentiable building block.

Each component gets a stream of random instances; per instance one leaf
(an input or parameter) is made the live variable and its analytic gradient
is compared against central differences at a handful of coordinates. Step
functions in the pipeline (mining gates) are pinned to their base-point
values so both probes of the difference see the same branch.
"""

import argparse
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ua as ua_mod
from .autodiff import GradientTape, as_tensor
from .functional import DiagGaussian, layer_norm
from .losses import (BatchFeatures, EpochContext, frozen_gates_for,
                     kappa_gate, loss_cl, loss_cs_pair, loss_cs_total,
                     loss_dr, loss_total)
from .model import CombinerParams, combine

STEP = 1e-5
THRESHOLD = 1e-4
RELERR_FLOOR = 1e-4  # denominators below this count as "about zero"

BATCH_SIZES = (2, 4, 8)
DIMS = (8, 16, 64)
DEPTHS = (1, 2)
THETAS = (30.0, 45.0, 60.0, 75.0)
TOKENS = 8


@dataclass
class ComponentReport:
    name: str
    instances: int
    coords: int
    max_relerr: float

    @property
    def passed(self) -> bool:
        return self.max_relerr < THRESHOLD

    def line(self) -> str:
        tag = "pass" if self.passed else "FAIL"
        return (f"{self.name:<14} {tag}  max relerr {self.max_relerr:.3e} "
                f"({self.instances} instances, {self.coords} coords)")


def compare_build(build, x0, rng, step=STEP, coords=3, floor=RELERR_FLOOR):
    """Max relative error between analytic and central-difference gradients.

    ``build`` maps one float64 Tensor shaped like ``x0`` to a scalar Tensor
    and must be pure: every other quantity it uses is a closed-over constant.
    Returns (max relerr over sampled coordinates, number of coordinates).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    tape = GradientTape()
    g = tape.grad(build(tape.parameter("x", x0)))["x"].ravel()

    def value(xv):
        return float(build(GradientTape().parameter("x", xv)).data)

    pick = rng.choice(x0.size, size=min(coords, x0.size), replace=False)
    flat = x0.ravel()
    worst = 0.0
    for i in pick:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fd = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape)))
        fd /= 2 * step
        worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), floor))
    return worst, len(pick)


def _grid(i):
    return (BATCH_SIZES[i % 3], DIMS[(i // 3) % 3], DEPTHS[(i // 9) % 2])


def _ctx(i) -> EpochContext:
    return EpochContext.from_degrees(i % 10, 10, THETAS[i % 4])


def _features(rng, b, d, clustered):
    """Row batch; clustered batches push off-diagonal cosines past cos theta."""
    if clustered:
        center = rng.standard_normal(d)
        return center + 0.2 * rng.standard_normal((b, d))
    return rng.standard_normal((b, d))


def _probe_sum(tensors, probes):
    total = None
    for t, p in zip(tensors, probes):
        term = (t * as_tensor(p)).sum()
        total = term if total is None else total + term
    return total


def _block_consts(rng, d, separate_head):
    init = ua_mod.init_block_params(rng, d, TOKENS, separate_head,
                                    dtype=np.float64)
    # nudge off the symmetric init so attention/variance paths carry signal
    return {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in init.items()}


def _rebuild_block(consts, live_name, live_tensor, d):
    params = {k: as_tensor(v) for k, v in consts.items()}
    if live_name is not None:
        params[live_name] = live_tensor
    return ua_mod.UABlock(params, d, TOKENS)


# -- instance factories: each returns (x0, build) -----------------------------


def _inst_layer_norm(rng, i):
    b, d, _ = _grid(i)
    x = rng.standard_normal((b, d))
    gain = 1.0 + 0.1 * rng.standard_normal(d)
    bias = 0.1 * rng.standard_normal(d)
    probe = rng.standard_normal((b, d))
    leaves = {"x": x, "gain": gain, "bias": bias}
    live = ("x", "gain", "bias")[i % 3]

    def build(t):
        got = {k: (t if k == live else as_tensor(v))
               for k, v in leaves.items()}
        return (layer_norm(got["x"], got["gain"], got["bias"])
                * as_tensor(probe)).sum()

    return leaves[live], build


def _inst_combine(rng, i):
    b, d, _ = _grid(i)
    img = rng.standard_normal((b, d))
    txt = rng.standard_normal((b, d))
    probe = rng.standard_normal((b, d))
    if i % 2 == 0:
        live = ("img", "txt")[i % 4 // 2]

        def build(t):
            a = t if live == "img" else as_tensor(img)
            x = t if live == "txt" else as_tensor(txt)
            return (combine(a, x, CombinerParams("add"))
                    * as_tensor(probe)).sum()

        return {"img": img, "txt": txt}[live], build

    w = rng.standard_normal((2 * d, d)) / np.sqrt(2 * d)
    bvec = 0.1 * rng.standard_normal(d)
    leaves = {"img": img, "txt": txt, "w": w, "b": bvec}
    live = ("img", "txt", "w", "b")[i % 4]

    def build(t):
        got = {k: (t if k == live else as_tensor(v))
               for k, v in leaves.items()}
        params = CombinerParams("concat_project", got["w"], got["b"])
        return (combine(got["img"], got["txt"], params)
                * as_tensor(probe)).sum()

    return leaves[live], build


def _inst_ua_forward(rng, i):
    b, d, _ = _grid(i)
    consts = _block_consts(rng, d, separate_head=(i % 5 == 0))
    f = rng.standard_normal((b, d))
    noise = rng.standard_normal((b, d))
    probes = [rng.standard_normal((b, d)) for _ in range(3)]
    names = ("f",) + tuple(sorted(consts))
    live = names[i % len(names)]
    x0 = f if live == "f" else consts[live]

    def build(t):
        block = _rebuild_block(consts, None if live == "f" else live, t, d)
        fin = t if live == "f" else as_tensor(f)
        sample, dist = ua_mod.ua_forward(block, fin, noise)
        return _probe_sum([sample, dist.mean, dist.stddev], probes)

    return x0, build


def _inst_chain_forward(rng, i):
    b, d, n = _grid(i)
    chains = [_block_consts(rng, d, separate_head=False) for _ in range(n)]
    f0 = rng.standard_normal((b, d))
    noises = [rng.standard_normal((b, d)) for _ in range(n)]
    probes = [rng.standard_normal((b, d)) for _ in range(n + 1)]
    from_f0 = bool(i % 2)
    names = ["f0"] + [f"{j}/{k}" for j in range(n) for k in sorted(chains[j])]
    live = names[i % len(names)]
    if live == "f0":
        live_block, live_param, x0 = None, None, f0
    else:
        j, k = live.split("/")
        live_block, live_param = int(j), k
        x0 = chains[live_block][k]

    def build(t):
        blocks = [
            _rebuild_block(consts, live_param if j == live_block else None,
                           t, d)
            for j, consts in enumerate(chains)]
        fin = t if live == "f0" else as_tensor(f0)
        seq = ua_mod.chain_forward(
            ua_mod.UAChain(blocks, "source", chain_from_f0=from_f0),
            fin, noises=noises)
        return _probe_sum(seq.features, probes)

    return x0, build


def _inst_loss_cl(rng, i):
    b, d, _ = _grid(i)
    f_s = _features(rng, b, d, clustered=(i % 2 == 0))
    f_t = _features(rng, b, d, clustered=(i % 2 == 0))
    live = ("s", "t")[i % 2]

    def build(t):
        a = t if live == "s" else as_tensor(f_s)
        c = t if live == "t" else as_tensor(f_t)
        return loss_cl(BatchFeatures(a, c))

    return (f_s if live == "s" else f_t), build


def _inst_loss_cs_pair(rng, i):
    b, d, _ = _grid(i)
    ctx = _ctx(i)
    f_s = _features(rng, b, d, clustered=(i % 3 != 0))
    f_t = _features(rng, b, d, clustered=(i % 3 != 0))
    excl = bool(i % 2)
    u_s = f_s / np.linalg.norm(f_s, axis=1, keepdims=True)
    u_t = f_t / np.linalg.norm(f_t, axis=1, keepdims=True)
    gate = kappa_gate(u_s @ u_t.T, ctx, excl)
    live = ("s", "t")[i % 2]

    def build(t):
        a = t if live == "s" else as_tensor(f_s)
        c = t if live == "t" else as_tensor(f_t)
        return loss_cs_pair(BatchFeatures(a, c), ctx, frozen_gate=gate,
                            exclude_diagonal=excl)

    return (f_s if live == "s" else f_t), build


def _chained_pair(rng, i, b, d, n):
    """Shared scaffolding: two chains, pre-drawn noises, live-leaf naming."""
    sides = {"s": [_block_consts(rng, d, False) for _ in range(n)],
             "t": [_block_consts(rng, d, False) for _ in range(n)]}
    inputs = {"s": _features(rng, b, d, clustered=(i % 2 == 0)),
              "t": _features(rng, b, d, clustered=(i % 2 == 0))}
    noises = {side: [rng.standard_normal((b, d)) for _ in range(n)]
              for side in sides}
    names = ["f0_s", "f0_t"] + [f"{side}/{j}/{k}" for side in ("s", "t")
                                for j in range(n)
                                for k in sorted(sides[side][j])]
    live = names[i % len(names)]
    if live.startswith("f0"):
        live_side, live_block, live_param = live[-1], None, None
        x0 = inputs[live_side]
        live_side = None  # an f0 leaf is not a block parameter
    else:
        live_side, j, live_param = live.split("/")
        live_block = int(j)
        x0 = sides[live_side][live_block][live_param]

    def forward(t):
        seqs = {}
        for side in ("s", "t"):
            blocks = [
                _rebuild_block(
                    consts,
                    live_param if (side, j) == (live_side, live_block)
                    else None,
                    t, d)
                for j, consts in enumerate(sides[side])]
            fin = t if live == f"f0_{side}" else as_tensor(inputs[side])
            seqs[side] = ua_mod.chain_forward(
                ua_mod.UAChain(blocks, "source" if side == "s" else "target"),
                fin, noises=noises[side])
        return seqs["s"], seqs["t"]

    return x0, forward


def _inst_loss_cs_total(rng, i):
    b, d, n = _grid(i)
    ctx = _ctx(i)
    x0, forward = _chained_pair(rng, i, b, d, n)
    base_s, base_t = forward(as_tensor(x0))
    gates = frozen_gates_for(base_s, base_t, ctx)

    def build(t):
        seq_s, seq_t = forward(t)
        return loss_cs_total(seq_s, seq_t, ctx, frozen_gates=gates)

    return x0, build


def _inst_loss_dr(rng, i):
    b, d, n = _grid(i)
    mus = {side: [rng.standard_normal((b, d)) for _ in range(n)]
           for side in ("s", "t")}
    logvars = {side: [0.5 * rng.standard_normal((b, d)) for _ in range(n)]
               for side in ("s", "t")}
    names = [f"{side}/{j}/{field}" for side in ("s", "t")
             for j in range(n) for field in ("mu", "logvar")]
    live = names[i % len(names)]
    lside, lj, lfield = live.split("/")
    lj = int(lj)
    x0 = (mus if lfield == "mu" else logvars)[lside][lj]

    def build(t):
        grids = {}
        for side in ("s", "t"):
            dists = []
            for j in range(n):
                mu = t if (side, j, "mu") == (lside, lj, lfield) \
                    else as_tensor(mus[side][j])
                lv = t if (side, j, "logvar") == (lside, lj, lfield) \
                    else as_tensor(logvars[side][j])
                dists.append(DiagGaussian(mu, ad.exp(lv * 0.5)))
            grids[side] = dists
        return loss_dr(grids["s"], grids["t"])

    return x0, build


def _inst_loss_total(rng, i):
    b, d, n = _grid(i)
    ctx = _ctx(i)
    x0, forward = _chained_pair(rng, i, b, d, n)
    base_s, base_t = forward(as_tensor(x0))
    gates = frozen_gates_for(base_s, base_t, ctx)

    def build(t):
        seq_s, seq_t = forward(t)
        cs = loss_cs_total(seq_s, seq_t, ctx, frozen_gates=gates)
        dr = loss_dr(seq_s.distributions, seq_t.distributions)
        return loss_total(cs, dr)

    return x0, build


COMPONENTS = {
    "layer_norm": _inst_layer_norm,
    "combine": _inst_combine,
    "ua_forward": _inst_ua_forward,
    "chain_forward": _inst_chain_forward,
    "loss_cl": _inst_loss_cl,
    "loss_cs_pair": _inst_loss_cs_pair,
    "loss_cs_total": _inst_loss_cs_total,
    "loss_dr": _inst_loss_dr,
    "loss_total": _inst_loss_total,
}


def run_component(name, seed=0, instances=100, coords=3,
                  step=STEP) -> ComponentReport:
    factory = COMPONENTS[name]
    comp_index = sorted(COMPONENTS).index(name)
    rng = np.random.default_rng(np.random.SeedSequence([seed, comp_index]))
    worst = 0.0
    checked = 0
    for i in range(instances):
        x0, build = factory(rng, i)
        relerr, k = compare_build(build, x0, rng, step=step, coords=coords)
        worst = max(worst, relerr)
        checked += k
    return ComponentReport(name, instances, checked, worst)


def run_all(seed=0, instances=100, coords=3, components=None):
    names = components if components else list(COMPONENTS)
    return [run_component(n, seed=seed, instances=instances, coords=coords)
            for n in names]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="compare analytic gradients against central differences")
    parser.add_argument("--component", action="append", choices=COMPONENTS,
                        help="check one component (repeatable); default all")
    parser.add_argument("--instances", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    reports = run_all(seed=args.seed, instances=args.instances,
                      components=args.component)
    for r in reports:
        print(r.line())
    return 0 if all(r.passed for r in reports) else 1


if __name__ == "__main__":
    raise SystemExit(main())
