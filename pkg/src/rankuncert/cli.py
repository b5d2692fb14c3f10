"""Command-line entry points: train / eval / gradcheck / synth / sweep.

Config comes from an optional TOML file whose sections mirror the module
names ([training], [data], [synth]); command-line flags override file
values. Every run writes its fully resolved config next to its outputs.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 and older
    import tomli as tomllib

import numpy as np

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import training as training_mod
from .checkpoint import CheckpointError, load_checkpoint
from .data import ManifestError, StoreError
from .evaluation import Gallery, evaluate, render_table
from .training import TrainConfig, TrainingError, build_queries, run_training

SWEEP_THETAS = (75.0, 60.0, 45.0, 30.0)
SWEEP_DEPTHS = (1, 2, 3)


class ConfigError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")


def _fmt_toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value of type {type(v).__name__}")


def _dump_toml(sections: dict) -> str:
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        for key, value in body.items():
            if value is None:
                continue
            lines.append(f"{key} = {_fmt_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _train_config(file_cfg: dict, args) -> TrainConfig:
    """Merge [training] section with flag overrides into a TrainConfig."""
    section = dict(file_cfg.get("training", {}))
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in section:
        if key not in fields:
            raise ConfigError(f"training.{key}: unknown field")
    overrides = {
        "dim": args.dim, "batch_size": args.batch_size,
        "epochs": args.epochs, "learning_rate": args.lr,
        "theta_degrees": args.theta, "n_ua": args.n_ua,
        "seed": args.seed, "combiner": args.combiner,
        "combiner_init": args.combiner_init,
    }
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    ablation = getattr(args, "ablation", None)
    if ablation == "baseline":
        section.update(enable_isu=False, enable_csu=False, enable_dr=False)
    elif ablation == "no_isu":
        section["enable_isu"] = False
    elif ablation == "no_csu":
        section["enable_csu"] = False
    elif ablation == "no_dr":
        section["enable_dr"] = False
    if "eval_ks" in section:
        section["eval_ks"] = tuple(section["eval_ks"])
    try:
        return TrainConfig(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"training config: {e}")


def _synth_spec(file_cfg: dict, args) -> data_mod.SynthSpec:
    section = dict(file_cfg.get("synth", {}))
    for key in ("dim", "num_clusters", "sources_per_target",
                "targets_per_source", "noise_sigma", "train_rows",
                "val_rows"):
        flag = getattr(args, f"synth_{key}", None)
        if flag is not None:
            section[key] = flag
    if getattr(args, "seed", None) is not None:
        section["seed"] = args.seed
    try:
        return data_mod.SynthSpec(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"synth config: {e}")


def _data_paths(file_cfg: dict, args, parser) -> dict:
    section = dict(file_cfg.get("data", {}))
    for key in ("images", "texts", "targets", "train_manifest",
                "val_manifest"):
        flag = getattr(args, key, None)
        if flag is not None:
            section[key] = flag
        if key not in section:
            parser.error(f"--{key.replace('_', '-')} is required "
                         f"(flag or [data].{key} in the config file)")
    return section


def _load_train_data(paths: dict) -> training_mod.TrainData:
    img = data_mod.load_store(paths["images"])
    txt = data_mod.load_store(paths["texts"])
    tgt = data_mod.load_store(paths["targets"])
    train = data_mod.resolve_triplets(
        data_mod.load_manifest(paths["train_manifest"]), img, txt, tgt)
    val = data_mod.resolve_triplets(
        data_mod.load_manifest(paths["val_manifest"]), img, txt, tgt)
    return training_mod.TrainData(train, val, Gallery(tgt.ids, tgt.rows))


def _synth_train_data(spec) -> training_mod.TrainData:
    b = data_mod.generate_synthetic(spec)
    train = data_mod.resolve_triplets(b.train_records, b.images, b.texts,
                                      b.targets)
    val = data_mod.resolve_triplets(b.val_records, b.images, b.texts,
                                    b.targets)
    return training_mod.TrainData(train, val,
                                  Gallery(b.targets.ids, b.targets.rows))


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    return int(os.environ.get("RANKUNCERT_THREADS", "1"))


def _make_run_dir(root, cfg: TrainConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(root) / f"{stamp}-{cfg.digest().hex()[:8]}"
    run.mkdir(parents=True, exist_ok=True)
    return run


def _echo_config(run_dir: Path, cfg: TrainConfig, extra_sections: dict,
                 threads: int) -> None:
    sections = {"training": dataclasses.asdict(cfg)}
    sections["training"]["eval_ks"] = list(cfg.eval_ks)
    sections.update(extra_sections)
    sections["run"] = {
        "command": " ".join(sys.argv),
        "threads": threads,
        "config_digest": cfg.digest().hex(),
    }
    (run_dir / "config.toml").write_text(_dump_toml(sections),
                                         encoding="utf-8")


# -- subcommands ---------------------------------------------------------------


def cmd_train(args) -> int:
    file_cfg = _load_config(args.config)
    cfg = _train_config(file_cfg, args)
    threads = _resolve_threads(args)
    if args.synth:
        spec = _synth_spec(file_cfg, args)
        datab = _synth_train_data(spec)
        data_section = {"synth": dataclasses.asdict(spec)}
    else:
        paths = _data_paths(file_cfg, args, args._parser)
        datab = _load_train_data(paths)
        data_section = {"data": paths}
    run_dir = _make_run_dir(args.runs_root, cfg)
    _echo_config(run_dir, cfg, data_section, threads)
    print(f"run dir: {run_dir}", file=sys.stderr)
    result = run_training(cfg, datab, out_dir=run_dir)
    report = training_mod._eval_state(cfg, result.final.params, datab)
    (run_dir / "eval.json").write_text(
        json.dumps(report.to_json_dict(), indent=1), encoding="utf-8")
    print(render_table(report))
    if result.best_report is not None:
        best_k = max(result.best_report.ks)
        print(f"best validation R@{best_k}: "
              f"{result.best_report.recalls[best_k]:.4f} "
              f"(epoch {result.best.epoch})", file=sys.stderr)
    return 0


def _checkpoint_dim(ck) -> int | None:
    for name, arr in sorted(ck.params.items()):
        if name.endswith("/fc_w"):
            return arr.shape[0]
        if name == "combiner/w":
            return arr.shape[1]
    return None


def cmd_eval(args) -> int:
    file_cfg = _load_config(args.config)
    cfg = _train_config(file_cfg, args)
    ck = load_checkpoint(args.checkpoint)
    if ck.config_digest != cfg.digest():
        print("warning: checkpoint was trained under a different config",
              file=sys.stderr)
    ck_dim = _checkpoint_dim(ck)
    if ck_dim is not None and ck_dim != cfg.dim:
        print(f"error: checkpoint dim {ck_dim} != config dim {cfg.dim}",
              file=sys.stderr)
        return 1
    img = data_mod.load_store(args.images)
    txt = data_mod.load_store(args.texts)
    tgt = data_mod.load_store(args.targets)
    if img.rows.shape[1] != cfg.dim:
        print(f"error: store dim {img.rows.shape[1]} != config dim {cfg.dim}",
              file=sys.stderr)
        return 1
    ds = data_mod.resolve_triplets(
        data_mod.load_manifest(args.manifest), img, txt, tgt)
    queries = build_queries(cfg, ck.params, ds)
    gallery = Gallery(tgt.ids, tgt.rows)
    ks = [int(k) for k in args.ks.split(",")]
    subset_ks = None
    if args.subset:
        missing = [r.source_image_id for r in ds.records
                   if not r.subset_ids]
        if missing:
            raise ManifestError(
                f"--subset needs subset_ids on every row; missing on "
                f"{len(missing)} rows (first: {missing[0]})")
        subset_ks = [1, 2, 3]
    report = evaluate(queries, gallery, ks, subset_ks=subset_ks)
    print(json.dumps(report.to_json_dict()))
    print(render_table(report), file=sys.stderr)
    if args.json_out:
        Path(args.json_out).write_text(
            json.dumps(report.to_json_dict(), indent=1), encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck_mod.run_all(seed=args.seed, instances=args.instances,
                                    components=args.component)
    for r in reports:
        print(r.line())
    bad = [r for r in reports if not r.passed]
    for r in bad:
        print(f"gradient mismatch in {r.name}: max relerr {r.max_relerr:.3e}",
              file=sys.stderr)
    return 1 if bad else 0


def cmd_synth(args) -> int:
    spec = _synth_spec(_load_config(args.config), args)
    bundle = data_mod.generate_synthetic(spec)
    paths = data_mod.write_synthetic(bundle, args.out)
    print(json.dumps(paths, indent=1))
    return 0


def cmd_sweep(args) -> int:
    file_cfg = _load_config(args.config)
    spec = _synth_spec(file_cfg, args)
    if args.dim is None:
        args.dim = spec.dim  # the grid runs on the synthetic world
    datab = _synth_train_data(spec)
    rows = []
    for theta in SWEEP_THETAS:
        for n in SWEEP_DEPTHS:
            args.theta, args.n_ua = theta, n
            cfg = _train_config(file_cfg, args)
            result = run_training(cfg, datab)
            report = result.best_report
            row = {"theta_degrees": theta, "n_ua": n}
            row.update({f"R@{k}": repr(report.recalls[k])
                        for k in report.ks})
            rows.append(row)
            print(f"theta={theta:g} n={n}: done", file=sys.stderr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(str(out))
    return 0


# -- parser wiring -------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--dim", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--theta", type=float, help="mining threshold in degrees")
    p.add_argument("--n-ua", type=int, dest="n_ua",
                   help="augmentation chain length")
    p.add_argument("--seed", type=int)
    p.add_argument("--combiner", choices=("add", "concat_project"))
    p.add_argument("--combiner-init", dest="combiner_init",
                   choices=("identity_sum", "uniform"))
    p.add_argument("--threads", type=int,
                   help="worker count; default $RANKUNCERT_THREADS or 1")


def _add_synth_flags(p):
    for key, typ in (("dim", int), ("num_clusters", int),
                     ("sources_per_target", int), ("targets_per_source", int),
                     ("noise_sigma", float), ("train_rows", int),
                     ("val_rows", int)):
        p.add_argument(f"--synth-{key.replace('_', '-')}",
                       dest=f"synth_{key}", type=typ)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankuncert",
        description="retrieval trainer over precomputed embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    _add_train_flags(p)
    _add_synth_flags(p)
    p.add_argument("--ablation",
                   choices=("full", "baseline", "no_isu", "no_csu", "no_dr"),
                   default=None)
    p.add_argument("--synth", action="store_true",
                   help="train on a generated synthetic world")
    p.add_argument("--images")
    p.add_argument("--texts")
    p.add_argument("--targets")
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--runs-root", default="runs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="rank a gallery with a trained checkpoint")
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ks", default="1,5,10,50")
    p.add_argument("--subset", action="store_true",
                   help="also report subset recalls and the overall score")
    p.add_argument("--json-out", dest="json_out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--component", action="append",
                   choices=sorted(gradcheck_mod.COMPONENTS))
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset to disk")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _add_synth_flags(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("sweep", help="grid over mining angle x chain length")
    _add_train_flags(p)
    _add_synth_flags(p)
    p.add_argument("--out", required=True, help="CSV destination")
    p.set_defaults(fn=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._parser = parser
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
    except (StoreError, ManifestError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
    except TrainingError as e:
        print(f"numeric error: {e}", file=sys.stderr)
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
