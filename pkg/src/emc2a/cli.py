"""Command-line entry point: train, eval, verify, count-params, synth-data.

Run configuration (YAML or JSON, every key optional)::

    net:            # network overrides, e.g. r_ncks, attention, stages, num_classes
    train:          # epochs, batch_size, lr_init, lr_final, momentum, weight_decay
    data:
      manifest: path/to/tree-or-manifest.csv
      synth: {classes: 4, per_class: 100, test_per_class: 50, seed: 0}
      train_split: train
      test_split: test
      layout: soc | eoc1 | eoc2      # optional count check against a published split
    out: runs/example
    seed: 0
    deterministic: true
    eval_batch_size: 64
"""

import argparse
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

RUN_KEYS = {"net", "train", "data", "out", "seed", "deterministic", "eval_batch_size"}
DATA_KEYS = {"manifest", "synth", "train_split", "test_split", "layout", "image_size"}
SYNTH_KEYS = {"classes", "per_class", "test_per_class", "seed"}
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    net: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    out: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    eval_batch_size: int = 64

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - RUN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(d.get("data") or {})
        bad = set(data) - DATA_KEYS
        if bad:
            raise ConfigError(f"unknown data keys: {sorted(bad)}")
        if "synth" in data and (set(data["synth"] or {}) - SYNTH_KEYS):
            raise ConfigError(f"unknown data.synth keys: {sorted(set(data['synth']) - SYNTH_KEYS)}")
        if "manifest" in data and "synth" in data:
            raise ConfigError("data: give either manifest or synth, not both")
        d["data"] = data
        d["net"] = dict(d.get("net") or {})
        d["train"] = dict(d.get("train") or {})
        return cls(**d)


def load_run_config(path):
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() == ".json":
        raw = json.loads(text)
    else:
        import yaml
        raw = yaml.safe_load(text)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return RunConfig.from_dict(raw)


def _net_config(run, num_classes=None):
    from .net import NetConfig

    overrides = dict(run.net)
    if num_classes is not None:
        if "num_classes" in overrides and overrides["num_classes"] != num_classes:
            raise ConfigError(f"net.num_classes={overrides['num_classes']} but the data has {num_classes} classes")
        overrides["num_classes"] = num_classes
    return NetConfig.from_dict(overrides).validate()


def _train_config(run):
    from .training import TrainConfig

    cfg = TrainConfig.from_dict(run.train)
    cfg.seed = run.seed
    return cfg.validate()


def _load_data(run, need_train=True):
    """(train_set or None, test_set or None, info dict)."""
    from . import data as D

    spec = run.data
    size = spec.get("image_size", D.IMAGE_SIZE)
    if "synth" in spec:
        s = {"classes": 4, "per_class": 100, "test_per_class": 50, "seed": run.seed, **(spec["synth"] or {})}
        train = D.synth_dataset(s["classes"], s["per_class"], s["seed"], size) if need_train else None
        test = D.synth_dataset(s["classes"], s["test_per_class"], s["seed"] + 1, size) if s["test_per_class"] else None
        return train, test, {"source": "synthetic", **s}
    if "manifest" not in spec:
        raise ConfigError("data: neither manifest nor synth given")
    manifest = D.load_manifest(spec["manifest"])
    if spec.get("layout"):
        issues = D.check_layout(manifest, spec["layout"])
        if issues:
            raise ConfigError(f"manifest does not match layout {spec['layout']}: " + "; ".join(issues[:5]))
    tr, te = spec.get("train_split", "train"), spec.get("test_split", "test")
    print(manifest.summary())
    train = D.dataset_from_manifest(manifest, tr, size) if need_train else None
    test = D.dataset_from_manifest(manifest, te, size) if manifest.split(te) else None
    return train, test, {"source": str(spec["manifest"]), "train_split": tr, "test_split": te}


def _stamp(run, extra=None):
    import numpy as np
    from .kernels import BACKEND

    return {"tool": "emc2a", "version": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "kernel_backend": BACKEND, "seed": run.seed,
            "deterministic": run.deterministic, "resize": "bilinear, half-pixel centers",
            "pixel_scaling": "[0, 1], no mean/std normalization", **(extra or {})}


def _write_effective(out, run, net_cfg, train_cfg, info):
    import yaml

    out.mkdir(parents=True, exist_ok=True)
    effective = {"net": net_cfg.to_dict(), "train": asdict(train_cfg), "data": run.data, "out": str(out),
                 "seed": run.seed, "deterministic": run.deterministic, "eval_batch_size": run.eval_batch_size}
    (out / "config.yaml").write_text(yaml.safe_dump(effective, sort_keys=False))
    (out / "run.json").write_text(json.dumps(_stamp(run, {"data": info}), indent=2) + "\n")


# -- commands ----------------------------------------------------------------------------

def cmd_train(args):
    from .metrics import evaluate
    from .net import build, load_checkpoint
    from .training import train

    run = _apply_flags(load_run_config(args.config), args)
    train_set, test_set, info = _load_data(run)
    net_cfg = _net_config(run, len(train_set.class_names))
    train_cfg = _train_config(run)
    out = Path(run.out)
    _write_effective(out, run, net_cfg, train_cfg, info)
    model = build(net_cfg, seed=run.seed)

    def progress(row):
        ev = "" if row["eval_acc"] is None else f"  eval_acc {row['eval_acc']:.4f}"
        print(f"epoch {row['epoch']:>3}  lr {row['lr']:.6f}  loss {row['loss']:.4f}  "
              f"train_acc {row['train_acc']:.4f}{ev}  ({row['wall_seconds']:.1f}s)", flush=True)

    result = train(model, train_set, train_cfg, eval_data=test_set, out_dir=out, progress=progress)
    if test_set is not None:
        report = evaluate(model, test_set, run.eval_batch_size)
        report.write(out / "metrics" / "final")
        print("final epoch:\n" + report.format())
        best = out / "checkpoints" / "best.ckpt"
        if best.exists():
            best_model, header = load_checkpoint(best)
            evaluate(best_model, test_set, run.eval_batch_size).write(out / "metrics" / "best")
            print(f"best epoch {header['epoch']} metrics written to {out / 'metrics' / 'best'}")
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_eval(args):
    from . import data as D
    from .metrics import evaluate
    from .net import load_checkpoint

    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    run = _apply_flags(load_run_config(args.config), args)
    model, header = load_checkpoint(args.checkpoint)
    if args.manifest:
        manifest = D.load_manifest(args.manifest)
        dataset = D.dataset_from_manifest(manifest, args.split, model.cfg.input_size)
    else:
        train_set, test_set, _ = _load_data(run, need_train=args.split == "train")
        dataset = train_set if args.split == "train" else test_set
        if dataset is None:
            raise ConfigError(f"no {args.split} split in the configured data")
    if len(dataset.class_names) != model.cfg.num_classes:
        raise ConfigError(f"class-count mismatch: checkpoint has {model.cfg.num_classes} classes, "
                          f"data has {len(dataset.class_names)}")
    report = evaluate(model, dataset, run.eval_batch_size)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    report.write(out)
    (out / "run.json").write_text(json.dumps(_stamp(run, {"checkpoint": str(args.checkpoint),
                                                          "checkpoint_epoch": header["epoch"],
                                                          "split": args.split}), indent=2) + "\n")
    print(report.format())
    print(f"report written to {out}")
    return 0


def cmd_verify(args):
    from . import verify

    results = verify.run(args.filter)
    if not results:
        print(f"no checks match filter {args.filter!r}", file=sys.stderr)
        return 2
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return 1
    return 0


def cmd_count_params(args):
    from .net import attention_totals, build, count_parameters, format_breakdown
    from .verify import ABLATION_GRID, ANCHOR_REL, DEFAULT_TOTAL, _ablation_config

    run = load_run_config(args.config)
    cfg = _net_config(run)
    total, rows = count_parameters(build(cfg))
    print(format_breakdown(rows, total))
    att = attention_totals(cfg)
    print(f"attention: {att['kernel']} kernel taps, {att['bn']} BN terms, {att['with_bn']} with BN "
          f"(r_ncks={cfg.r_ncks}, kernel rule '{cfg.kernel_rule}')")
    print()
    print(f"{'stage 1':<10}{'stage 2':<10}{'stage 3':<10}{'stage 4':<10}{'measured':>12}{'reference':>12}"
          f"{'diff':>9}  within {ANCHOR_REL:.0%}")
    for fs, ref in ABLATION_GRID:
        n, _ = count_parameters(build(_ablation_config(fs, attention=False)))
        cells = "".join(f"{len(f)},{'/'.join(map(str, f)):<8}" for f in fs)
        print(f"{cells}{n:>12,}{ref:>12,}{(n - ref) / ref:>+9.1%}  {'yes' if abs(n - ref) <= ANCHOR_REL * ref else 'no'}")
    n, _ = count_parameters(build(_net_config(RunConfig())))
    print(f"{'default (with attention)':<40}{n:>12,}{DEFAULT_TOTAL:>12,}{(n - DEFAULT_TOTAL) / DEFAULT_TOTAL:>+9.1%}"
          f"  {'yes' if abs(n - DEFAULT_TOTAL) <= ANCHOR_REL * DEFAULT_TOTAL else 'no'}")
    return 0


def cmd_synth_data(args):
    from . import data as D

    out = Path(args.out or "synth_data")
    seed = 0 if args.seed is None else args.seed
    train = D.synth_dataset(args.classes, args.per_class, seed)
    test = D.synth_dataset(args.classes, args.test_per_class, seed + 1)
    D.save_image_tree(train, out, "train")
    D.save_image_tree(test, out, "test")
    manifest = D.load_manifest(out)
    D.write_manifest(manifest, out / "manifest.csv")
    print(manifest.summary())
    print(f"wrote {len(manifest)} images and {out / 'manifest.csv'}")
    return 0


def _apply_flags(run, args):
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    if getattr(args, "out", None) and args.command == "train":
        run.out = args.out
    if getattr(args, "deterministic", False):
        run.deterministic = True
    return run


def build_parser():
    p = argparse.ArgumentParser(prog="emc2a", description="EMC2A-Net training and evaluation kit")
    p.add_argument("--version", action="version", version=f"emc2a {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", metavar="PATH", help="YAML or JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        if out:
            sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--deterministic", action="store_true", help="single-threaded numerics")

    common(sub.add_parser("train", help="train a network and evaluate it on the test split"))
    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    common(ev)
    ev.add_argument("--checkpoint", metavar="PATH")
    ev.add_argument("--manifest", metavar="PATH", help="image tree or manifest CSV")
    ev.add_argument("--split", default="test", choices=["train", "test"])
    vf = sub.add_parser("verify", help="run gradient checks, oracles and parameter anchors")
    vf.add_argument("--filter", metavar="NAME", help="only checks whose name contains NAME")
    cp = sub.add_parser("count-params", help="parameter breakdown and fn/fs ablation table")
    cp.add_argument("--config", metavar="PATH")
    sd = sub.add_parser("synth-data", help="write a synthetic image tree with a manifest")
    sd.add_argument("--out", metavar="DIR")
    sd.add_argument("--seed", type=int)
    sd.add_argument("--classes", type=int, default=4)
    sd.add_argument("--per-class", type=int, default=100)
    sd.add_argument("--test-per-class", type=int, default=50)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
            "count-params": cmd_count_params, "synth-data": cmd_synth_data}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "deterministic", False) or args.command in ("train", "eval"):
        # only effective when numpy has not been loaded yet in this process
        for var in THREAD_VARS:
            os.environ.setdefault(var, "1")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, KeyError, ValueError, TypeError, OSError, FloatingPointError, RuntimeError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"emc2a {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
