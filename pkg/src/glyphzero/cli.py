"""Command-line entry point: ``glyphzero <command> [flags]``.

Commands: gen-data, train, eval, sweep, ablate, report. Every command writes
into a run directory (``--out``, or ``<config out>/<command>-<timestamp>``)
together with the effective ``config.yaml``. ``GLYPHZERO_THREADS`` caps the
BLAS thread pool; it must be set before numpy is imported, which the
``glyphzero`` console script does.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

THREADS_ENV = "GLYPHZERO_THREADS"

log = logging.getLogger("glyphzero")


def _apply_thread_env() -> None:
    n = os.environ.get(THREADS_ENV)
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


class CommandError(Exception):
    pass


def _run_dir(cfg, args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(cfg["out"]) / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CommandError(f"output directory {out} is not empty (pass --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
    return out


def _dataset(cfg):
    from . import glyphs

    d = cfg["data"]
    if not d["dir"]:
        return cfg.make_dataset()
    root = Path(d["dir"])
    if not (root / "manifest.json").is_file():
        raise CommandError(f"dataset not found: {root / 'manifest.json'}")
    ds = glyphs.read_dataset(root)
    if ds.split is None:
        s = cfg["split"]
        ds.split = glyphs.split_dataset(ds.chars, s["train"], s["val"], s["test"], s["policy"], cfg.data_seed())
    return ds


def _checkpoint(path):
    from .trainer import load_checkpoint

    if path is None:
        raise CommandError("--checkpoint is required")
    if not Path(path).is_file():
        raise CommandError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _candidates(cfg, ds):
    c = cfg["eval"]["candidates"]
    if c == "all":
        return ds.char_ids
    if c == "split":
        return sorted(set(ds.split.train_ids) | set(ds.split.val_ids) | set(ds.split.test_ids))
    raise CommandError(f"eval.candidates must be 'all' or 'split', got {c!r}")


# -- commands


def cmd_gen_data(cfg, args) -> Path:
    from .glyphs import write_dataset

    out = _run_dir(cfg, args, "gen-data")
    ds = _dataset(cfg)
    # config.yaml already sits in ``out``; the dataset writer wants the directory to itself
    write_dataset(ds, out / "dataset", force=args.force)
    print(f"wrote {len(ds.chars)} characters, {ds.n_radicals} radicals, styles {sorted(ds.images)} to {out / 'dataset'}")
    return out


def cmd_train(cfg, args) -> Path:
    from . import losses as L
    from .network import build_model
    from .protocols import model_config_for
    from .trainer import train

    out = _run_dir(cfg, args, "train")
    ds = _dataset(cfg)
    # a loaded dataset may disagree with the data section; its own sizes win
    mcfg = model_config_for(cfg.model_config(), ds, ds.split)
    tcfg = cfg.train_config()
    model = build_model(mcfg)
    centers = L.Centers.zeros(mcfg.n_known, mcfg.embedding_shape, tcfg.center_alpha)
    result = train(model, centers, ds, ds.split, tcfg, _candidates(cfg, ds))
    (out / "checkpoint.gzck").write_bytes(result.checkpoint)
    result.log.write_csv(out / "train_log.csv")
    (out / "split.json").write_text(json.dumps(ds.split.to_dict(), sort_keys=True), encoding="utf-8")
    acc = "n/a" if result.best_val_accuracy is None else f"{100 * result.best_val_accuracy:.2f}%"
    print(f"best epoch {result.best_epoch}, validation AR {acc}; checkpoint {out / 'checkpoint.gzck'}")
    return out


def cmd_eval(cfg, args) -> Path:
    from .inference import build_bank, evaluate, save_bank
    from .protocols import write_rows
    from .trainer import checkpoint_digest, validation_images

    state = _checkpoint(args.checkpoint)
    out = _run_dir(cfg, args, "eval")
    ds = _dataset(cfg)
    model = state.build()
    tcfg = cfg.train_config()
    digest = checkpoint_digest(Path(args.checkpoint).read_bytes())
    bank = build_bank(model, _candidates(cfg, ds), ds, normalize=cfg["eval"]["normalize"], provenance={"checkpoint": digest})
    test_ids = ds.split.test_ids
    queries = validation_images(ds, test_ids, tcfg)
    report = evaluate(model, bank, test_ids, queries, {"style": tcfg.style, "test_size": len(test_ids), "checkpoint": digest})
    save_bank(bank, out / "bank.gzbank")
    write_rows(out / "eval.csv", report.rows())
    (out / "eval.txt").write_text(report.summary() + "\n", encoding="utf-8")
    print(f"AR {100 * report.accuracy:.2f}% ({report.n_correct}/{report.total})")
    return out


def cmd_sweep(cfg, args) -> Path:
    from .protocols import run_unseen_sweep, write_rows

    out = _run_dir(cfg, args, "sweep")
    ds = _dataset(cfg)
    s = cfg["sweep"]
    rows = run_unseen_sweep(
        ds, s["train_sizes"], cfg.model_config(), cfg.train_config(),
        val_n=s["val"], test_n=s["test"], policy=cfg["split"]["policy"], split_seed=cfg.data_seed(),
    )
    write_rows(out / "sweep.csv", rows)
    for r in rows:
        print(f"train {r['train_size']}: {r['accuracy']} {r['status']}")
    return out


def cmd_ablate(cfg, args) -> Path:
    from .protocols import LOSS_COMBINATIONS, et_difference, run_ablation, write_rows

    out = _run_dir(cfg, args, "ablate")
    ds = _dataset(cfg)
    a = dict(cfg["ablate"])
    if a["losses"] == "all":
        a["losses"] = [list(c) for c in LOSS_COMBINATIONS]
    if a["losses"] is not None:
        a["losses"] = [tuple(c) for c in a["losses"]]
    if all(v is None for v in a.values()):
        raise CommandError("ablate: set at least one of ablate.losses / extra_thinking / blur / rotation")
    rows = run_ablation(ds, ds.split, cfg.model_config(), cfg.train_config(), **a)
    write_rows(out / "ablation.csv", rows)
    diffs = et_difference(rows)
    if diffs:
        write_rows(out / "et_difference.csv", diffs)
        for d in diffs:
            print(f"ET diff at blur {d['blur_sigma']} rotation {d['rotation']}: {100 * d['diff']:+.2f} pp")
    print(f"{len(rows)} ablation rows written to {out / 'ablation.csv'}")
    return out


def cmd_report(cfg, args) -> Path:
    from .inference import build_bank
    from .protocols import complexity_report, format_complexity, write_rows

    state = _checkpoint(args.checkpoint)
    out = _run_dir(cfg, args, "report")
    ds = _dataset(cfg)
    model = state.build()
    bank = build_bank(model, _candidates(cfg, ds), ds)
    # timing wants at least 100 queries; small datasets are cycled
    ids = ds.char_ids[:200]
    ids = [ids[i % len(ids)] for i in range(max(100, len(ids)))]
    queries = ds.glyphs(cfg["train"]["style"], ids)
    rep = complexity_report(model, bank, queries, Path(args.checkpoint).read_bytes())
    text = format_complexity(rep)
    (out / "complexity.txt").write_text(text + "\n", encoding="utf-8")
    write_rows(out / "complexity.csv", [{k: v for k, v in rep.items() if k != "timings"}])
    print(text)
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glyphzero", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config (defaults apply to missing keys)")
        p.add_argument("--out", help="run directory (default: <out>/<command>-<timestamp>)")
        p.add_argument("--seed", type=int, help="global seed, overrides the config file")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "report"):
            p.add_argument("--checkpoint", help="checkpoint file written by train")
    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .config import ConfigError, RunConfig

    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
        if args.seed is not None and args.seed < 0:
            raise ConfigError(f"--seed must be non-negative, got {args.seed}")
        cfg = cfg.override(seed=args.seed)
        COMMANDS[args.command](cfg, args)
    except (CommandError, ConfigError, FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"glyphzero {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
