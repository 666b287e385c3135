"""Command line driver: ``eqcanon {gen-data,train,eval,audit,bench} --config FILE``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .bench import benchmark_inference, growth, overhead_ratio, write_bench_csv
from .groups import GroupError, parse_group
from .pipeline import audit_equivariance, write_audit_csv
from .svgplot import line_chart
from .tasks import save_dataset
from .tensor import CheckpointError, load_tensors
from .training import (METRIC_COLUMNS, build_model, evaluate, make_split, model_inputs,
                       split_size, train)

log = logging.getLogger("eqcanon")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eqcanon", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in [("gen-data", "generate and save dataset splits"),
                        ("train", "train a model, write metrics.csv and model.canon1"),
                        ("eval", "evaluate a checkpoint on a split"),
                        ("audit", "equivariance audit, write audit.csv"),
                        ("bench", "inference latency benchmark, write bench.csv")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="flat key = value config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--out", default="out", help="output root directory")
        if name in ("eval", "audit"):
            s.add_argument("--checkpoint", default=None, help="CANON1 parameters (default: fresh init for audit)")
    return p


def _write_resolved(cfg, out: Path) -> None:
    (out / "resolved_config.txt").write_text(C.dump(cfg))


def cmd_gen_data(cfg, out: Path, args) -> None:
    for split in ("train", "val", "test"):
        if split_size(cfg, split) == 0:
            continue
        data = make_split(cfg, split)
        meta = {"task": cfg.task.name, "split": split, "seed": cfg.task.seed}
        save_dataset(out / f"{split}.canon1", data, meta)
        log.info("wrote %s (%d samples)", out / f"{split}.canon1", len(data))


def cmd_train(cfg, out: Path, args) -> None:
    res = train(cfg, out)
    rows = res.rows
    for split in ("train", "val"):
        sel = [r for r in rows if r[1] == split]
        if sel:
            line_chart({f"{split} loss": ([r[0] for r in sel], [r[2] for r in sel])}, out / f"{split}_loss.svg",
                       title=f"{cfg.task.name} {split} loss", xlabel="epoch", ylabel="loss", logy=True)
    log.info("trained %d epochs; checkpoint %s", len({r[0] for r in rows}), out / "model.canon1")


def cmd_eval(cfg, out: Path, args) -> None:
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.canon1"
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    row = evaluate(cfg, ckpt)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])
    log.info("eval %s: loss %.6g metric %.6g", row[1], row[2], row[3])


def cmd_audit(cfg, out: Path, args) -> None:
    m = build_model(cfg)
    if args.checkpoint:
        m.params.load_state(load_tensors(args.checkpoint))
    data = make_split(cfg, "test")
    n = min(cfg.audit.n_samples, len(data))
    data = data.subset(np.arange(n))
    spec = parse_group(cfg.audit.group)
    rep = audit_equivariance(m, spec, model_inputs(m.task, data), cfg.audit.n_transforms, cfg.audit.tol,
                             np.random.default_rng(cfg.audit.seed), exhaustive=cfg.audit.exhaustive)
    write_audit_csv(rep, out / "audit.csv")
    status = "PASS" if rep.passed(cfg.audit.tol) else "FAIL"
    log.info("audit %s: %s", status, rep.summary())
    print(rep.summary())


def cmd_bench(cfg, out: Path, args) -> None:
    rows = benchmark_inference(cfg)
    write_bench_csv(rows, out / "bench.csv")
    series = {}
    for comp in ("image.canonicalizer", "image.gcnn"):
        sel = sorted((r.group_order, r.median_ms) for r in rows if r.component == comp)
        if sel:
            series[comp] = ([s[0] for s in sel], [s[1] for s in sel])
    line_chart(series, out / "bench.svg", title="inference latency vs group order",
               xlabel="group order", ylabel="median ms", logy=True)
    log.info("shapes canonicalizer overhead %.1f%%; canonicalizer growth %.2fx; gcnn growth %.2fx",
             100 * overhead_ratio(rows), growth(rows, "image.canonicalizer"), growth(rows, "image.gcnn"))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "audit": cmd_audit, "bench": cmd_bench}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    try:
        args = build_parser().parse_args(argv)
        cfg = C.load_config(args.config, args.set)
        # cheap early checks so group typos are config errors, not runtime errors
        for g in (cfg.audit.group, cfg.eval.group, cfg.model.canon_group, cfg.task.group):
            parse_group(g)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    except (C.ConfigError, GroupError) as e:
        log.error("config error: %s", e)
        return 1
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved(cfg, out)
        COMMANDS[args.command](cfg, out, args)
    except (CheckpointError, FileNotFoundError, ValueError, RuntimeError, KeyError, ArithmeticError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
