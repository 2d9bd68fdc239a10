"""Command-line entry point: ``dlrrec {synth,swing,train,eval,report,gradcheck}``.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import dataio, swing
from .model import DLRM, MASKS, CheckpointError, load_checkpoint
from .trainer import (TABLE_ORDER, NonFiniteLossError, RunReport, TrainConfig, emit_table, evaluate, loss_mode,
                      prepare, repeat_runs)

log = logging.getLogger("dlrrec")


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def cmd_synth(args) -> int:
    try:
        cfg = dataio.SynthConfig.from_json(_read_json(args.config))
        if args.seed is not None:
            cfg.seed = args.seed
        result = dataio.synthesize(cfg)
    except (TypeError, dataio.ConfigError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from None
    dataio.write_dataset(args.out, result)
    log.info("wrote %d interactions to %s", len(result.records), args.out)
    return 0


def _train_only(records, test_fraction: float, split_seed: int):
    return dataio.split(records, test_fraction, split_seed).train


def cmd_swing(args) -> int:
    if not args.alpha > 0:
        raise UsageError(f"--alpha must be > 0, got {args.alpha}")
    if args.topk < 1:
        raise UsageError(f"--topk must be >= 1, got {args.topk}")
    path = Path(args.data)
    records = dataio.load_interactions(path / "interactions.jsonl" if path.is_dir() else path)
    if args.train_only and records:
        records = _train_only(records, args.test_fraction, args.split_seed)
    graph = swing.build_graph(records, positive_only=not args.all_interactions)
    sims = swing.top_k_neighbors(graph, args.side, args.topk, args.alpha)
    sims.save(args.out)
    log.info("%s side: %d entities, %d with neighbors", args.side, len(sims.neighbors),
             sum(1 for v in sims.neighbors.values() if v))
    return 0


def _load_run_config(args) -> TrainConfig:
    try:
        obj = _read_json(args.config) if args.config else {}
        cfg = TrainConfig.from_json(obj)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid run config: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.model.seed = args.seed
    if getattr(args, "max_epochs", None) is not None:
        cfg.max_epochs = args.max_epochs
    if getattr(args, "mask", None) is not None:
        if args.mask not in MASKS:
            raise UsageError(f"unknown mask {args.mask!r}; choose from {sorted(MASKS)}")
        cfg.model.mask = args.mask
    if getattr(args, "no_contrastive", False):
        cfg.loss.contrastive = False
    return cfg


def _load_sims(path, side):
    if path is None:
        return None
    try:
        sims = swing.SimilarityGraph.load(path)
    except FileNotFoundError:
        raise UsageError(f"no such similarity file: {path}") from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{path}: bad similarity file ({exc})") from None
    if sims.side != side:
        raise UsageError(f"{path} holds {sims.side}-side similarities, expected {side}")
    return sims


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    user_sims = _load_sims(args.user_sims, "user")
    item_sims = _load_sims(args.item_sims, "item")
    if cfg.loss.contrastive and (user_sims is None or item_sims is None):
        raise UsageError("contrastive training needs --user-sims and --item-sims")
    try:
        data = prepare(dataio.load_dataset(args.data), cfg, user_sims, item_sims)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, agg = repeat_runs(cfg, data, args.repeats, out)
    log.info("aggregate: %s", json.dumps(agg))
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    config_path = Path(args.config) if args.config else ckpt.parent / "config.json"
    args.config = str(config_path)
    cfg = _load_run_config(args)
    try:
        params = load_checkpoint(ckpt, cfg.model)
    except FileNotFoundError:
        raise UsageError(f"no such checkpoint: {ckpt}") from None
    except CheckpointError as exc:
        raise UsageError(f"checkpoint does not match config: {exc}") from None
    data = prepare(dataio.load_dataset(args.data), cfg, None, None)
    part = data.test if args.split == "test" else data.train
    result = evaluate(DLRM(cfg.model, params), part, data.tables, cfg.threshold)
    print(json.dumps(result.to_json()))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(args.seed, args.seeds, args.composite_seeds)
    for line in report.lines():
        print(line)
    print("gradcheck", "passed" if report.ok else f"FAILED: {', '.join(report.failures)}")
    return 0 if report.ok else 1


def _collect_reports(run_dir: Path) -> list[RunReport]:
    paths = [run_dir / "report.json"] if (run_dir / "report.json").exists() else sorted(run_dir.glob("run-*/report.json"))
    if not paths:
        raise UsageError(f"no report.json under {run_dir}")
    reports = []
    for p in paths:
        obj = _read_json(p)
        try:
            reports.append(RunReport(obj["config"], [], obj["best_epoch"], obj["best_fp_rate"], obj["best_accuracy"],
                                     obj.get("checkpoint"), obj["stop_reason"]))
        except KeyError as exc:
            raise UsageError(f"{p}: missing field {exc}") from None
    return reports


def cmd_report(args) -> int:
    groups: dict[tuple[str, str], list[RunReport]] = {}
    for d in args.runs:
        path = Path(d)
        if not path.is_dir():
            raise UsageError(f"not a run directory: {d}")
        for rep in _collect_reports(path):
            cfg = TrainConfig.from_json(rep.config)
            groups.setdefault((cfg.model.mask, loss_mode(cfg.loss)), []).append(rep)
    order = [k for k in TABLE_ORDER if k in groups] + [k for k in groups if k not in TABLE_ORDER]
    table = emit_table([(mask, mode, groups[(mask, mode)]) for mask, mode in order])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.md").write_text(table.to_markdown())
    (out / "table.json").write_text(json.dumps(table.to_json(), indent=1) + "\n")
    print(table.to_markdown(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlrrec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a planted-cluster dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("swing", help="compute top-k SWING neighbors")
    s.add_argument("--data", required=True, help="dataset directory or interactions JSONL file")
    s.add_argument("--side", choices=("user", "item"), required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--topk", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--train-only", action="store_true", help="drop the test part of the default split first")
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--all-interactions", action="store_true", help="build edges from negatives too")
    s.set_defaults(func=cmd_swing)

    s = sub.add_parser("train", help="train and write per-run reports")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--user-sims")
    s.add_argument("--item-sims")
    s.add_argument("--out", required=True)
    s.add_argument("--repeats", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--mask")
    s.add_argument("--no-contrastive", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--mask")
    s.add_argument("--config", help="run config (default: config.json beside the checkpoint)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of all ops and the composite loss")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--composite-seeds", type=int, default=None)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="build the comparison table from run directories")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    level = os.environ.get("DLRREC_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(asctime)s %(levelname)s %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (dataio.DataFormatError, dataio.ValidationError, dataio.EmbeddingFormatError,
            dataio.MissingEmbeddingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
