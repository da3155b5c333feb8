"""``duett`` command line.

Exit codes: 0 success, 2 usage error, 3 invalid config, 4 data or
checkpoint error, 5 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import checkpoint as ckpt_io
from .benchmarks import SUITES, sweep_labels
from .binning import BinnedData
from .config import ABLATION_FLAGS, ConfigError, RunConfig, load_config
from .data import DataError, apply_norm, fit_norm, generate_synthetic, read_stays, split, write_stays
from .finetune import evaluate, reconstruct_masked
from .metrics import write_curves
from .model import DuETT
from .pipeline import (
    bin_split,
    build,
    restore_head,
    restore_heads,
    restore_model,
    run_finetune,
    run_pretrain,
    save_finetuned,
    save_pretrained,
    vocab_from,
    vocab_of,
)
from .ssl import DivergenceError
from .tensor import NonFiniteError, precision

log = logging.getLogger("duett")

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4, 5


def _sibling(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _write_resolved(run: RunConfig, out) -> None:
    _sibling(out, ".resolved.cfg").write_text(run.to_text(), encoding="utf-8")


def _write_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _write_counters(model: DuETT, path) -> None:
    c = model.last_counters
    rows = []
    for i, kind in enumerate(c.kinds):
        rows.append({
            "sublayer": i,
            "kind": kind,
            "attention_rows": c.attention_dims[i][0],
            "attention_cols": c.attention_dims[i][1],
            "flops": c.flops[i],
        })
    for name, n in model.parameter_report().items():
        rows.append({"sublayer": "params", "kind": name, "attention_rows": "", "attention_cols": "", "flops": n})
    _write_csv(rows, path)


def _load_vocab(args, train_stays) -> dict[str, int]:
    if getattr(args, "stats", None):
        d = json.loads(Path(args.stats).read_text(encoding="utf-8"))
        return {t: i for i, t in enumerate(d["event_types"])}
    return vocab_from(train_stays)


def _binned(path, vocab, run: RunConfig, label_names=None, n_static=None) -> BinnedData:
    stays, _ = read_stays(path)
    if not stays:
        raise DataError(f"{path}: no stays")
    return bin_split(stays, vocab, run, label_names, n_static)


# -- subcommands ------------------------------------------------------------------------


def cmd_generate(args) -> None:
    synth = SUITES[args.suite].synth
    if args.n_stays is not None:
        import dataclasses

        synth = dataclasses.replace(synth, n_stays=args.n_stays)
    stays = generate_synthetic(synth, args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        write_stays(stays, fh)


def cmd_preprocess(args) -> None:
    run = load_config(args.config)
    stays, _ = read_stays(args.data)
    train, val, test = split(stays, seed=run.seed)
    vocab = vocab_from(train)
    stats = fit_norm(train, vocab, normalize_static=run.normalize_static)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            write_stays([apply_norm(s, stats) for s in part], fh)
    header = {"event_types": sorted(vocab, key=vocab.get), **stats.to_dict()}
    (out / "norm.json").write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    _write_resolved(run, out / "preprocess")


def _pretrain(run: RunConfig, train_path, val_path, out, stats=None):
    train_stays, _ = read_stays(train_path)
    if not train_stays:
        raise DataError(f"{train_path}: no stays")
    vocab = _load_vocab(argparse.Namespace(stats=stats), train_stays)
    train = bin_split(train_stays, vocab, run)
    val = _binned(val_path, vocab, run, train.label_names, train.static.shape[1])
    rows: list[dict] = []
    model, heads, result = run_pretrain(train, val, run, on_epoch=rows.append)
    ck = save_pretrained(out, model, heads, run, train, result)
    _write_csv(rows, _sibling(out, ".epochs.csv"))
    _write_counters(model, _sibling(out, ".counters.csv"))
    _write_resolved(run, out)
    return ck, train, val


def cmd_pretrain(args) -> None:
    run = load_config(args.config)
    _pretrain(run, args.data, args.val, args.out, args.stats)


def _finetune(run: RunConfig, args, probe: bool, pretrained: ckpt_io.Checkpoint | None, out):
    if pretrained is not None:
        vocab = vocab_of(pretrained)
        dm = pretrained.meta["data"]
        train = _binned(args.data, vocab, run, run.label_list(), dm["n_static"])
        model = restore_model(pretrained, seed=run.seed)
    else:
        if probe:
            raise ConfigError("probe needs a pre-trained --checkpoint")
        stays, _ = read_stays(args.data)
        vocab = _load_vocab(args, stays)
        train = bin_split(stays, vocab, run)
        model, _ = build(run, len(vocab), train.static.shape[1])
    val = _binned(args.val, vocab, run, train.label_names, train.static.shape[1])
    rows: list[dict] = []
    ft = run_finetune(train, val, run, model, probe=probe, on_epoch=rows.append)
    save_finetuned(out, ft.model, ft.head, run, train, probe, ft.top_epochs)
    _write_csv(rows, _sibling(out, ".epochs.csv"))
    _write_resolved(run, out)
    report_data = val
    if getattr(args, "test", None):
        report_data = _binned(args.test, vocab, run, train.label_names, train.static.shape[1])
    report, probs = evaluate(ft.model, ft.head, report_data)
    _write_report(report, probs, report_data, _sibling(out, ".report"))
    _write_counters(ft.model, _sibling(out, ".counters.csv"))
    return ft, report


def _write_report(report, probs, data: BinnedData, prefix: Path) -> None:
    report.to_csv(prefix.with_name(prefix.name + ".csv"))
    prefix.with_name(prefix.name + ".txt").write_text(report.summary(), encoding="utf-8")
    try:
        write_curves(probs, data.labels, data.label_names, prefix.with_name(prefix.name + "_curves.csv"))
    except ValueError:
        log.warning("curves skipped: a label has a single class")


def _maybe_checkpoint(path):
    return ckpt_io.load(path) if path else None


def cmd_finetune(args, probe: bool = False) -> None:
    run = load_config(args.config)
    pretrained = None if run.no_ssl else _maybe_checkpoint(args.checkpoint)
    _finetune(run, args, probe, pretrained, args.out)


def cmd_eval(args) -> None:
    ck = ckpt_io.load(args.checkpoint)
    if "cls" not in {k.split(".")[0] for k in ck.tensors}:
        raise DataError("eval needs a fine-tuned checkpoint")
    dm = ck.meta["data"]
    run = RunConfig(n_t=dm["n_t"], window_days=str(dm["window_days"]), aggregation=dm["aggregation"])
    data = _binned(args.data, vocab_of(ck), run, dm["label_names"], dm["n_static"])
    model, head = restore_model(ck), restore_head(ck)
    report, probs = evaluate(model, head, data)
    _write_report(report, probs, data, Path(args.out))
    sys.stdout.write(report.summary())


def cmd_reconstruct(args) -> None:
    ck = ckpt_io.load(args.checkpoint)
    if "heads" not in {k.split(".")[0] for k in ck.tensors}:
        raise DataError("reconstruct needs a pre-trained checkpoint with SSL heads")
    vocab = vocab_of(ck)
    if args.event not in vocab:
        raise DataError(f"event type {args.event!r} is not in the checkpoint vocabulary")
    dm = ck.meta["data"]
    run = RunConfig(n_t=dm["n_t"], window_days=str(dm["window_days"]), aggregation=dm["aggregation"])
    data = _binned(args.data, vocab, run, dm["label_names"], dm["n_static"])
    rec = reconstruct_masked(restore_model(ck), restore_heads(ck), data, vocab[args.event])
    rows = []
    for i, sid in enumerate(data.stay_ids):
        for j in range(data.x.shape[2]):
            observed = data.m[i, vocab[args.event], j] > 0
            rows.append({"stay_id": sid, "bin": j, "predicted": float(rec.predictions[i, j]),
                         "observed": int(observed),
                         "actual": float(data.x[i, vocab[args.event], j]) if observed else ""})
    _write_csv(rows, args.out)
    msg = "absent (target never observed)" if rec.mse is None else f"{rec.mse:.6f}"
    sys.stdout.write(f"masked reconstruction MSE for {args.event}: {msg}\n")


def cmd_sweep(args) -> None:
    run = load_config(args.config)
    fractions = [float(f) for f in args.fractions.split(",")]
    for f in fractions:
        if not 0 < f <= 1:
            raise ConfigError(f"label fraction must lie in (0, 1], got {f}")
    ck = ckpt_io.load(args.checkpoint)
    vocab = vocab_of(ck)
    dm = ck.meta["data"]
    train = _binned(args.data, vocab, run, run.label_list(), dm["n_static"])
    val = _binned(args.val, vocab, run, train.label_names, dm["n_static"])
    test = _binned(args.test, vocab, run, train.label_names, dm["n_static"]) if args.test else val
    state = restore_model(ck).state_dict()
    rows = sweep_labels(train, val, test, run, state, fractions)
    _write_csv(rows, args.out)
    _write_resolved(run, args.out)


def cmd_ablate(args) -> None:
    run = load_config(args.config)
    if args.variant != "duett":
        run = run.with_flag(args.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck = None
    if not run.no_ssl:
        ck, _, _ = _pretrain(run, args.data, args.val, out / "pretrain.bin", args.stats)
    ft, report = _finetune(run, args, False, ck, out / "finetune.bin")
    (out / "summary.txt").write_text(f"variant: {args.variant}\n" + report.summary(), encoding="utf-8")
    sys.stdout.write(report.summary())


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duett", description="Dual event/time Transformer pipeline")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    g = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    g.add_argument("--suite", choices=sorted(SUITES), default="classification")
    g.add_argument("--seed", type=int, default=2020)
    g.add_argument("--n-stays", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    pp = sub.add_parser("preprocess", help="split, fit normalization on train, write normalized splits")
    pp.add_argument("--config", required=True)
    pp.add_argument("--data", required=True)
    pp.add_argument("--out-dir", required=True)
    pp.set_defaults(func=cmd_preprocess)

    pt = sub.add_parser("pretrain", help="masked self-supervised pre-training")
    pt.add_argument("--config", required=True)
    pt.add_argument("--data", required=True)
    pt.add_argument("--val", required=True)
    pt.add_argument("--stats", help="norm.json from preprocess; fixes the event vocabulary")
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_pretrain)

    for name, probe in (("finetune", False), ("probe", True)):
        f = sub.add_parser(name, help="linear probe on a frozen encoder" if probe else "supervised fine-tuning")
        f.add_argument("--config", required=True)
        f.add_argument("--data", required=True)
        f.add_argument("--val", required=True)
        f.add_argument("--test")
        f.add_argument("--checkpoint", required=probe)
        f.add_argument("--stats")
        f.add_argument("--out", required=True)
        f.set_defaults(func=lambda a, _p=probe: cmd_finetune(a, _p))

    e = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output prefix for report CSV/TXT and curves")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reconstruct", help="mask one event type and reconstruct its values")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--event", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("sweep-labels", help="fine-tune on increasing labelled fractions")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--test")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--fractions", default="0.1,0.3,1.0")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="pre-train and fine-tune one ablation variant")
    a.add_argument("--config", required=True)
    a.add_argument("--variant", required=True, choices=("duett",) + ABLATION_FLAGS)
    a.add_argument("--data", required=True)
    a.add_argument("--val", required=True)
    a.add_argument("--test")
    a.add_argument("--stats")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_ablate)
    return p


def _thread_limit():
    n = os.environ.get("DUETT_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        prec = load_config(args.config).precision if getattr(args, "config", None) else "float32"
        with _thread_limit(), precision(prec):
            args.func(args)
    except ConfigError as exc:
        print(f"duett: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"duett: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ckpt_io.CheckpointError, OSError, KeyError) as exc:
        print(f"duett: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
