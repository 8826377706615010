"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError, TS2TCError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("ts2tc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# -- csv helpers ---------------------------------------------------------------


def _write_table(path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    if path is None or str(path) == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


def _read_table(path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    rows = list(csv.reader(p.read_text().splitlines()))
    rows = [r for r in rows if r and not r[0].startswith("#")]
    if len(rows) < 2:
        raise DataError(f"{p}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    cols: dict[str, list[float]] = {h: [] for h in header}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{p} line {lineno}: expected {len(header)} fields, got {len(row)}")
        for h, v in zip(header, row):
            try:
                cols[h].append(float(v))
            except ValueError:
                raise DataError(f"{p} line {lineno}: cannot parse {v!r} in column {h!r}") from None
    return {h: np.asarray(v) for h, v in cols.items()}


def _emit_json(obj, path=None) -> None:
    text = json.dumps(obj, indent=2, default=_jsonable) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _load(path, args):
    from .signal import load_record

    return load_record(path, args.format, args.rate)


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    from .signal import save_record, synth_ppg

    rec = synth_ppg(args.hr, noise_std=args.noise, length_s=args.seconds, rate=args.rate, seed=args.seed,
                    label=args.label)
    save_record(rec, args.out)
    log.info("wrote %d samples to %s", len(rec), args.out)
    return EXIT_OK


def cmd_decompose(args) -> int:
    from .vmd import VmdConfig, vmd_decompose

    rec = _load(args.input, args)
    cfg = VmdConfig(k=args.k, alpha=args.alpha, tau=args.tau, eps=args.eps, max_iter=args.max_iter)
    ms = vmd_decompose(rec.samples, cfg)
    header = [f"mode{i + 1}@{w:.6f}" for i, w in enumerate(ms.center_freqs)] + ["residual"]
    _write_table(args.out, header, np.vstack([ms.modes, ms.residual[None]]).T)
    print(
        f"center frequencies (Hz): {', '.join(f'{w * rec.rate:.4f}' for w in ms.center_freqs)}; "
        f"iterations {ms.iterations_used}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_stft(args) -> int:
    from .spectrogram import StftConfig, patchify_and_mask, stft

    rec = _load(args.input, args)
    spec = stft(rec.samples, StftConfig(args.n_fft, args.hop, args.window))
    _write_table(args.out, [f"bin{j}" for j in range(spec.bins)], spec.grid)
    if args.mask_out:
        ps = patchify_and_mask(spec, tuple(args.patch), args.mask_ratio, args.seed)
        masked = set(ps.masked_idx.tolist())
        _write_table(args.mask_out, ["patch", "row", "col", "masked"],
                     [[i, r, c, int(i in masked)] for i, (r, c) in enumerate(ps.positions.tolist())])
    return EXIT_OK


def _pipeline_config(args):
    from .config import build_config, load_config_file
    from .pipeline import PipelineConfig, toy_config

    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    cfg = build_config(values, toy_config() if getattr(args, "toy", False) else PipelineConfig())
    over = {}
    for key in ("gamma", "window_s", "train_fraction"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "seed", None) is not None:
        over["seeds"] = (args.seed,)
    cfg = replace(cfg, **over)
    for group in ("pretrain", "twrg", "downstream"):
        tover = {k: getattr(args, k) for k in ("lr", "batch_size", "epochs") if getattr(args, k, None) is not None}
        if tover:
            cfg = replace(cfg, **{group: replace(getattr(cfg, group), **tover)})
    return cfg


def _records(paths, n_synth, seed, labeled, args):
    from .pipeline import synthetic_records

    if paths:
        recs = [_load(p, args) for p in paths]
        if labeled and any(r.label is None for r in recs):
            raise DataError("labelled records need a 'label=' header")
        return recs
    if n_synth:
        return synthetic_records(n_synth, seed, labeled=labeled)
    raise DataError("give record files or a synthetic record count")


def cmd_pretrain(args) -> int:
    from .pipeline import TASKS, build_datasets, load_pretrained, phase_seed, pretrain, save_pretrained

    cfg = _pipeline_config(args)
    seed = cfg.seeds[0]
    recs = _records(args.unlabeled, args.synthetic, seed + 1, False, args)
    data = build_datasets(recs, cfg, phase_seed(seed, 2) % 2**31)
    pseed = phase_seed(seed, 3) % 2**31
    pre = load_pretrained(args.init, cfg, data, pseed) if args.init else None
    tasks = TASKS if args.task == "all" else (args.task,)
    pre = pretrain(cfg, data, pseed, tasks, pre)
    out = Path(args.out)
    save_pretrained(pre, out, cfg, seed)
    rows = []
    for task, trace in pre.traces.items():
        for epoch, loss in enumerate(trace.losses, start=1):
            acc = trace.accuracies[epoch - 1] if trace.accuracies else ""
            rows.append([task, epoch, loss, acc])
    if args.trace_out:
        _write_table(args.trace_out, ["task", "epoch", "loss", "accuracy"], rows)
    summary = {"checkpoint": str(out)}
    for task, trace in pre.traces.items():
        summary[task] = {"first_loss": trace.losses[0], "final_loss": trace.losses[-1]}
        if trace.accuracies:
            summary[task]["final_accuracy"] = trace.accuracies[-1]
    _emit_json(summary)
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import config_from_dict
    from .pipeline import build_datasets, load_pretrained, phase_seed, train_subset
    from .transfer import dpt_finetune_spectrogram, dpt_finetune_temporal, fine_tune, linear_probe

    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(ckpt.config)
    overrides = {k: getattr(args, k) for k in ("lr", "batch_size", "epochs") if getattr(args, k) is not None}
    tcfg = replace(cfg.downstream, seed=args.seed if args.seed is not None else cfg.seeds[0], **overrides)
    seed = ckpt.seed or 0
    recs = _records(args.labeled, args.synthetic, seed + 2, True, args)
    data = build_datasets(recs, cfg, phase_seed(seed, 4) % 2**31)
    keep = train_subset(np.unique(data.temporal.record_ids), args.train_fraction, tcfg.seed)
    data = data.by_records(keep)
    pre = load_pretrained(args.checkpoint, cfg, data, seed)
    m = pre.models
    temporal = args.domain == "temporal"
    d = data.temporal if temporal else data.spectral
    labels = d.labels
    mean, scale = float(labels.mean()), float(labels.std()) or 1.0
    d = replace(d, labels=(labels - mean) / scale)
    if args.mode == "fine-tune":
        res = fine_tune(m["encoder"] if temporal else m["spec_encoder"], d, tcfg)
    elif args.mode == "linear-probe":
        res = linear_probe(m["encoder"] if temporal else m["spec_encoder"], d, tcfg)
    elif temporal:
        res = dpt_finetune_temporal(m["encoder"], m["decoder"], d, tcfg)
    else:
        res = dpt_finetune_spectrogram(m["spec_encoder"], m["spec_decoder"], d, tcfg)
    _write_table(args.out, ["record", "label", "prediction"],
                 zip(d.record_ids.tolist(), labels, res.predictions * scale + mean))
    print(f"train MAE {res.trace.losses[0] * scale:.6g} -> {res.trace.losses[-1] * scale:.6g}", file=sys.stderr)
    return EXIT_OK


def cmd_fuse(args) -> int:
    from .fusion import ols_fit

    cols = _read_table(args.input)
    names = args.columns.split(",")
    missing = [c for c in names + [args.label] if c not in cols]
    if missing:
        raise DataError(f"missing columns {missing}; have {sorted(cols)}")
    if len(names) != 3:
        raise DataError("the combiner takes exactly three prediction columns")
    rep = ols_fit(np.stack([cols[c] for c in names], axis=1), cols[args.label])
    if args.output_format == "csv":
        _write_table(args.out, ["phi0", "phi1", "phi2", "phi3", "r_squared", "residual_potential"],
                     [[rep.phi0, *rep.phi, rep.r_squared, rep.residual_potential]])
    else:
        _emit_json(rep.as_dict(), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import MetricSummary, bland_altman, clarke_labels, clarke_zones, pearson_r, regression_metrics

    cols = _read_table(args.input)
    if args.label not in cols:
        raise DataError(f"missing label column {args.label!r}")
    preds = [c for c in cols if c.startswith(args.prefix) and c != args.label]
    if not preds:
        raise DataError(f"no prediction columns starting with {args.prefix!r}")
    gt = cols[args.label]
    runs = [regression_metrics(gt, cols[c]) for c in preds]
    summary = MetricSummary.from_runs(runs)
    est = cols[preds[0]]
    out = {"columns": preds, "summary": summary.as_dict(), "pearson_r": pearson_r(gt, est)}
    if len(gt) >= 2:
        bias, lo, hi = bland_altman(gt, est)
        out["bland_altman"] = {"bias": bias, "lower": lo, "upper": hi}
        if args.bland_altman_out:
            _write_table(args.bland_altman_out, ["mean", "difference"], zip((gt + est) / 2, est - gt))
    if args.glucose:
        out["clarke"] = clarke_zones(gt, est)
        if args.clarke_out:
            _write_table(args.clarke_out, ["reference", "estimate", "zone"], zip(gt, est, clarke_labels(gt, est)))
    _emit_json(out, args.out)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    cfg = _pipeline_config(args)
    seed = cfg.seeds[0]
    unl = _records(args.unlabeled, args.synthetic_unlabeled, seed + 1, False, args)
    lab = _records(args.labeled, args.synthetic_labeled, seed + 2, True, args)
    res = run_pipeline(cfg, unl, lab, args.out_dir)
    _emit_json({
        "report": res.report.as_dict(),
        "summary": res.summary.as_dict(),
        "runs": [{"seed": r.seed, "report": r.report.as_dict(), "test": asdict(r.test_metrics),
                  "val_mae": r.val_mae, "wall_time_s": r.manifest["wall_time_s"]} for r in res.runs],
    })
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    from .pipeline import sweep_gamma_T

    cfg = _pipeline_config(args)
    seed = cfg.seeds[0]
    unl = _records(args.unlabeled, args.synthetic_unlabeled, seed + 1, False, args)
    lab = _records(args.labeled, args.synthetic_labeled, seed + 2, True, args)
    res = sweep_gamma_T(cfg, _floats(args.gammas), _floats(args.windows), unl, lab)
    _emit_json({
        "gammas": res.gammas, "windows_s": res.Ts, "raw": res.raw, "normalized": res.normalized,
        "gamma_means": res.row_means, "window_means": res.col_means,
        "best": {"gamma": res.best[0], "window_s": res.best[1]},
    })
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _input_flags(p):
    p.add_argument("--format", choices=["csv", "raw-f64"], default="csv", help="record file format")
    p.add_argument("--rate", type=float, default=None, help="sampling rate (Hz) when the file has none")


def _train_flags(p):
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)


def _data_flags(p):
    p.add_argument("--unlabeled", nargs="*", default=None, help="unlabelled record files")
    p.add_argument("--labeled", nargs="*", default=None, help="labelled record files (label= header)")
    p.add_argument("--synthetic-unlabeled", type=int, default=0, help="generate N unlabelled records")
    p.add_argument("--synthetic-labeled", type=int, default=0, help="generate N labelled records")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ts2tc", description="PPG self-supervised pretraining and fusion toolkit")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic PPG record")
    p.add_argument("--hr", type=float, required=True, help="heart rate, beats per minute")
    p.add_argument("--seconds", type=float, default=5.6)
    p.add_argument("--rate", type=float, default=125.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="white-noise std")
    p.add_argument("--label", type=float, default=None, help="label to store (defaults to the heart rate)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("decompose", help="variational mode decomposition of a record")
    p.add_argument("--input", required=True)
    _input_flags(p)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--alpha", type=float, default=2000.0)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--eps", type=float, default=1e-7)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=500)
    p.add_argument("--out", "--output", dest="out", default="-",
                   help="modes CSV; headers carry centre frequencies in cycles/sample")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("stft", help="log-magnitude spectrogram of a record")
    p.add_argument("--input", required=True)
    _input_flags(p)
    p.add_argument("--n-fft", dest="n_fft", type=int, default=128)
    p.add_argument("--hop", type=int, default=32)
    p.add_argument("--window", choices=["hann", "rect"], default="hann")
    p.add_argument("--patch", type=int, nargs=2, default=[8, 8], metavar=("H", "W"))
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-out", dest="mask_out", help="write the patch mask table here")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_stft)

    p = sub.add_parser("pretrain", help="run the three pretext tasks and save a checkpoint")
    p.add_argument("--config")
    p.add_argument("--toy", action="store_true", help="desk-scale defaults (50 epochs, pretext lr 0.01)")
    p.add_argument("--unlabeled", nargs="*")
    p.add_argument("--synthetic", type=int, default=0, help="generate N unlabelled records")
    _input_flags(p)
    _train_flags(p)
    p.add_argument("--gamma", type=float)
    p.add_argument("--window-s", dest="window_s", type=float)
    p.add_argument("--task", choices=["all", "ctfga", "mae", "twrg"], default="all")
    p.add_argument("--init", help="continue from this checkpoint")
    p.add_argument("--trace-out", dest="trace_out", help="per-epoch loss CSV")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a pretrained checkpoint to labelled records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["fine-tune", "linear-probe", "dpt"], default="dpt")
    p.add_argument("--domain", choices=["temporal", "spectrogram"], default="temporal")
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=1.0)
    p.add_argument("--labeled", nargs="*")
    p.add_argument("--synthetic", type=int, default=0, help="generate N labelled records")
    _input_flags(p)
    _train_flags(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("fuse", help="fit the three-way least-squares combiner")
    p.add_argument("--input", required=True, help="CSV with prediction and label columns")
    p.add_argument("--columns", default="y1,y2,y3")
    p.add_argument("--label", default="label")
    p.add_argument("--output-format", choices=["json", "csv"], default="json")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="regression metrics, Bland-Altman and Clarke zones")
    p.add_argument("--input", required=True, help="CSV with a label column and prediction columns")
    p.add_argument("--label", default="label")
    p.add_argument("--prefix", default="pred", help="prediction column prefix; one column per run")
    p.add_argument("--glucose", action="store_true", help="values are glucose in mmol/L; add Clarke zones")
    p.add_argument("--clarke-out", dest="clarke_out")
    p.add_argument("--bland-altman-out", dest="bland_altman_out")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="run all five phases end to end")
    p.add_argument("--config")
    p.add_argument("--toy", action="store_true", help="desk-scale defaults (50 epochs, pretext lr 0.01)")
    _data_flags(p)
    _input_flags(p)
    _train_flags(p)
    p.add_argument("--gamma", type=float)
    p.add_argument("--window-s", dest="window_s", type=float)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", help="grid over partition ratio and window length")
    p.add_argument("--config")
    p.add_argument("--toy", action="store_true", help="desk-scale defaults (50 epochs, pretext lr 0.01)")
    _data_flags(p)
    _input_flags(p)
    _train_flags(p)
    p.add_argument("--gammas", required=True, help="comma-separated, e.g. 0.3,0.4")
    p.add_argument("--windows", required=True, help="window lengths in seconds, e.g. 4.8,5.6")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage() + "ts2tc: error: a command is required")
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ts2tc: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TS2TCError, DataError) as exc:
        print(f"ts2tc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"ts2tc: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
