"""Command-line entry point: ``python -m aste <command>``.

Every command writes ``manifest.json`` into its ``--out`` directory before
doing any work.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .corpus import AsteFormatError, Sentence, compute_stats, parse_aste_file, parse_sc_file
from .encoder import EncoderError
from .evaluation import (
    diagnostics,
    predict_batch,
    run_model,
    select_tau,
    tau_curve,
    triplet_prf,
    tune_tau,
    write_predictions,
)
from .pair_stage import DegenerateGeometryError, DualProjection, export_search_space, write_point_table
from .pretraining import LanguageMismatchError, pseudo_label, staged_train, write_pseudo_corpus
from .training import ArchiveError, TrainingDivergedError, load, save, train, write_metric_log

log = logging.getLogger("aste")

ARCHIVE_NAME = "model.archive"
METRICS_NAME = "metrics.tsv"
PREDICTIONS_NAME = "predictions.jsonl"
REPORT_NAME = "report.json"
TAU_CURVE_NAME = "tau_curve.tsv"
PCA_NAME = "pca_points.tsv"
STATS_NAME = "stats.tsv"
MANIFEST_NAME = "manifest.json"

_HANDLED = (ConfigError, AsteFormatError, ArchiveError, EncoderError, TrainingDivergedError,
            LanguageMismatchError, DegenerateGeometryError, FileNotFoundError, ValueError)


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict
    outputs: dict
    version: str = __version__
    started_at: float = field(default_factory=time.time)


def write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _strict_json(value):
    """Non-finite floats become strings so the manifest stays valid JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _strict_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_strict_json(v) for v in value]
    return value


def write_manifest(out: Path, manifest: RunManifest) -> Path:
    path = out / MANIFEST_NAME
    payload = _strict_json(asdict(manifest))
    write_atomic(path, json.dumps(payload, indent=2, sort_keys=True, default=str, allow_nan=False) + "\n")
    return path


# ---------------------------------------------------------------------------
# helpers


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        out["train.seed"] = str(args.seed)
    return out


def _run_config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _read(path: str | None) -> list[Sentence]:
    if path is None:
        return []
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return parse_aste_file(path)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _outputs(out: Path, *names: str) -> dict[str, str]:
    return {n: str(out / n) for n in names}


def _inputs(args, *names: str) -> dict[str, str | None]:
    return {n: getattr(args, n) for n in names}


def _test_report(archive, test: list[Sentence], out: Path) -> dict:
    preds = predict_batch(test, archive.model)
    write_predictions(out / PREDICTIONS_NAME, test, preds)
    rep = triplet_prf([s.triplets for s in test], preds)
    return rep.as_dict()


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    outputs = [ARCHIVE_NAME, METRICS_NAME, REPORT_NAME] + ([PREDICTIONS_NAME] if args.test else [])
    write_manifest(out, RunManifest("train", run.flat(), run.train.seed,
                                    _inputs(args, "train", "dev", "test", "config"), _outputs(out, *outputs)))
    train_split, dev_split, test_split = _read(args.train), _read(args.dev), _read(args.test)
    archive = train(train_split, dev_split, run.train, run.model)
    save(archive, out / ARCHIVE_NAME)
    write_metric_log(out / METRICS_NAME, archive.history)
    report = {"validation": archive.val_metrics.as_dict(), "tau_test": archive.model_config.pair.tau_test}
    if test_split:
        report["test"] = _test_report(archive, test_split, out)
    write_atomic(out / REPORT_NAME, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"validation F1 {archive.val_metrics.f1:.4f}")
    if "test" in report:
        print(f"test F1 {report['test']['f1']:.4f}")
    return 0


def cmd_pretrain(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    phases = tuple(int(p) for p in args.phases.split(","))
    outputs = [ARCHIVE_NAME, METRICS_NAME, REPORT_NAME, "pseudo.aste"]
    write_manifest(out, RunManifest(
        "pretrain", {**run.flat(), "phases": phases}, run.train.seed,
        _inputs(args, "train", "dev", "test", "config", "sc_corpus", "teacher"), _outputs(out, *outputs)))
    train_split, dev_split, test_split = _read(args.train), _read(args.dev), _read(args.test)
    if not Path(args.sc_corpus).is_file():
        raise FileNotFoundError(f"no such file: {args.sc_corpus}")
    if args.teacher:
        teacher = load(args.teacher)
    else:
        teacher = train(train_split, dev_split, run.train, run.model)
    pseudo = pseudo_label(parse_sc_file(args.sc_corpus), teacher, language=args.language,
                          source_corpus=str(args.sc_corpus), teacher_id=str(args.teacher or "trained-in-run"))
    write_pseudo_corpus(out / "pseudo.aste", pseudo)
    archive = staged_train(train_split, dev_split, pseudo, phases, run.train, run.model)
    save(archive, out / ARCHIVE_NAME)
    write_metric_log(out / METRICS_NAME, archive.history)
    report = {"validation": archive.val_metrics.as_dict(), "n_pseudo": len(pseudo), "phases": archive.phases}
    if test_split:
        report["test"] = _test_report(archive, test_split, out)
    write_atomic(out / REPORT_NAME, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"pseudo-labelled sentences {len(pseudo)}")
    print(f"validation F1 {archive.val_metrics.f1:.4f}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    write_manifest(out, RunManifest("eval", {"tau": args.tau}, 0, _inputs(args, "model", "data"),
                                    _outputs(out, PREDICTIONS_NAME, REPORT_NAME)))
    archive = load(args.model)
    data = _read(args.data)
    model = archive.model
    tau = model.config.pair.tau_test if args.tau is None else args.tau
    preds = predict_batch(data, model, tau)
    write_predictions(out / PREDICTIONS_NAME, data, preds)
    overall = triplet_prf([s.triplets for s in data], preds)
    diag = diagnostics(model, data, tau)
    report = {"tau": tau, "overall": overall.as_dict(), "diagnostics": diag.as_dict()}
    write_atomic(out / REPORT_NAME, json.dumps(report, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(diag.to_text())
    return 0


def cmd_tau(args) -> int:
    out = _out_dir(args)
    write_manifest(out, RunManifest("tau", {"knee": args.knee, "grid": args.grid}, 0,
                                    _inputs(args, "model", "data"), _outputs(out, TAU_CURVE_NAME)))
    archive = load(args.model)
    data = _read(args.data)
    if args.grid:
        lo, hi, n = args.grid.split(",")
        lo, hi, n = float(lo), float(hi), int(n)
        grid = [lo + k * (hi - lo) / max(n - 1, 1) for k in range(n)]
        curve = tau_curve(archive.model, data, grid)
        chosen = select_tau(curve, args.knee)
    else:
        chosen, curve = tune_tau(archive.model, data, knee=args.knee)
    write_atomic(out / TAU_CURVE_NAME, curve.to_text())
    print(f"tau\t{chosen:.6f}")
    return 0


def cmd_stats(args) -> int:
    sentences = []
    for path in args.data:
        sentences.extend(_read(path))
    stats = compute_stats(sentences)
    if args.out:
        out = _out_dir(args)
        write_manifest(out, RunManifest("stats", {}, 0, {"data": list(args.data)},
                                        _outputs(out, STATS_NAME, "stats.json")))
        write_atomic(out / STATS_NAME, stats.to_text())
        write_atomic(out / "stats.json", stats.to_json() + "\n")
    for key, value in stats.as_dict().items():
        print(f"{key}={value:.4f}" if isinstance(value, float) else f"{key}={value}")
    return 0


def cmd_viz(args) -> int:
    out = _out_dir(args)
    write_manifest(out, RunManifest("viz", {"sentence": args.sentence}, 0,
                                    _inputs(args, "model", "data"), _outputs(out, PCA_NAME)))
    archive = load(args.model)
    if args.data:
        data = _read(args.data)
        matches = [s for s in data if s.sentence_id == args.sentence]
        if not matches and args.sentence.isdigit() and int(args.sentence) < len(data):
            matches = [data[int(args.sentence)]]
        if not matches:
            raise ValueError(f"sentence {args.sentence!r} not found in {args.data}")
        sentence = matches[0]
    else:
        sentence = Sentence.from_text(args.sentence)
    res = run_model(archive.model, [sentence], float("inf"))[0]
    points = _search_points(res, sentence)
    write_point_table(out / PCA_NAME, points)
    print(f"{len(points)} points written to {out / PCA_NAME}")
    return 0


def _search_points(res, sentence: Sentence):
    projections = [
        DualProjection(sp, res.aspect_vecs[k] if bool(res.aspect_allowed[k]) else None, res.opinion_vecs[k])
        for k, sp in enumerate(res.spans)
    ]
    gold = [(t.aspect, t.opinion) for t in sentence.triplets]
    return export_search_space(projections, sentence.words, gold)


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, *, data_flags: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    if data_flags:
        p.add_argument("--train", required=True, help="training split, ASTE format")
        p.add_argument("--dev", required=True, help="validation split")
        p.add_argument("--test", help="optional test split")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aste", description="Span-based aspect sentiment triplet extraction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", help="pseudo-label an SC corpus and run staged training")
    _common(p)
    p.add_argument("--sc-corpus", required=True, help="tab-separated sentence/label file")
    p.add_argument("--teacher", help="teacher archive; trained on --train when omitted")
    p.add_argument("--phases", default="20,20,10", help="epochs of the pretrain,mixed,gold phases")
    p.add_argument("--language", help="language of the SC corpus")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="predict, score and diagnose")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=float, help="pair threshold (default: the archived one)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tau", help="pair-layer precision/recall curve and threshold choice")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="validation split")
    p.add_argument("--grid", help="lo,hi,n for a uniform grid (default: similarity quantiles)")
    p.add_argument("--knee", type=float, default=0.02)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tau)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("data", nargs="+", help="ASTE-format files")
    p.add_argument("--out", help="also write stats.tsv and stats.json here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("viz", help="PCA of one sentence's aspect/opinion vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--sentence", required=True, help="sentence id or index in --data, or raw text")
    p.add_argument("--data", help="ASTE-format file holding the sentence")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _HANDLED as exc:
        print(f"aste {args.command}: error: {exc}", file=sys.stderr)
        return 1
