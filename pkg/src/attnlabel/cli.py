"""Command line: synth, train, eval, visualize.

Exit codes: 0 success, 2 usage or I/O error, 3 numerical fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, build_config, load_config
from .corpus import CorpusError, Dataset, build_vocab, derive_sentence_labels, load_dataset
from .labelers import METHODS, RelFreqModel, predict_dataset, relfreq_train
from .metrics import format_table
from .model import NumericalFault, load_checkpoint, save_checkpoint
from .synth import SyntheticSpec, write_corpus
from .trainer import average_by_method, evaluate_methods, train, train_supervised
from .viz import render_html

log = logging.getLogger("attnlabel")

EXIT_USAGE = 2
EXIT_NUMERIC = 3

CLASSIFIER_FILE = "classifier.ckpt"
SUPERVISED_FILE = "supervised.ckpt"
RELFREQ_FILE = "relfreq.json"


class UsageError(Exception):
    pass


def _load(path, config: RunConfig, split: str) -> Dataset:
    if path is None:
        raise UsageError(f"no {split} data given")
    if not Path(path).is_file():
        raise UsageError(f"{split} data not found: {path}")
    ds = load_dataset(path, config.format, config.positive_labels, split)
    if config.format == "tokens":
        ds = derive_sentence_labels(ds)
    return ds


def seed_dirs(run: Path) -> list:
    dirs = sorted((p for p in run.glob("seed-*") if p.is_dir()),
                  key=lambda p: int(p.name.split("-", 1)[1]))
    return dirs or [run]


# -- synth ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        vocab_size=args.vocab_size, n_triggers=args.triggers,
        min_length=args.min_length, max_length=args.max_length,
        positive_rate=args.positive_rate, max_triggers_per_sentence=args.max_triggers,
        n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test, seed=args.seed,
    )
    for split, path in write_corpus(spec, args.out).items():
        print(f"{split}: {path}")
    return 0


# -- train ----------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    values = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    for key in ("train_path", "dev_path", "test_path", "embeddings", "format", "out"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = str(value)
    if args.seeds:
        values["seeds"] = " ".join(str(s) for s in args.seeds)
    if args.attention:
        values["attention"] = args.attention
    if args.gamma is not None:
        values["gamma"] = str(args.gamma)
    if args.method:
        values["methods"] = " ".join(args.method)
    try:
        return build_config(values, config)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    config = resolve_config(args)
    if config.out is None:
        raise UsageError("--out is required")
    unknown = set(config.methods) - set(METHODS)
    if unknown:
        raise UsageError(f"unknown method(s): {', '.join(sorted(unknown))}")
    train_set = _load(config.train_path, config, "train")
    dev_set = _load(config.dev_path, config, "dev")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")

    if "relfreq" in config.methods:
        counts = relfreq_train(train_set).to_dict()
        (out / RELFREQ_FILE).write_text(json.dumps(counts, sort_keys=True), encoding="utf-8")
    want_clf = bool({"attention", "backprop"} & set(config.methods))
    want_sup = "supervised" in config.methods
    vocab = build_vocab(train_set, config.train.min_count)
    for seed in config.train.seeds:
        sdir = out / f"seed-{seed}"
        sdir.mkdir(exist_ok=True)
        jobs = []
        if want_clf:
            jobs.append(("classifier", train, CLASSIFIER_FILE, "history.jsonl"))
        if want_sup:
            jobs.append(("supervised", train_supervised, SUPERVISED_FILE,
                         "supervised-history.jsonl"))
        for name, fn, ckpt, hist in jobs:
            result = fn(config.train, train_set, dev_set, vocab, seed, config.dims,
                        config.embeddings)
            save_checkpoint(sdir / ckpt, result.model, vocab,
                            {"seed": seed, "best_epoch": result.history.best_epoch})
            (sdir / hist).write_text(result.history.to_jsonl(), encoding="utf-8")
            (sdir / f"{name}-timing.json").write_text(
                json.dumps({"seconds_per_epoch": result.history.seconds}), encoding="utf-8")
            print(f"seed {seed}: {name} best epoch {result.history.best_epoch} -> {sdir / ckpt}")
    return 0


# -- eval -------------------------------------------------------------------------

def _load_run_models(sdir: Path):
    clf = sup = None
    vocab = sup_vocab = None
    if (sdir / CLASSIFIER_FILE).is_file():
        clf, vocab, _ = load_checkpoint(sdir / CLASSIFIER_FILE)
    if (sdir / SUPERVISED_FILE).is_file():
        sup, sup_vocab, _ = load_checkpoint(sdir / SUPERVISED_FILE)
    return clf, vocab, sup, sup_vocab


def _load_relfreq(run: Path):
    path = run / RELFREQ_FILE
    if not path.is_file():
        return None
    return RelFreqModel.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _run_config(run: Path) -> RunConfig:
    path = run / "config.txt"
    return load_config(path) if path.is_file() else RunConfig()


def evaluate_run(run, data_path, methods=METHODS, ranking="sentence", empty="skip"):
    """Evaluate every seed of a trained run. Returns (per-seed reports, averaged)."""
    run = Path(run)
    if not run.is_dir():
        raise UsageError(f"run directory not found: {run}")
    config = _run_config(run)
    dataset = _load(data_path, config, "test")
    if not dataset.has_token_labels:
        raise UsageError("evaluation data needs token labels")
    relfreq = _load_relfreq(run)
    per_seed = []
    for sdir in seed_dirs(run):
        clf, vocab, sup, sup_vocab = _load_run_models(sdir)
        per_seed.append((sdir.name, evaluate_methods(
            dataset, methods, clf, vocab, sup, sup_vocab, relfreq, ranking, empty,
            config.train.batch_size, config.train.char_max)))
    return per_seed, average_by_method([reports for _, reports in per_seed])


def report_records(per_seed, averaged) -> list:
    records = []
    for name, reports in per_seed:
        for r in reports:
            records.append({"scope": name, **r.to_record()})
    for r in averaged:
        records.append({"scope": "mean", "seeds": len(per_seed), **r.to_record()})
    return records


def cmd_eval(args) -> int:
    ranking = "global" if args.map_global else "sentence"
    methods = args.method or list(METHODS)
    per_seed, averaged = evaluate_run(args.run, args.data, methods, ranking, args.map_empty)
    print(format_table(averaged))
    records = report_records(per_seed, averaged)
    text = "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in records)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.json:
        sys.stdout.write(text)
    if args.dump:
        dump_predictions(args.run, args.data, methods, args.dump)
    return 0


def dump_predictions(run, data_path, methods, out_path) -> None:
    """TSV: token, gold, method, score, label; blank line between sentences.
    Uses the first seed's models."""
    run = Path(run)
    config = _run_config(run)
    dataset = _load(data_path, config, "test")
    clf, vocab, sup, sup_vocab = _load_run_models(seed_dirs(run)[0])
    relfreq = _load_relfreq(run)
    available = {"attention": clf, "backprop": clf, "supervised": sup, "relfreq": relfreq}
    preds = []
    for m in methods:
        if available.get(m) is None:
            log.warning("skipping %s in dump: no model", m)
            continue
        model = sup if m == "supervised" else clf
        mvocab = sup_vocab if m == "supervised" else vocab
        preds.append(predict_dataset(m, dataset, mvocab, model, relfreq,
                                     config.train.batch_size, config.train.char_max))
    with Path(out_path).open("w", encoding="utf-8") as f:
        for k, sent in enumerate(dataset):
            for p in preds:
                for i, tok in enumerate(sent.tokens):
                    gold = "" if sent.token_labels is None else sent.token_labels[i]
                    tp = p.tokens[k][i]
                    f.write(f"{tok}\t{gold}\t{p.method}\t{tp.score!r}\t{tp.label}\n")
                f.write("\n")


# -- visualize ----------------------------------------------------------------------

def cmd_visualize(args) -> int:
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        config = RunConfig()
    else:
        run = Path(args.run)
        ckpt = seed_dirs(run)[0] / CLASSIFIER_FILE
        config = _run_config(run)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, vocab, _ = load_checkpoint(ckpt)
    dataset = _load(args.data, config, "test")
    if args.limit:
        dataset = Dataset(dataset.sentences[: args.limit], dataset.split_name)
    preds = predict_dataset(args.method, dataset, vocab, model,
                            batch_size=config.train.batch_size, char_max=config.train.char_max)
    page = render_html([s.tokens for s in dataset], preds.scores, args.method,
                       gold=[s.token_labels for s in dataset] if dataset.has_token_labels else None,
                       sentence_scores=preds.sentence_scores)
    Path(args.out).write_text(page, encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnlabel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic trigger-word corpus")
    d = SyntheticSpec()
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--vocab-size", type=int, default=d.vocab_size)
    s.add_argument("--triggers", type=int, default=d.n_triggers)
    s.add_argument("--min-length", type=int, default=d.min_length)
    s.add_argument("--max-length", type=int, default=d.max_length)
    s.add_argument("--positive-rate", type=float, default=d.positive_rate)
    s.add_argument("--max-triggers", type=int, default=d.max_triggers_per_sentence)
    s.add_argument("--n-train", type=int, default=d.n_train)
    s.add_argument("--n-dev", type=int, default=d.n_dev)
    s.add_argument("--n-test", type=int, default=d.n_test)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train models for one or more seeds")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--train", dest="train_path")
    t.add_argument("--dev", dest="dev_path")
    t.add_argument("--embeddings")
    t.add_argument("--format", choices=["tokens", "sentences"])
    t.add_argument("--seed", "--seeds", dest="seeds", type=int, nargs="+")
    t.add_argument("--attention", choices=["logistic", "exp"])
    t.add_argument("--gamma", type=float)
    t.add_argument("--method", action="append", choices=list(METHODS),
                   help="models to train (repeatable)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score token labels of a trained run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--method", action="append", choices=list(METHODS))
    e.add_argument("--map-global", action="store_true",
                   help="rank all tokens of the corpus together for MAP")
    e.add_argument("--map-empty", choices=["skip", "zero"], default="skip",
                   help="sentences without positive tokens: skip or AP 0")
    e.add_argument("--out", help="write machine-readable records (JSON lines)")
    e.add_argument("--json", action="store_true", help="also print the records")
    e.add_argument("--dump", help="write per-token predictions as TSV")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="HTML heatmap of token scores")
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--run")
    src.add_argument("--checkpoint")
    v.add_argument("--data", required=True)
    v.add_argument("--method", choices=["attention", "backprop"], default="attention")
    v.add_argument("--limit", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalFault as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CorpusError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
