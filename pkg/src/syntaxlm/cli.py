"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Settings resolve as command-line flags, then ``--config`` JSON, then defaults;
the effective settings are written into every artifact a command produces.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .evalsuite import (ProposalSet, compare_logprobs, corpus_f1, corpus_ppl, doc_marginal, load_proposals,
                        load_sg_suite, rerank, sg_score)
from .maskgen import InputView, build_mask, dump_mask, mode_from_preset
from .model import ModelConfig, NumericalError, load_checkpoint, save_checkpoint
from .treebank import (TRANSFORMS, ActionSequence, Kind, SequenceError, Tree, TreeParseError, Vocabulary,
                       build_vocab, duplicate_closing, linearize, parse_bracketed, read_documents, read_trees,
                       serialize)

log = logging.getLogger("syntaxlm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# Defaults for settings that may also come from a config file.
DEFAULTS = {
    "preset": "tg", "positions": None, "d_model": 64, "layers": 2, "heads": 4, "d_ff": 256,
    "segment_length": 256, "memory_size": 256, "lr": 1e-3, "warmup": 100, "epochs": 10, "max_steps": None,
    "batch_tokens": 256, "eval_every": 200, "min_count": 1, "transform": "none", "clip_norm": 1.0,
}


def _mode(preset: str, positions: str | None):
    """Mask mode from flags, rejecting incompatible combinations before any work starts."""
    try:
        return mode_from_preset(preset, positions)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"--preset {preset} with --positions {positions}: {exc}") from None


def _resolve(args: argparse.Namespace, keys: Sequence[str]) -> dict:
    config = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            config = json.load(f)
        unknown = set(config) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    out = {}
    for k in keys:
        v = getattr(args, k, None)
        out[k] = v if v is not None else config.get(k, DEFAULTS[k])
    return out


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_inputs(path: str, documents: bool) -> list[list[Tree]]:
    """Trees grouped as documents (one tree per document unless ``documents``)."""
    if documents:
        return read_documents(path)
    return [[t] for t in read_trees(path)]


def _load_model(path: str):
    lm, meta = load_checkpoint(path, dtype=torch.float64)
    lm.net.eval()
    return lm, meta


def _table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    cells = [list(map(str, header))] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_preprocess(args) -> int:
    docs = _read_inputs(args.input, args.documents)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = build_vocab((t for d in docs for t in d), args.min_count)
    view = InputView(args.view)
    ids, kinds, depths, offsets = [], [], [], [0]
    for doc in docs:
        for tree in doc:
            seq = linearize(tree)
            if view is InputView.DUPLICATED_TREES:
                seq = duplicate_closing(seq)
            actions = [a for a in seq if a.kind == Kind.T] if view is InputView.TERMINALS_ONLY else list(seq)
            ids += [vocab.id(a) for a in actions]
            kinds += [int(a.kind) for a in actions]
            depths += [a.depth for a in actions]
        offsets.append(len(ids))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "ids.npy", np.asarray(ids, dtype=np.int32))
    np.save(out / "kinds.npy", np.asarray(kinds, dtype=np.int8))
    np.save(out / "depths.npy", np.asarray(depths, dtype=np.int16))
    np.save(out / "offsets.npy", np.asarray(offsets, dtype=np.int64))
    vocab.save(out / "vocab.tsv")
    _write_json({"command": "preprocess", "input": str(args.input), "view": view.value,
                 "min_count": args.min_count, "documents": args.documents, "n_records": len(docs),
                 "n_tokens": len(ids), "vocab_size": len(vocab)}, out / "preprocess.json")
    print(f"{len(docs)} record(s), {len(ids)} tokens, vocabulary {len(vocab)} -> {out}")
    return EXIT_OK


def cmd_transform(args) -> int:
    fn = TRANSFORMS[args.mode]
    src = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
    lines = []
    with src:
        for lineno, line in enumerate(src, 1):
            if line.strip():
                lines.append(serialize(fn(parse_bracketed(line, lineno))))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_mask_dump(args) -> int:
    mode = _mode(args.preset, args.positions)
    trees = read_trees(args.input)
    if not 0 <= args.index < len(trees):
        raise ValueError(f"tree index {args.index} out of range (file has {len(trees)})")
    seq = linearize(trees[args.index])
    if mode.input_view is InputView.DUPLICATED_TREES:
        seq = duplicate_closing(seq)
    elif mode.input_view is InputView.TERMINALS_ONLY:
        seq = ActionSequence(tuple(a for a in seq if a.kind == Kind.T))
    bundle = build_mask(seq, mode)
    sys.stdout.write(dump_mask(seq, bundle))
    if args.plot:
        from .plotting import plot_mask

        plot_mask(bundle.A, seq.tokens, args.plot, title=f"{args.preset} mask")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_training
    from .training import TrainConfig, train

    keys = ["preset", "positions", "d_model", "layers", "heads", "d_ff", "segment_length", "memory_size", "lr",
            "warmup", "epochs", "max_steps", "batch_tokens", "eval_every", "min_count", "transform", "clip_norm"]
    eff = _resolve(args, keys)
    if eff["transform"] not in TRANSFORMS:
        raise UsageError(f"unknown transform {eff['transform']!r}")
    fn = TRANSFORMS[eff["transform"]]
    mode = _mode(eff["preset"], eff["positions"])
    train_docs = [[fn(t) for t in d] for d in _read_inputs(args.train, args.documents)]
    valid_docs = [[fn(t) for t in d] for d in _read_inputs(args.valid, args.documents)] if args.valid else []
    vocab = build_vocab((t for d in train_docs for t in d), eff["min_count"])
    missing = {l for d in valid_docs for t in d for l in t.labels()} - set(vocab.labels)
    if missing:
        raise ValueError(f"validation labels absent from training data: {', '.join(sorted(missing))}")
    cfg = ModelConfig(len(vocab), eff["d_model"], eff["layers"], eff["heads"], eff["d_ff"], mode,
                      eff["segment_length"], eff["memory_size"], seed=args.seed)
    hp = TrainConfig(lr=eff["lr"], warmup_steps=eff["warmup"], epochs=eff["epochs"], max_steps=eff["max_steps"],
                     batch_tokens=eff["batch_tokens"], clip_norm=eff["clip_norm"], eval_every=eff["eval_every"],
                     seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = {"command": "train", "seed": args.seed, "train": str(args.train), "valid": args.valid, **eff}

    def show(entry):
        log.info("step %d %s nll %.4f ppl %.3f", entry["step"], entry["split"], entry["nll"], entry["ppl"])

    items = lambda docs: [d if args.documents else d[0] for d in docs]  # noqa: E731
    lm, metrics = train(cfg, vocab, items(train_docs), items(valid_docs), hp, log_path=out / "metrics.jsonl",
                        on_eval=show)
    save_checkpoint(lm, out / "model.ckpt", metadata={"effective_config": effective})
    vocab.save(out / "vocab.tsv")
    _write_json(effective, out / "config.json")
    plot_training(metrics, out / "training.png")
    last = [m for m in metrics if m["split"] == "valid"]
    best = min(last, key=lambda m: m["nll"]) if last else None
    rows = [[m["step"], m["split"], m["nll"], m["ppl"]] for m in metrics]
    print(_table(rows, ["step", "split", "nll", "ppl"]))
    if best:
        print(f"best validation: step {best['step']} nll {best['nll']:.4f} ppl {best['ppl']:.3f}")
    return EXIT_OK


def _proposals_for(args, docs: list[list[Tree]], transform: str = "none") -> dict[str, ProposalSet]:
    """Proposal sets keyed by the 0-based sentence ordinal in the data file."""
    fn = TRANSFORMS[transform]
    flat = [t for d in docs for t in d]
    if args.proposals == "gold":
        sets = {str(i): ProposalSet(str(i), t.leaves(), [t]) for i, t in enumerate(flat)}
    elif args.proposals:
        sets = load_proposals(args.proposals)
    else:
        return {}
    return {k: ProposalSet(k, v.words, [fn(t) for t in v.trees]) for k, v in sets.items()}


def cmd_eval_ppl(args) -> int:
    lm, meta = _load_model(args.model)
    transform = meta.get("effective_config", {}).get("transform", "none") if args.transform is None else args.transform
    docs = _read_inputs(args.data, args.documents)
    proposals = _proposals_for(args, docs, transform)
    flat = [t for d in docs for t in d]
    dataset = [(str(i), t.leaves()) for i, t in enumerate(flat)]
    if args.documents:
        missing = [sid for sid, _ in dataset if sid not in proposals]
        if missing and lm.view is not InputView.TERMINALS_ONLY:
            raise ValueError(f"no proposals for sentence id(s): {', '.join(missing)}")
        total, k, logprobs = 0.0, 0, []
        for d in docs:
            sets = [proposals.get(str(k + j)) or ProposalSet(str(k + j), t.leaves(), [t]) for j, t in enumerate(d)]
            score, _ = doc_marginal(lm, sets)
            logprobs.append(score)
            k += len(d)
        n_words = sum(len(w) for _, w in dataset)
        ppl = math.exp(-math.fsum(logprobs) / n_words)
        report = {"ppl": ppl, "n_words": n_words, "total_nll": -math.fsum(logprobs),
                  "documents": [{"id": i, "logprob": lp} for i, lp in enumerate(logprobs)]}
    else:
        report = corpus_ppl(lm, dataset, proposals).to_json()
    report["effective_config"] = {"command": "eval-ppl", "model": args.model, "data": args.data,
                                  "proposals": args.proposals, "documents": args.documents, "transform": transform}
    if args.out:
        _write_json(report, Path(args.out))
    print(_table([[lm.mode.input_view.value, report["n_words"], report["total_nll"], report["ppl"]]],
                 ["view", "words", "total_nll", "ppl"]))
    return EXIT_OK


def cmd_rerank(args) -> int:
    lm, _ = _load_model(args.model)
    sets = load_proposals(args.proposals)
    chosen = {}
    for sid, ps in sets.items():
        _, tree = rerank(lm, ps)
        chosen[sid] = tree
    out_lines = [serialize(chosen[sid]) for sid in sets]
    if args.out:
        Path(args.out).write_text("\n".join(out_lines) + "\n", encoding="utf-8")
    else:
        print("\n".join(out_lines))
    if args.gold:
        gold = read_trees(args.gold)
        golds = [gold[int(sid)] for sid in sets]
        p, r, f = corpus_f1(golds, [chosen[sid] for sid in sets])
        print(_table([[len(golds), p, r, f]], ["sentences", "precision", "recall", "f1"]), file=sys.stderr)
    return EXIT_OK


def cmd_sg_eval(args) -> int:
    from .plotting import plot_sg

    items = load_sg_suite(args.suite)
    proposals = load_proposals(args.proposals) if args.proposals else None
    reports = {}
    for path in args.model:
        lm, _ = _load_model(path)
        name = Path(path).parent.name or Path(path).stem
        if name in reports:
            name = path
        reports[name] = sg_score(lm, items, proposals)
    suites = sorted({s for r in reports.values() for s in r.suites})
    rows = [[name] + [r.suites.get(s, float("nan")) for s in suites] + [r.mean_accuracy]
            for name, r in reports.items()]
    print(_table(rows, ["model"] + suites + ["mean"]))
    if args.out:
        out = Path(args.out)
        _write_json({"effective_config": {"command": "sg-eval", "models": args.model, "suite": args.suite,
                                          "proposals": args.proposals},
                     "models": {n: r.to_json() for n, r in reports.items()}}, out / "sg_report.json")
        with open(out / "sg_report.tsv", "w", encoding="utf-8") as f:
            f.write("\t".join(["model"] + suites + ["mean"]) + "\n")
            for row in rows:
                f.write("\t".join(str(c) for c in row) + "\n")
        for name, r in reports.items():
            plot_sg(r.suites, out / f"sg_{name}.png", title=name)
    return EXIT_OK


def cmd_sample(args) -> int:
    from .sampling import sample
    from .treebank import to_trees

    lm, _ = _load_model(args.model)
    samples = sample(lm, args.n, max_len=args.max_len, constraints=not args.no_constraints,
                     temperature=args.temperature, seed=args.seed)
    lines = []
    for s in samples:
        if s.ill_formed or lm.view is InputView.TERMINALS_ONLY:
            tag = "#ILL-FORMED " if s.ill_formed else ""
            lines.append(tag + " ".join(s.tokens))
        else:
            lines.append(" ".join(serialize(t) for t in to_trees(s.actions)))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    bad = sum(s.ill_formed for s in samples)
    print(f"{len(samples)} samples, {bad} ill-formed", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    lm_a, _ = _load_model(args.model_a)
    lm_b, _ = _load_model(args.model_b)
    docs = _read_inputs(args.data, args.documents)
    records = compare_logprobs(lm_a, lm_b, docs)
    with open(args.out, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    deltas = np.array([r["delta"] for r in records])
    if args.plot:
        from .plotting import plot_deltas

        plot_deltas(deltas, args.plot)
    rows = []
    for flag in ("previous_sentence", "current_sentence", "absent"):
        sel = np.array([r[flag] for r in records], dtype=bool)
        rows.append([flag, int(sel.sum()), float(deltas[sel].mean()) if sel.any() else float("nan")])
    rows.append(["all", len(records), float(deltas.mean()) if len(deltas) else float("nan")])
    print(_table(rows, ["flag", "events", "mean_delta"]))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .model import LanguageModel
    from .training import grad_check

    trees = read_trees(args.trees)
    if args.model:
        lm, _ = _load_model(args.model)
    else:
        vocab = build_vocab(trees)
        mode = _mode(args.preset, None)
        cfg = ModelConfig(len(vocab), d_model=16, n_layers=2, n_heads=2, d_ff=32, mode=mode, seed=args.seed)
        lm = LanguageModel.create(cfg, vocab)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for b in range(args.batches):
        batch = [trees[i] for i in rng.choice(len(trees), size=min(args.batch_size, len(trees)), replace=False)]
        err = grad_check(lm, batch)
        print(f"batch {b}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g})")
    if not worst < args.tol:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {args.tol:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="syntaxlm", description="Syntactic transformer language models over action sequences.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: $TG_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", parents=[common], help="trees -> token-id arrays + vocabulary")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--view", choices=[v.value for v in InputView], default="duplicated")
    s.add_argument("--min-count", type=int, default=1)
    s.add_argument("--vocab", help="reuse an existing vocabulary file")
    s.add_argument("--documents", action="store_true", help="blank-line separated documents")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("transform", parents=[common], help="rewrite tree structure")
    s.add_argument("input", help="tree file or - for stdin")
    s.add_argument("--mode", choices=sorted(TRANSFORMS), required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("mask-dump", parents=[common], help="print the attention mask of one tree")
    s.add_argument("input")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--preset", choices=["tg", "txl-trees", "txl-terminals"], default="tg")
    s.add_argument("--positions", choices=["depth", "linear", "none"])
    s.add_argument("--plot", help="write a heatmap image here")
    s.set_defaults(func=cmd_mask_dump)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--train", required=True)
    s.add_argument("--valid")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON file with default settings")
    s.add_argument("--documents", action="store_true")
    s.add_argument("--preset", choices=["tg", "txl-trees", "txl-terminals"])
    s.add_argument("--positions", choices=["depth", "linear", "none"])
    s.add_argument("--transform", choices=sorted(TRANSFORMS))
    s.add_argument("--d-model", dest="d_model", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--d-ff", dest="d_ff", type=int)
    s.add_argument("--segment-length", dest="segment_length", type=int)
    s.add_argument("--memory-size", dest="memory_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--warmup", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--max-steps", dest="max_steps", type=int)
    s.add_argument("--batch-tokens", dest="batch_tokens", type=int)
    s.add_argument("--eval-every", dest="eval_every", type=int)
    s.add_argument("--min-count", dest="min_count", type=int)
    s.add_argument("--clip-norm", dest="clip_norm", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-ppl", parents=[common], help="perplexity from marginal bounds")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="gold trees (sentence ids are 0-based line ordinals)")
    s.add_argument("--proposals", help="proposal JSON lines, or 'gold' to use the gold tree alone")
    s.add_argument("--documents", action="store_true")
    s.add_argument("--transform", choices=sorted(TRANSFORMS),
                   help="transform applied to proposals (default: the model's training transform)")
    s.add_argument("--out", help="JSON report path")
    s.set_defaults(func=cmd_eval_ppl)

    s = sub.add_parser("rerank", parents=[common], help="pick the most probable proposal per sentence")
    s.add_argument("--model", required=True)
    s.add_argument("--proposals", required=True)
    s.add_argument("--gold", help="gold trees for bracketing F1")
    s.add_argument("--out")
    s.set_defaults(func=cmd_rerank)

    s = sub.add_parser("sg-eval", parents=[common], help="targeted surprisal suites")
    s.add_argument("--model", required=True, action="append")
    s.add_argument("--suite", required=True)
    s.add_argument("--proposals")
    s.add_argument("--out", help="directory for report and figures")
    s.set_defaults(func=cmd_sg_eval)

    s = sub.add_parser("sample", parents=[common], help="ancestral sampling")
    s.add_argument("--model", required=True)
    s.add_argument("-n", type=int, default=10)
    s.add_argument("--max-len", dest="max_len", type=int, default=64)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--no-constraints", dest="no_constraints", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("compare", parents=[common], help="per-event log-probability differences")
    s.add_argument("--model-a", dest="model_a", required=True)
    s.add_argument("--model-b", dest="model_b", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--documents", action="store_true")
    s.add_argument("--out", required=True, help="JSON lines output")
    s.add_argument("--plot", help="histogram image path")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    s.add_argument("--trees", required=True)
    s.add_argument("--model", help="checkpoint (default: a fresh 2-layer, width-16 model)")
    s.add_argument("--preset", choices=["tg", "txl-trees", "txl-terminals"], default="tg")
    s.add_argument("--batches", type=int, default=5)
    s.add_argument("--batch-size", dest="batch_size", type=int, default=2)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_grad_check)
    return p


def _set_threads(n: int | None) -> None:
    if n is None and os.environ.get("TG_THREADS"):
        try:
            n = int(os.environ["TG_THREADS"])
        except ValueError:
            raise UsageError("TG_THREADS must be an integer") from None
    if n is not None:
        if n < 1:
            raise UsageError("--threads must be >= 1")
        torch.set_num_threads(n)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _set_threads(args.threads)
        torch.manual_seed(args.seed)
        return args.func(args)
    except UsageError as exc:
        print(f"syntaxlm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"syntaxlm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TreeParseError as exc:
        print(f"syntaxlm: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError, KeyError, SequenceError) as exc:
        print(f"syntaxlm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
