"""Evaluation: marginal bounds, perplexity, reranking, bracketing F1, surprisal suites, per-token comparisons.

A "model" here is anything with ``joint_logprobs(trees) -> array``; the
prefix-based procedures additionally need a :class:`LanguageModel`.  Sums are
accumulated sequentially in float64 so results do not depend on batching.
"""
from __future__ import annotations

import json
import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .maskgen import InputView
from .model import LanguageModel
from .treebank import Kind, Tree, parse_bracketed, serialize


def logsumexp(values: Iterable[float]) -> float:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return -math.inf
    m = arr.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(math.fsum(np.exp(arr - m))))


# ---------------------------------------------------------------------------
# Proposals


@dataclass
class ProposalSet:
    id: str
    words: list[str]
    trees: list[Tree]

    def __post_init__(self):
        for k, t in enumerate(self.trees):
            if t.leaves() != self.words:
                raise ValueError(f"proposal {k} for sentence {self.id} spans {' '.join(t.leaves())!r}, "
                                 f"not {' '.join(self.words)!r}")

    @property
    def sentence(self) -> str:
        return " ".join(self.words)


def distinct(trees: Sequence[Tree], context: str = "") -> list[Tree]:
    """Drop repeated trees (first occurrence kept), warning if any were found."""
    seen, out = set(), []
    for t in trees:
        key = serialize(t)
        if key not in seen:
            seen.add(key)
            out.append(t)
    if len(out) < len(trees):
        warnings.warn(f"{len(trees) - len(out)} duplicate proposal(s) removed{context}", stacklevel=3)
    return out


def load_proposals(path: str | Path) -> dict[str, ProposalSet]:
    """Read JSON lines ``{"id", "sentence", "trees": [bracketed, ...]}``."""
    out: dict[str, ProposalSet] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                trees = [parse_bracketed(t, lineno) for t in rec["trees"]]
                ps = ProposalSet(str(rec["id"]), rec["sentence"].split(), trees)
            except (KeyError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed proposal record ({exc})") from None
            if ps.id in out:
                raise ValueError(f"{path}:{lineno}: repeated sentence id {ps.id}")
            out[ps.id] = ps
    return out


def write_proposals(sets: Iterable[ProposalSet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ps in sets:
            f.write(json.dumps({"id": ps.id, "sentence": ps.sentence, "trees": [serialize(t) for t in ps.trees]})
                    + "\n")


# ---------------------------------------------------------------------------
# Sentence probabilities


def joint_logprob(model, tree: Tree) -> float:
    return float(model.joint_logprobs([tree])[0])


def _exact_from_words(model) -> bool:
    return isinstance(model, LanguageModel) and model.view is InputView.TERMINALS_ONLY


def marginal_lower_bound(model, proposals: ProposalSet | Sequence[Tree]) -> float:
    """log p̂(x) = log sum_y p(x, y) over the distinct proposal trees.

    For a terminals-only model every proposal yields the same string, so the
    result is the exact log p(x).
    """
    trees = proposals.trees if isinstance(proposals, ProposalSet) else list(proposals)
    if not trees:
        raise ValueError("marginal bound needs at least one proposal")
    if _exact_from_words(model):
        return joint_logprob(model, trees[0])
    return logsumexp(model.joint_logprobs(distinct(trees)))


def marginal_lower_bounds(model, sets: Sequence[ProposalSet]) -> np.ndarray:
    """Batched :func:`marginal_lower_bound` over many sentences."""
    if _exact_from_words(model):
        return np.asarray(model.joint_logprobs([ps.trees[0] for ps in sets]), dtype=np.float64)
    flat, owner = [], []
    for k, ps in enumerate(sets):
        if not ps.trees:
            raise ValueError(f"sentence {ps.id} has no proposals")
        for t in distinct(ps.trees, f" for sentence {ps.id}"):
            flat.append(t)
            owner.append(k)
    scores = model.joint_logprobs(flat)
    grouped: list[list[float]] = [[] for _ in sets]
    for k, s in zip(owner, scores):
        grouped[k].append(float(s))
    return np.array([logsumexp(g) for g in grouped])


def ppl_from_logprobs(logprobs: Sequence[float], n_words: int) -> float:
    """exp(total NLL / N_w)."""
    if n_words <= 0:
        raise ValueError("perplexity needs a positive word count")
    return math.exp(-math.fsum(logprobs) / n_words)


@dataclass
class PerplexityReport:
    ids: list[str]
    logprobs: list[float]
    n_words: int
    ppl: float

    def to_json(self) -> dict:
        return {"ppl": self.ppl, "n_words": self.n_words, "total_nll": -math.fsum(self.logprobs),
                "sentences": [{"id": i, "logprob": lp} for i, lp in zip(self.ids, self.logprobs)]}


def corpus_ppl(model, dataset: Sequence[tuple[str, Sequence[str]]],
               proposals: Mapping[str, ProposalSet] | None = None) -> PerplexityReport:
    """Perplexity from per-sentence marginal bounds.

    ``dataset`` holds ``(sentence id, words)`` pairs; N_w counts terminals
    only.  Tree-view models need proposals for every sentence.
    """
    if not dataset:
        raise ValueError("empty dataset")
    proposals = proposals or {}
    sets = []
    if _exact_from_words(model):
        for sid, words in dataset:
            # a flat placeholder tree carries the words; terminals-only encoding ignores structure
            sets.append(proposals.get(sid) or ProposalSet(sid, list(words), [Tree("X", tuple(words))]))
    else:
        missing = [sid for sid, _ in dataset if sid not in proposals]
        if missing:
            raise ValueError(f"no proposals for sentence id(s): {', '.join(missing)}")
        for sid, words in dataset:
            if proposals[sid].words != list(words):
                raise ValueError(f"proposals for sentence {sid} are over a different string")
            sets.append(proposals[sid])
    logprobs = [float(x) for x in marginal_lower_bounds(model, sets)]
    n_words = sum(len(w) for _, w in dataset)
    return PerplexityReport([sid for sid, _ in dataset], logprobs, n_words, ppl_from_logprobs(logprobs, n_words))


def _conditional_logprobs(lm: LanguageModel, prefix: Sequence[Tree], candidates: Sequence[Tree]) -> np.ndarray:
    """log p(candidate | prefix trees): events whose target lies in the last sentence."""
    docs = [list(prefix) + [t] for t in candidates]
    encs = [lm.encode(d) for d in docs]
    out = []
    for enc, lp in zip(encs, lm.event_logprobs(encs)):
        target_sentence = enc.sentence[enc.event_positions + 1]
        out.append(math.fsum(lp[target_sentence == len(prefix)]))
    return np.array(out)


def doc_marginal(lm: LanguageModel, document: Sequence[ProposalSet]) -> tuple[float, list[Tree]]:
    """Document log-probability bound with a greedily chosen tree prefix.

    Sentence i is scored by LSE over its proposals conditioned on the
    concatenation of the model's preferred trees for sentences before i.
    Returns the score and the chosen trees.
    """
    prefix: list[Tree] = []
    total = []
    for ps in document:
        trees = distinct(ps.trees, f" for sentence {ps.id}")
        cond = _conditional_logprobs(lm, prefix, trees)
        total.append(logsumexp(cond))
        prefix.append(trees[int(np.argmax(cond))])
    return math.fsum(total), prefix


# ---------------------------------------------------------------------------
# Reranking and bracketing F1


def rerank(model, proposals: ProposalSet | Sequence[Tree]) -> tuple[int, Tree]:
    """Highest joint probability proposal; the first in file order wins ties."""
    trees = proposals.trees if isinstance(proposals, ProposalSet) else list(proposals)
    if not trees:
        raise ValueError("nothing to rerank")
    scores = np.asarray(model.joint_logprobs(trees))
    best = int(np.argmax(scores))
    return best, trees[best]


def labeled_spans(tree: Tree) -> Counter:
    """Multiset of (label, start, end) over every constituent, end exclusive."""
    spans: Counter = Counter()

    def walk(node: Tree, start: int) -> int:
        pos = start
        for c in node.children:
            pos = walk(c, pos) if isinstance(c, Tree) else pos + 1
        spans[(node.label, start, pos)] += 1
        return pos

    walk(tree, 0)
    return spans


def bracket_counts(gold: Tree, predicted: Tree) -> tuple[int, int, int]:
    """(matched, gold total, predicted total)."""
    if gold.leaves() != predicted.leaves():
        raise ValueError("gold and predicted trees cover different terminal strings")
    g, p = labeled_spans(gold), labeled_spans(predicted)
    return sum((g & p).values()), sum(g.values()), sum(p.values())


def _prf(match: int, n_gold: int, n_pred: int) -> tuple[float, float, float]:
    precision = 100.0 * match / n_pred if n_pred else 0.0
    recall = 100.0 * match / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def bracket_f1(gold: Tree, predicted: Tree) -> tuple[float, float, float]:
    """Labeled precision, recall and F1 in percent."""
    return _prf(*bracket_counts(gold, predicted))


def corpus_f1(golds: Sequence[Tree], preds: Sequence[Tree]) -> tuple[float, float, float]:
    """Micro-averaged labeled bracketing scores over a corpus."""
    if len(golds) != len(preds):
        raise ValueError("gold and predicted corpora differ in length")
    totals = np.zeros(3, dtype=np.int64)
    for g, p in zip(golds, preds):
        totals += bracket_counts(g, p)
    return _prf(*map(int, totals))


# ---------------------------------------------------------------------------
# Word surprisal and targeted suites


def word_prefix_logprobs(lm: LanguageModel, trees: Sequence[Tree]) -> np.ndarray:
    """log p̂(w_1..w_t) for t = 1..n, marginalizing over distinct action prefixes.

    Each tree's action sequence is cut right after the terminal generating
    w_t; identical prefixes from different trees count once.
    """
    trees = distinct(trees)
    n = len(trees[0].leaves())
    encs = [lm.encode(t) for t in trees]
    per_word: list[dict] = [dict() for _ in range(n)]
    for enc, lp in zip(encs, lm.event_logprobs(encs)):
        targets = enc.event_positions + 1
        tokens = [enc.tokens[p] for p in targets]
        kinds = [enc.kinds[p] for p in targets]
        cum = np.cumsum(lp, dtype=np.float64)
        t = 0
        for k, kind in enumerate(kinds):
            if kind == Kind.T:
                per_word[t].setdefault(tuple(tokens[: k + 1]), float(cum[k]))
                t += 1
    return np.array([logsumexp(d.values()) for d in per_word])


def word_surprisals(lm: LanguageModel, trees: Sequence[Tree]) -> np.ndarray:
    """s(w_t) = log p̂(w_<t) - log p̂(w_<=t), in nats; the empty prefix has probability one."""
    prefix = word_prefix_logprobs(lm, trees)
    return -np.diff(np.concatenate([[0.0], prefix]))


_CLAUSE = re.compile(r"^\s*s\(\s*(\w+)\s*\)\s*([<>])\s*s\(\s*(\w+)\s*\)\s*$")


def parse_criterion(text: str) -> list[tuple[str, str, str]]:
    """``"s(A) < s(B) && s(C) > s(D)"`` -> ``[("A", "<", "B"), ("C", ">", "D")]``."""
    clauses = []
    for part in re.split(r"&&|\band\b", text):
        m = _CLAUSE.match(part)
        if not m:
            raise ValueError(f"cannot parse criterion clause {part.strip()!r}")
        clauses.append(m.groups())
    return clauses


@dataclass
class SGCondition:
    words: list[str]
    region: tuple[int, int]
    trees: list[Tree] = field(default_factory=list)


@dataclass
class SGItem:
    suite: str
    conditions: dict[str, SGCondition]
    criterion: str

    def __post_init__(self):
        for name, c in self.conditions.items():
            a, b = c.region
            if not 0 <= a < b <= len(c.words):
                raise ValueError(f"region {c.region} of condition {name} is out of range")
        for lhs, _, rhs in parse_criterion(self.criterion):
            for name in (lhs, rhs):
                if name not in self.conditions:
                    raise ValueError(f"criterion refers to unknown condition {name!r}")


def _condition_from_json(obj: dict) -> SGCondition:
    trees = [parse_bracketed(t) for t in obj.get("trees", [])]
    if "tree" in obj:
        trees.insert(0, parse_bracketed(obj["tree"]))
    if "sentence" in obj:
        words = obj["sentence"].split()
    elif trees:
        words = trees[0].leaves()
    else:
        raise ValueError("condition needs a sentence or a tree")
    return SGCondition(words, tuple(obj["region"]), trees)


def load_sg_suite(path: str | Path) -> list[SGItem]:
    """Read ``{"suite", "items": [{"conditions": {...}, "criterion"}]}``; a list of such objects also works."""
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    out = []
    for block in data if isinstance(data, list) else [data]:
        for item in block["items"]:
            conds = {name: _condition_from_json(c) for name, c in item["conditions"].items()}
            out.append(SGItem(item.get("suite", block.get("suite", "suite")), conds, item["criterion"]))
    return out


@dataclass
class SGReport:
    items: list[dict]
    suites: dict[str, float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.suites.values()))) if self.suites else math.nan

    def to_json(self) -> dict:
        return {"mean_accuracy": self.mean_accuracy, "suites": self.suites, "items": self.items}


def sg_score(lm: LanguageModel, items: Sequence[SGItem],
             proposals: Mapping[str, ProposalSet] | None = None) -> SGReport:
    """Evaluate each item's surprisal criterion over its condition regions.

    Condition trees come from the item itself or from ``proposals`` keyed by
    sentence text.  Terminals-only models need no trees.
    """
    proposals = proposals or {}
    by_sentence = {ps.sentence: ps for ps in proposals.values()}
    cache: dict[str, np.ndarray] = {}
    records = []
    for k, item in enumerate(items):
        region_s = {}
        for name, c in item.conditions.items():
            key = " ".join(c.words)
            if key not in cache:
                trees = c.trees or (by_sentence[key].trees if key in by_sentence else [])
                if not trees:
                    if lm.view is not InputView.TERMINALS_ONLY:
                        raise ValueError(f"no trees for condition sentence {key!r}")
                    trees = [Tree("X", tuple(c.words))]
                cache[key] = word_surprisals(lm, trees)
            a, b = c.region
            region_s[name] = math.fsum(cache[key][a:b])
        ok = all(region_s[l] < region_s[r] if op == "<" else region_s[l] > region_s[r]
                 for l, op, r in parse_criterion(item.criterion))
        records.append({"index": k, "suite": item.suite, "passed": ok, "surprisal": region_s})
    suites: dict[str, list[bool]] = {}
    for r in records:
        suites.setdefault(r["suite"], []).append(r["passed"])
    return SGReport(records, {s: float(np.mean(v)) for s, v in suites.items()})


# ---------------------------------------------------------------------------
# Per-token comparison


def compare_logprobs(model_a: LanguageModel, model_b: LanguageModel,
                     documents: Sequence[Sequence[Tree]]) -> list[dict]:
    """Per-event Δ = log p_a - log p_b with token-repetition flags.

    Both models must share the vocabulary and predict the same action stream
    (e.g. stack/compose vs causal over trees).  Flags tell whether the
    predicted token already occurred earlier in the current sentence, in a
    previous sentence of the document, or neither.
    """
    if model_a.vocab != model_b.vocab:
        raise ValueError("models use different vocabularies")
    encs_a = [model_a.encode(list(d)) for d in documents]
    encs_b = [model_b.encode(list(d)) for d in documents]
    lps_a = model_a.event_logprobs(encs_a)
    lps_b = model_b.event_logprobs(encs_b)
    records = []
    for doc_id, (ea, eb, la, lb) in enumerate(zip(encs_a, encs_b, lps_a, lps_b)):
        ta, tb = ea.event_positions + 1, eb.event_positions + 1
        tokens = [ea.tokens[p] for p in ta]
        if tokens != [eb.tokens[p] for p in tb]:
            raise ValueError(f"document {doc_id}: models tokenize the action stream differently")
        seen_before: set[str] = set()
        seen_here: set[str] = set()
        current = 0
        for pos, (p, tok) in enumerate(zip(ta, tokens)):
            sent = int(ea.sentence[p])
            if sent != current:
                seen_before |= seen_here
                seen_here = set()
                current = sent
            kind = ea.kinds[p]
            kind_name = "CNT" if kind in (Kind.CNT1, Kind.CNT2) else kind.name
            prev, cur = tok in seen_before, tok in seen_here
            records.append({"doc": doc_id, "sentence": sent, "position": pos, "token": tok, "kind": kind_name,
                            "delta": float(la[pos] - lb[pos]), "previous_sentence": prev,
                            "current_sentence": cur, "absent": not (prev or cur)})
            seen_here.add(tok)
    return records
