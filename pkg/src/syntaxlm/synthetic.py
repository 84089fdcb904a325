"""Small probabilistic grammars: corpus generation, exact marginals and parse enumeration.

Grammar symbols come in three sorts.  Keys of ``rules`` are nonterminals and
become tree nodes; keys of ``lexicon`` are word classes that emit one word
directly under their parent (trees carry no preterminals); anything else on a
right-hand side is a literal word.  Nonterminal names may carry features after
an underscore (``NP_sg``); tree labels drop them, so several derivations can
yield the same tree and tree probabilities sum over derivations.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .treebank import Tree, serialize, write_trees

Rule = tuple[tuple[str, ...], float]


def base_label(symbol: str) -> str:
    return symbol.split("_")[0]


@dataclass
class PCFG:
    start: str
    rules: dict[str, list[Rule]]
    lexicon: dict[str, dict[str, float]]

    def __post_init__(self):
        for lhs, alts in self.rules.items():
            total = sum(p for _, p in alts)
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                raise ValueError(f"rules for {lhs} sum to {total}, not 1")
            for rhs, _ in alts:
                if not rhs:
                    raise ValueError(f"empty right-hand side for {lhs}")
                if len(rhs) == 1 and rhs[0] in self.rules:
                    raise ValueError(f"unary rule {lhs} -> {rhs[0]} is not supported")
        for cls, words in self.lexicon.items():
            if cls in self.rules:
                raise ValueError(f"{cls} is both a nonterminal and a word class")
            if not math.isclose(sum(words.values()), 1.0, abs_tol=1e-9):
                raise ValueError(f"lexicon for {cls} does not sum to 1")

    @property
    def words(self) -> list[str]:
        out = {w for ws in self.lexicon.values() for w in ws}
        out |= {s for alts in self.rules.values() for rhs, _ in alts for s in rhs
                if s not in self.rules and s not in self.lexicon}
        return sorted(out)

    # -- generation ---------------------------------------------------------

    def sample(self, rng: np.random.Generator, max_words: int = 30, tries: int = 1000) -> Tree:
        """Draw one tree; derivations longer than ``max_words`` are rejected and redrawn."""
        for _ in range(tries):
            budget = [max_words]
            try:
                node = self._expand(self.start, rng, budget)
            except _TooLong:
                continue
            return node
        raise RuntimeError("could not sample a short enough tree")

    def _expand(self, sym: str, rng, budget) -> Tree:
        alts = self.rules[sym]
        k = rng.choice(len(alts), p=[p for _, p in alts])
        children = []
        for s in alts[k][0]:
            if s in self.rules:
                children.append(self._expand(s, rng, budget))
                continue
            if s in self.lexicon:
                words = list(self.lexicon[s])
                s = words[rng.choice(len(words), p=[self.lexicon[s][w] for w in words])]
            budget[0] -= 1
            if budget[0] < 0:
                raise _TooLong
            children.append(s)
        return Tree(base_label(sym), tuple(children))

    # -- exact probabilities --------------------------------------------------

    def _emit(self, sym: str, word: str) -> float:
        if sym in self.lexicon:
            return self.lexicon[sym].get(word, 0.0)
        return 1.0 if sym == word else 0.0

    def inside(self, words: Sequence[str]) -> float:
        """log p(x): sum over every derivation of the string, by dynamic programming."""
        words = tuple(words)
        n = len(words)

        @lru_cache(maxsize=None)
        def span(sym: str, i: int, j: int) -> float:
            if sym not in self.rules:
                return self._emit(sym, words[i]) if j == i + 1 else 0.0
            return sum(p * seq(rhs, 0, i, j) for rhs, p in self.rules[sym])

        @lru_cache(maxsize=None)
        def seq(rhs: tuple[str, ...], k: int, i: int, j: int) -> float:
            rest = len(rhs) - k
            if rest == 1:
                return span(rhs[k], i, j)
            total = 0.0
            # every remaining symbol covers at least one word
            for m in range(i + 1, j - rest + 2):
                left = span(rhs[k], i, m)
                if left:
                    total += left * seq(rhs, k + 1, m, j)
            return total

        p = span(self.start, 0, n) if n else 0.0
        return math.log(p) if p > 0 else -math.inf

    def joint_logprob(self, tree: Tree) -> float:
        """log p(x, y), summing over feature assignments that yield ``tree``."""

        def node(sym: str, t: Tree) -> float:
            if base_label(sym) != t.label:
                return 0.0
            total = 0.0
            for rhs, p in self.rules[sym]:
                if len(rhs) != len(t.children):
                    continue
                prod = p
                for s, c in zip(rhs, t.children):
                    if s in self.rules:
                        prod *= node(s, c) if isinstance(c, Tree) else 0.0
                    else:
                        prod *= self._emit(s, c) if isinstance(c, str) else 0.0
                    if prod == 0.0:
                        break
                total += prod
            return total

        p = node(self.start, tree)
        return math.log(p) if p > 0 else -math.inf

    def joint_logprobs(self, trees: Sequence[Tree]) -> np.ndarray:
        return np.array([self.joint_logprob(t) for t in trees], dtype=np.float64)

    def parses(self, words: Sequence[str], limit: int | None = None) -> list[tuple[Tree, float]]:
        """Every tree with positive probability over ``words`` with its log p(x, y), most probable first.

        Derivations that differ only in features are merged.  ``limit`` keeps
        the top trees (ties broken by serialization for determinism).
        """
        words = tuple(words)

        @lru_cache(maxsize=None)
        def span(sym: str, i: int, j: int) -> dict:
            out: dict = defaultdict(float)
            if sym not in self.rules:
                if j == i + 1 and self._emit(sym, words[i]) > 0:
                    out[words[i]] = self._emit(sym, words[i])
                return dict(out)
            for rhs, p in self.rules[sym]:
                for kids, q in seq(rhs, 0, i, j).items():
                    out[Tree(base_label(sym), kids)] += p * q
            return dict(out)

        @lru_cache(maxsize=None)
        def seq(rhs: tuple[str, ...], k: int, i: int, j: int) -> dict:
            rest = len(rhs) - k
            if rest == 1:
                return {(c,): p for c, p in span(rhs[k], i, j).items()}
            out: dict = defaultdict(float)
            for m in range(i + 1, j - rest + 2):
                left = span(rhs[k], i, m)
                if not left:
                    continue
                right = seq(rhs, k + 1, m, j)
                for c, p in left.items():
                    for cs, q in right.items():
                        out[(c,) + cs] += p * q
            return dict(out)

        found = span(self.start, 0, len(words)) if words else {}
        ranked = sorted(found.items(), key=lambda kv: (-kv[1], serialize(kv[0])))
        if limit is not None:
            ranked = ranked[:limit]
        return [(t, math.log(p)) for t, p in ranked]

    def strip_features(self) -> "PCFG":
        """Featureless grammar with the same tree skeletons (used as a proposal source)."""
        rules: dict[str, dict[tuple[str, ...], float]] = defaultdict(lambda: defaultdict(float))
        lhs_count: dict[str, int] = defaultdict(int)
        lex_map = {cls: base_label(cls) for cls in self.lexicon}
        for lhs in self.rules:
            lhs_count[base_label(lhs)] += 1
        for lhs, alts in self.rules.items():
            b = base_label(lhs)
            for rhs, p in alts:
                new = tuple(base_label(s) if s in self.rules else lex_map.get(s, s) for s in rhs)
                rules[b][new] += p / lhs_count[b]
        lexicon: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
        cls_count: dict[str, int] = defaultdict(int)
        for cls in self.lexicon:
            cls_count[lex_map[cls]] += 1
        for cls, ws in self.lexicon.items():
            for w, p in ws.items():
                lexicon[lex_map[cls]][w] += p / cls_count[lex_map[cls]]
        return PCFG(base_label(self.start), {k: list(v.items()) for k, v in rules.items()},
                    {k: dict(v) for k, v in lexicon.items()})


class _TooLong(Exception):
    pass


def _uniform(words: Sequence[str]) -> dict[str, float]:
    return {w: 1.0 / len(words) for w in words}


# ---------------------------------------------------------------------------
# Bundled grammars


def ambiguous_grammar() -> PCFG:
    """Attachment-ambiguous grammar: "N V N (P N)*" has a Catalan number of parses."""
    return PCFG("S", {
        "S": [(("NP", "VP"), 1.0)],
        "NP": [(("N",), 0.7), (("NP", "PP"), 0.3)],
        "VP": [(("V", "NP"), 0.8), (("VP", "PP"), 0.2)],
        "PP": [(("P", "NP"), 1.0)],
    }, {
        "N": _uniform(["dogs", "cats", "parks", "hats"]),
        "V": _uniform(["see", "like"]),
        "P": _uniform(["in", "with"]),
    })


NOUNS = {"sg": ["dog", "cat", "bird", "child", "teacher", "farmer"],
         "pl": ["dogs", "cats", "birds", "children", "teachers", "farmers"]}
INTRANSITIVE = {"sg": ["runs", "sleeps", "sings", "laughs"], "pl": ["run", "sleep", "sing", "laugh"]}
TRANSITIVE = {"sg": ["sees", "likes", "chases"], "pl": ["see", "like", "chase"]}
PREPOSITIONS = ["near", "behind", "with"]


def agreement_grammar() -> PCFG:
    """Subject-verb number agreement with prepositional and relative-clause attractors."""
    rules: dict[str, list[Rule]] = {
        "S": [(("NP_sg", "VP_sg"), 0.5), (("NP_pl", "VP_pl"), 0.5)],
        "PP": [(("P", "NP_sg"), 0.5), (("P", "NP_pl"), 0.5)],
    }
    lexicon = {"Det": {"the": 1.0}, "P": _uniform(PREPOSITIONS)}
    for n in ("sg", "pl"):
        rules[f"NP_{n}"] = [(("Det", f"N_{n}"), 0.64), (("Det", f"N_{n}", "PP"), 0.18),
                            (("Det", f"N_{n}", f"SBAR_{n}"), 0.18)]
        rules[f"SBAR_{n}"] = [(("that", f"VP_{n}"), 0.5), (("that", "NP_sg", "Vt_sg"), 0.25),
                              (("that", "NP_pl", "Vt_pl"), 0.25)]
        rules[f"VP_{n}"] = [((f"Vi_{n}",), 0.45), ((f"Vt_{n}", "NP_sg"), 0.175), ((f"Vt_{n}", "NP_pl"), 0.175),
                            ((f"Vi_{n}", "PP"), 0.1), ((f"Vt_{n}", "NP_sg", "PP"), 0.05),
                            ((f"Vt_{n}", "NP_pl", "PP"), 0.05)]
        lexicon[f"N_{n}"] = _uniform(NOUNS[n])
        lexicon[f"Vi_{n}"] = _uniform(INTRANSITIVE[n])
        lexicon[f"Vt_{n}"] = _uniform(TRANSITIVE[n])
    return PCFG("S", rules, lexicon)


def sample_corpus(grammar: PCFG, n: int, seed: int = 0, max_words: int = 25) -> list[Tree]:
    rng = np.random.default_rng(seed)
    return [grammar.sample(rng, max_words) for _ in range(n)]


# ---------------------------------------------------------------------------
# Agreement test suite


def _other(n: str) -> str:
    return "pl" if n == "sg" else "sg"


def agreement_items(n_per_suite: int = 20, seed: int = 0) -> Iterator[dict]:
    """Minimal pairs differing only in the main verb's number.

    Suites: ``simple`` (no attractor), ``pp`` (prepositional attractor),
    ``src`` (subject relative with an object attractor) and ``orc``
    (object relative whose subject is the attractor).  The attractor always
    has the opposite number of the head noun.
    """
    rng = np.random.default_rng(seed)
    pick = lambda xs: xs[rng.integers(len(xs))]  # noqa: E731
    for suite in ("simple", "pp", "src", "orc"):
        for _ in range(n_per_suite):
            n = pick(["sg", "pl"])
            m = _other(n)
            subject = ["the", pick(NOUNS[n])]
            if suite == "pp":
                subject += [pick(PREPOSITIONS), "the", pick(NOUNS[m])]
            elif suite == "src":
                subject += ["that", pick(TRANSITIVE[n]), "the", pick(NOUNS[m])]
            elif suite == "orc":
                subject += ["that", "the", pick(NOUNS[m]), pick(TRANSITIVE[m])]
            k = rng.integers(len(INTRANSITIVE[n]))
            region = [len(subject), len(subject) + 1]
            yield {"suite": suite, "conditions": {
                "match": {"sentence": " ".join(subject + [INTRANSITIVE[n][k]]), "region": region},
                "mismatch": {"sentence": " ".join(subject + [INTRANSITIVE[m][k]]), "region": region},
            }, "criterion": "s(mismatch) > s(match)"}


def proposal_sets(grammar: PCFG, sentences: Sequence[Sequence[str]], ids: Sequence[str] | None = None,
                  limit: int = 50) -> list:
    """Proposal sets from exhaustive parsing (top ``limit`` trees per sentence)."""
    from .evalsuite import ProposalSet  # evalsuite imports torch; keep grammar use light

    ids = ids or [str(i) for i in range(len(sentences))]
    out = []
    for sid, words in zip(ids, sentences):
        trees = [t for t, _ in grammar.parses(words, limit)]
        if not trees:
            raise ValueError(f"sentence {sid} has no parse: {' '.join(words)}")
        out.append(ProposalSet(sid, list(words), trees))
    return out


def write_toy_data(out_dir, n_train: int = 2000, n_valid: int = 200, n_sg: int = 20, seed: int = 0) -> None:
    """Agreement-grammar corpus, validation proposals and a targeted suite."""
    from .evalsuite import write_proposals

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grammar = agreement_grammar()
    skeleton = grammar.strip_features()
    trees = sample_corpus(grammar, n_train + n_valid, seed=seed)
    write_trees(trees[:n_train], out / "train.trees")
    write_trees(trees[n_train:], out / "valid.trees")
    write_proposals(proposal_sets(skeleton, [t.leaves() for t in trees[n_train:]]), out / "valid.proposals.jsonl")
    items = list(agreement_items(n_sg, seed=seed + 1))
    for item in items:
        for cond in item["conditions"].values():
            cond["trees"] = [serialize(t) for t, _ in skeleton.parses(cond["sentence"].split(), 50)]
    with open(out / "agreement_sg.json", "w", encoding="utf-8") as f:
        json.dump({"suite": "agreement", "items": items}, f, indent=1)
        f.write("\n")
