"""Shared fixtures-by-import: example trees, random and exhaustive tree generators, independent oracles."""
from __future__ import annotations

import itertools
from collections import Counter

import numpy as np

from syntaxlm.treebank import Kind, Tree, parse_bracketed

FIG1 = "(S (NP the blue bird NP) (VP sings VP) S)"
FIG1_DUP = "(S (NP the blue bird NP) NP) (VP sings VP) VP) S) S)"
LABELS = ("S", "NP", "VP", "PP", "SBAR")
WORDS = ("the", "a", "dog", "cat", "sees", "runs", "near", "big")


def fig1() -> Tree:
    return parse_bracketed(FIG1)


def random_tree(rng: np.random.Generator, max_internal: int = 12, max_children: int = 4,
                labels=LABELS, words=WORDS) -> Tree:
    """Random tree with at most ``max_internal`` internal nodes."""
    budget = [max_internal - 1]

    def grow(depth: int) -> Tree:
        n = int(rng.integers(1, max_children + 1))
        kids = []
        for _ in range(n):
            if budget[0] > 0 and rng.random() < 0.45:
                budget[0] -= 1
                kids.append(grow(depth + 1))
            else:
                kids.append(str(words[rng.integers(len(words))]))
        return Tree(str(labels[rng.integers(len(labels))]), tuple(kids))

    return grow(0)


def shapes(n_internal: int, max_children: int = 3) -> list[Tree]:
    """Every ordered tree with exactly ``n_internal`` internal nodes (leaves are 'w')."""
    return list(_forests_root(n_internal, max_children))


def _forests_root(n: int, max_children: int):
    # a root with n internal nodes: the root plus a child sequence holding n-1 internal nodes
    for kids in _sequences(n - 1, max_children, max_children):
        if kids:
            yield Tree("X", kids)


def _sequences(n: int, slots: int, max_children: int):
    """Child sequences of length <= slots containing exactly n internal nodes in total."""
    if n == 0:
        for k in range(0, slots + 1):
            yield ("w",) * k
        return
    if slots == 0:
        return
    # first child is a terminal
    for rest in _sequences(n, slots - 1, max_children):
        yield ("w",) + rest
    # first child is a subtree with m internal nodes
    for m in range(1, n + 1):
        for sub in _forests_root(m, max_children):
            for rest in _sequences(n - m, slots - 1, max_children):
                yield (sub,) + rest


def all_trees(max_internal: int = 5, max_children: int = 3) -> list[Tree]:
    return [t for n in range(1, max_internal + 1) for t in shapes(n, max_children)]


# ---------------------------------------------------------------------------
# Oracles


def mask_oracle(kinds) -> np.ndarray:
    """Declarative reading of stack/compose attention, without simulating a stack.

    A position stays visible until the constituent around it is composed: a
    CNT1 at c closing the ONT at o hides every position in [o, c).  CNT2
    positions are never visible.  A CNT1 row sees its own constituent's
    still-visible positions plus itself; every other row sees everything
    visible once it has been processed.
    """
    n = len(kinds)
    opener = {}
    open_stack = []
    for i, k in enumerate(kinds):
        if k == Kind.ONT:
            open_stack.append(i)
        elif k == Kind.CNT1:
            opener[i] = open_stack.pop()

    # hidden_from[j]: first time step at which some enclosing constituent has been composed
    hidden_from = np.full(n, n, dtype=np.int64)
    for c, o in opener.items():
        hidden_from[o:c] = np.minimum(hidden_from[o:c], c)
    cnt2 = np.array([k == Kind.CNT2 for k in kinds], dtype=bool)
    pos = np.arange(n)

    def visible_after(i: int) -> np.ndarray:
        return (pos <= i) & ~cnt2 & (hidden_from > i)

    A = np.zeros((n, n), dtype=bool)
    for i, k in enumerate(kinds):
        if k == Kind.CNT1:
            A[i] = visible_after(i - 1) & (pos >= opener[i])
            A[i, i] = True
        else:
            A[i] = visible_after(i)
    return A


def spans_from_string(text: str) -> list[tuple[str, int, int]]:
    """Labeled spans read straight off a bracketed string."""
    out, stack, pos = [], [], 0
    for tok in text.split():
        if tok.startswith("("):
            stack.append((tok[1:], pos))
        elif tok.endswith(")") and stack and tok[:-1] == stack[-1][0]:
            label, start = stack.pop()
            out.append((label, start, pos))
        else:
            pos += 1
    return out


def f1_oracle(gold: str, pred: str) -> tuple[float, float, float]:
    """Greedy one-to-one pairing of equal spans."""
    g = spans_from_string(gold)
    p = spans_from_string(pred)
    unused = list(g)
    match = 0
    for s in p:
        if s in unused:
            unused.remove(s)
            match += 1
    prec = 100.0 * match / len(p)
    rec = 100.0 * match / len(g)
    f1 = 0.0 if match == 0 else 2 * prec * rec / (prec + rec)
    return prec, rec, f1


def label_multiset_by_level(tree: Tree) -> list[Counter]:
    levels: list[Counter] = []
    frontier = [tree]
    while frontier:
        levels.append(Counter(t.label for t in frontier))
        frontier = [c for t in frontier for c in t.children if isinstance(c, Tree)]
    return levels


def pairs(xs):
    return itertools.combinations(xs, 2)
