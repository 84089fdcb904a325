"""Phrase-structure trees, bracketed I/O, transforms and action linearization.

Trees are immutable: a :class:`Tree` holds a label and a tuple of children,
each child being another :class:`Tree` or a plain ``str`` terminal.

The canonical bracketed form uses labeled closings::

    (S (NP the blue bird NP) (VP sings VP) S)

Plain PTB-style closings (``)``) are accepted on input as well.
"""
from __future__ import annotations

import enum
import itertools
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union


class TreeParseError(ValueError):
    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class SequenceError(ValueError):
    """Malformed action sequence; ``index`` is the first offending position."""

    def __init__(self, message: str, index: int):
        super().__init__(f"position {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class Tree:
    label: str
    children: tuple[Union["Tree", str], ...]

    def __post_init__(self):
        if not self.label:
            raise ValueError("empty nonterminal label")
        if not self.children:
            raise ValueError(f"constituent {self.label} has no children")
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    def leaves(self) -> list[str]:
        out: list[str] = []
        stack: list[Tree | str] = [self]
        while stack:
            node = stack.pop()
            if isinstance(node, str):
                out.append(node)
            else:
                stack.extend(reversed(node.children))
        return out

    def labels(self) -> list[str]:
        """Nonterminal labels in preorder."""
        out = [self.label]
        for c in self.children:
            if isinstance(c, Tree):
                out.extend(c.labels())
        return out

    def height(self) -> int:
        return 1 + max((c.height() for c in self.children if isinstance(c, Tree)), default=0)

    def n_nodes(self) -> int:
        return 1 + sum(c.n_nodes() for c in self.children if isinstance(c, Tree))

    def __str__(self) -> str:
        return serialize(self)


Node = Union[Tree, str]


class Kind(enum.IntEnum):
    ONT = 0
    T = 1
    CNT = 2
    CNT1 = 3
    CNT2 = 4
    # model-side specials, never produced by linearize()
    BOS = 5
    EOS = 6
    PAD = 7


CLOSING = (Kind.CNT, Kind.CNT1, Kind.CNT2)


@dataclass(frozen=True)
class Action:
    token: str
    kind: Kind
    depth: int


@dataclass(frozen=True)
class ActionSequence:
    actions: tuple[Action, ...]
    duplicated: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self) -> Iterator[Action]:
        return iter(self.actions)

    def __getitem__(self, i):
        return self.actions[i]

    @property
    def tokens(self) -> list[str]:
        return [a.token for a in self.actions]

    @property
    def kinds(self) -> list[Kind]:
        return [a.kind for a in self.actions]

    @property
    def depths(self) -> list[int]:
        return [a.depth for a in self.actions]

    def __str__(self) -> str:
        return " ".join(self.tokens)

    def validate(self) -> None:
        """Check balance and labeled-closing consistency; raise SequenceError."""
        open_labels: list[str] = []
        prev: Action | None = None
        for i, a in enumerate(self.actions):
            if a.kind == Kind.ONT:
                open_labels.append(a.token[1:])
            elif a.kind == Kind.T:
                if not open_labels:
                    raise SequenceError("terminal outside any constituent", i)
            elif a.kind in (Kind.CNT, Kind.CNT1):
                if a.kind == Kind.CNT and self.duplicated:
                    raise SequenceError("raw CNT in duplicated sequence", i)
                if a.kind == Kind.CNT1 and not self.duplicated:
                    raise SequenceError("CNT1 in raw sequence", i)
                if not open_labels:
                    raise SequenceError("closing with no open constituent", i)
                label = open_labels.pop()
                if a.token != label + ")":
                    raise SequenceError(f"{a.token} closes ({label}", i)
            elif a.kind == Kind.CNT2:
                if prev is None or prev.kind != Kind.CNT1 or prev.token != a.token:
                    raise SequenceError("CNT2 not preceded by matching CNT1", i)
            else:
                raise SequenceError(f"unexpected kind {a.kind.name}", i)
            if a.kind == Kind.CNT1 and (i + 1 >= len(self.actions) or self.actions[i + 1].kind != Kind.CNT2):
                raise SequenceError("CNT1 not followed by CNT2", i)
            prev = a
        if open_labels:
            raise SequenceError(f"{len(open_labels)} constituent(s) left open", len(self.actions))


# ---------------------------------------------------------------------------
# Bracketed I/O


def _tokens_with_columns(text: str) -> Iterator[tuple[str, int]]:
    for m in re.finditer(r"\S+", text):
        yield m.group(), m.start() + 1


def parse_bracketed(text: str, line: int = 1) -> Tree:
    """Parse one bracketed tree.

    Tokens are whitespace-separated: ``(X`` opens a constituent; ``X)`` closes
    the open constituent labeled ``X``; a bare ``)`` closes whatever is open;
    anything else is a word, optionally glued to trailing PTB-style ``)``.
    """
    stack: list[tuple[str, list[Node], int]] = []
    result: Tree | None = None

    def close(col: int) -> None:
        nonlocal result
        label, children, open_col = stack.pop()
        if not children:
            raise TreeParseError(f"empty constituent ({label}", line, open_col)
        node = Tree(label, tuple(children))
        if stack:
            stack[-1][1].append(node)
        else:
            result = node

    for tok, col in _tokens_with_columns(text):
        if result is not None:
            raise TreeParseError(f"trailing material after complete tree: {tok!r}", line, col)
        if tok.startswith("("):
            label = tok[1:]
            if not label or "(" in label or ")" in label:
                raise TreeParseError(f"bad opening token {tok!r}", line, col)
            stack.append((label, [], col))
            continue
        stripped = tok.rstrip(")")
        n_close = len(tok) - len(stripped)
        if "(" in stripped or (")" in stripped):
            raise TreeParseError(f"bad token {tok!r}", line, col)
        if not stack:
            raise TreeParseError(f"token {tok!r} outside any constituent", line, col)
        if stripped and n_close and stripped == stack[-1][0]:
            # labeled closing
            close(col)
            n_close -= 1
        elif stripped:
            stack[-1][1].append(stripped)
        for _ in range(n_close):
            if not stack:
                raise TreeParseError("unbalanced brackets: too many closings", line, col)
            close(col)
    if stack:
        raise TreeParseError(f"unbalanced brackets: ({stack[-1][0]} never closed", line, stack[-1][2])
    if result is None:
        raise TreeParseError("no tree found", line, 1)
    return result


def serialize(tree: Tree) -> str:
    parts: list[str] = []

    def walk(node: Node) -> None:
        if isinstance(node, str):
            parts.append(node)
            return
        parts.append("(" + node.label)
        for c in node.children:
            walk(c)
        parts.append(node.label + ")")

    walk(tree)
    return " ".join(parts)


def read_trees(path: str | Path) -> list[Tree]:
    trees = []
    with open(path, encoding="utf-8") as f:
        for lineno, text in enumerate(f, 1):
            if text.strip():
                trees.append(parse_bracketed(text, line=lineno))
    return trees


def read_documents(path: str | Path) -> list[list[Tree]]:
    """Trees grouped into documents by blank lines."""
    docs: list[list[Tree]] = []
    current: list[Tree] = []
    with open(path, encoding="utf-8") as f:
        for lineno, text in enumerate(f, 1):
            if text.strip():
                current.append(parse_bracketed(text, line=lineno))
            elif current:
                docs.append(current)
                current = []
    if current:
        docs.append(current)
    return docs


def write_trees(trees: Iterable[Tree], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trees:
            f.write(serialize(t) + "\n")


# ---------------------------------------------------------------------------
# Linearization


def linearize(tree: Tree) -> ActionSequence:
    """Top-down, left-to-right action sequence with depths (root = 0)."""
    out: list[Action] = []

    def walk(node: Tree, depth: int) -> None:
        out.append(Action("(" + node.label, Kind.ONT, depth))
        for c in node.children:
            if isinstance(c, str):
                out.append(Action(c, Kind.T, depth + 1))
            else:
                walk(c, depth + 1)
        out.append(Action(node.label + ")", Kind.CNT, depth))

    walk(tree, 0)
    return ActionSequence(tuple(out), duplicated=False)


def concat(seqs: Sequence[ActionSequence]) -> ActionSequence:
    """Document-level sequence: sentences back to back, no separator."""
    if not seqs:
        raise ValueError("nothing to concatenate")
    dup = {s.duplicated for s in seqs}
    if len(dup) != 1:
        raise ValueError("cannot mix raw and duplicated sequences")
    return ActionSequence(tuple(itertools.chain.from_iterable(s.actions for s in seqs)), dup.pop())


def duplicate_closing(seq: ActionSequence) -> ActionSequence:
    if seq.duplicated or any(a.kind in (Kind.CNT1, Kind.CNT2) for a in seq):
        raise ValueError("sequence is already duplicated")
    out: list[Action] = []
    for a in seq:
        if a.kind == Kind.CNT:
            out.append(Action(a.token, Kind.CNT1, a.depth))
            out.append(Action(a.token, Kind.CNT2, a.depth))
        else:
            out.append(a)
    return ActionSequence(tuple(out), duplicated=True)


def strip_duplicates(seq: ActionSequence) -> ActionSequence:
    """Inverse of duplicate_closing."""
    if not seq.duplicated:
        return seq
    out = [Action(a.token, Kind.CNT, a.depth) if a.kind == Kind.CNT1 else a
           for a in seq if a.kind != Kind.CNT2]
    return ActionSequence(tuple(out), duplicated=False)


def to_trees(seq: ActionSequence) -> list[Tree]:
    """Rebuild the tree(s) an action sequence describes."""
    seq.validate()
    trees: list[Tree] = []
    stack: list[tuple[str, list[Node]]] = []
    for a in seq:
        if a.kind == Kind.ONT:
            stack.append((a.token[1:], []))
        elif a.kind == Kind.T:
            stack[-1][1].append(a.token)
        elif a.kind in (Kind.CNT, Kind.CNT1):
            label, children = stack.pop()
            node = Tree(label, tuple(children))
            if stack:
                stack[-1][1].append(node)
            else:
                trees.append(node)
    return trees


def to_tree(seq: ActionSequence) -> Tree:
    trees = to_trees(seq)
    if len(trees) != 1:
        raise ValueError(f"sequence holds {len(trees)} trees, expected 1")
    return trees[0]


# ---------------------------------------------------------------------------
# Structural transforms


def _cycle_labels(labels: list[str], n: int) -> list[str]:
    return [labels[i % len(labels)] for i in range(n)]


def to_left_branching(tree: Tree) -> Tree:
    words = tree.leaves()
    if len(words) < 2:
        return tree
    labels = _cycle_labels(tree.labels(), len(words) - 1)
    # innermost spine node covers the first two words
    node = Tree(labels[-1], (words[0], words[1]))
    for label, w in zip(reversed(labels[:-1]), words[2:]):
        node = Tree(label, (node, w))
    return node


def to_right_branching(tree: Tree) -> Tree:
    words = tree.leaves()
    if len(words) < 2:
        return tree
    labels = _cycle_labels(tree.labels(), len(words) - 1)
    node = Tree(labels[-1], (words[-2], words[-1]))
    for label, w in zip(reversed(labels[:-1]), reversed(words[:-2])):
        node = Tree(label, (w, node))
    return node


def reverse_structure(tree: Tree) -> Tree:
    """Reverse child order at every node, then refill terminals in original order."""
    words = iter(tree.leaves())

    def mirror(node: Tree) -> Tree:
        return Tree(node.label, tuple(c if isinstance(c, str) else mirror(c) for c in reversed(node.children)))

    def refill(node: Node) -> Node:
        if isinstance(node, str):
            return next(words)
        return Tree(node.label, tuple(refill(c) for c in node.children))

    return refill(mirror(tree))


TRANSFORMS = {
    "none": lambda t: t,
    "left": to_left_branching,
    "right": to_right_branching,
    "reversed": reverse_structure,
}


# ---------------------------------------------------------------------------
# Vocabulary

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


class Vocabulary:
    """Dense symbol <-> id map.

    Classes are ``special``, ``terminal``, ``ont`` and ``cnt``. ONT symbols are
    written ``(X`` and CNT symbols ``X)``; CNT1 and CNT2 share the CNT id.
    """

    def __init__(self, symbols: Sequence[str], classes: Sequence[str]):
        if len(symbols) != len(classes):
            raise ValueError("symbols/classes length mismatch")
        self.symbols = list(symbols)
        self.classes = list(classes)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        for s in SPECIALS:
            if s not in self.index:
                raise ValueError(f"vocabulary lacks special {s}")
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols and self.classes == other.classes

    def ids_of_class(self, cls: str) -> list[int]:
        return [i for i, c in enumerate(self.classes) if c == cls]

    @property
    def labels(self) -> list[str]:
        return [s[1:] for s, c in zip(self.symbols, self.classes) if c == "ont"]

    def id(self, action: Action) -> int:
        if action.kind == Kind.T:
            i = self.index.get(action.token, self.unk_id)
            return i if self.classes[i] == "terminal" else self.unk_id
        if action.kind == Kind.BOS:
            return self.bos_id
        if action.kind == Kind.EOS:
            return self.eos_id
        if action.kind == Kind.PAD:
            return self.pad_id
        try:
            return self.index[action.token]
        except KeyError:
            raise KeyError(f"nonterminal {action.token!r} not in vocabulary") from None

    def word_id(self, word: str) -> int:
        i = self.index.get(word, self.unk_id)
        return i if self.classes[i] == "terminal" else self.unk_id

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, (s, c) in enumerate(zip(self.symbols, self.classes)):
                f.write(f"{s}\t{i}\t{c}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected symbol<TAB>id<TAB>class")
                rows.append((int(parts[1]), parts[0], parts[2]))
        rows.sort()
        if [r[0] for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids are not dense")
        return cls([r[1] for r in rows], [r[2] for r in rows])

    def to_json(self) -> dict:
        return {"symbols": self.symbols, "classes": self.classes}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["symbols"], obj["classes"])


def build_vocab(corpus: Iterable[Tree], min_count: int = 1) -> Vocabulary:
    counts: Counter[str] = Counter()
    labels: set[str] = set()
    n = 0
    for tree in corpus:
        n += 1
        counts.update(tree.leaves())
        labels.update(tree.labels())
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words = sorted(w for w, c in counts.items() if c >= min_count and w not in SPECIALS)
    symbols = list(SPECIALS) + words
    classes = ["special"] * len(SPECIALS) + ["terminal"] * len(words)
    for label in sorted(labels):
        symbols += ["(" + label, label + ")"]
        classes += ["ont", "cnt"]
    return Vocabulary(symbols, classes)
