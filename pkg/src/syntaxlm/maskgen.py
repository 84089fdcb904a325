"""Stack/compose attention masks and relative-position matrices.

A sequence here is anything with ``kinds`` (list of :class:`Kind`) and
``depths`` (list of int, or ``None``) attributes: an ``ActionSequence`` or a
model-side ``Encoded`` sequence.  Indices are 0-based.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .treebank import Kind, SequenceError


class Attention(enum.Enum):
    TG_STACK_COMPOSE = "tg"
    CAUSAL = "causal"


class Positions(enum.Enum):
    TREE_DEPTH_DELTA = "depth"
    LINEAR_DELTA = "linear"
    NONE = "none"


class InputView(enum.Enum):
    DUPLICATED_TREES = "duplicated"
    RAW_TREES = "raw"
    TERMINALS_ONLY = "terminals"


@dataclass(frozen=True)
class MaskMode:
    attention: Attention = Attention.TG_STACK_COMPOSE
    positions: Positions = Positions.TREE_DEPTH_DELTA
    input_view: InputView = InputView.DUPLICATED_TREES
    r_min: int = -16
    r_max: int = 16

    def __post_init__(self):
        if self.attention is Attention.TG_STACK_COMPOSE and self.input_view is not InputView.DUPLICATED_TREES:
            raise ValueError("stack/compose attention requires the duplicated-trees view")
        if self.positions is Positions.TREE_DEPTH_DELTA and self.input_view is InputView.TERMINALS_ONLY:
            raise ValueError("tree-depth positions need a tree view")
        if self.r_min > 0 or self.r_max < 0:
            raise ValueError("relative-position interval must contain 0")

    @property
    def n_relative(self) -> int:
        return self.r_max - self.r_min + 1

    def to_json(self) -> dict:
        return {"attention": self.attention.value, "positions": self.positions.value,
                "input_view": self.input_view.value, "r_min": self.r_min, "r_max": self.r_max}

    @classmethod
    def from_json(cls, obj: dict) -> "MaskMode":
        return cls(Attention(obj["attention"]), Positions(obj["positions"]), InputView(obj["input_view"]),
                   obj.get("r_min", -16), obj.get("r_max", 16))


PRESETS = {
    "tg": MaskMode(),
    "txl-trees": MaskMode(Attention.CAUSAL, Positions.LINEAR_DELTA, InputView.RAW_TREES),
    "txl-terminals": MaskMode(Attention.CAUSAL, Positions.LINEAR_DELTA, InputView.TERMINALS_ONLY),
}


def mode_from_preset(name: str, positions: str | None = None, r_min: int = -16, r_max: int = 16) -> MaskMode:
    base = PRESETS[name]
    pos = Positions(positions) if positions else base.positions
    return MaskMode(base.attention, pos, base.input_view, r_min, r_max)


# ---------------------------------------------------------------------------
# Algorithm 1


class StackCompose:
    """Incremental stack/compose interpreter.

    ``step(kind)`` consumes the next position and returns the positions it
    attends to (sorted).  ``stack`` afterwards holds exactly the positions any
    later row may attend.
    """

    def __init__(self):
        self.stack: list[int] = []
        self._kinds: list[Kind] = []

    def step(self, kind: Kind) -> list[int]:
        i = len(self._kinds)
        self._kinds.append(kind)
        if kind == Kind.CNT1:
            attended = [i]
            while True:
                if not self.stack:
                    raise SequenceError("closing nonterminal with no open constituent", i)
                j = self.stack.pop()
                attended.append(j)
                if self._kinds[j] == Kind.ONT:
                    break
            self.stack.append(i)
            attended.sort()
            return attended
        if kind == Kind.PAD:
            return [i]
        if kind == Kind.CNT:
            raise SequenceError("raw CNT in stack/compose input; duplicate closings first", i)
        if kind == Kind.CNT2:
            if i == 0 or self._kinds[i - 1] != Kind.CNT1:
                raise SequenceError("CNT2 not preceded by CNT1", i)
        else:
            self.stack.append(i)
        return list(self.stack)

    def open_constituents(self) -> list[int]:
        return [j for j in self.stack if self._kinds[j] == Kind.ONT]


def stack_compose_rows(kinds: Sequence[Kind], strict: bool = True) -> tuple[list[list[int]], list[int]]:
    """Attended positions for every row, plus the final stack."""
    sc = StackCompose()
    rows = [sc.step(k) for k in kinds]
    if strict:
        still_open = sc.open_constituents()
        if still_open:
            raise SequenceError("opening nonterminal never closed", still_open[0])
    return rows, list(sc.stack)


def attendable_set(seq, i: int) -> set[int]:
    """Stack contents right after processing position ``i``."""
    kinds = seq.kinds
    if not 0 <= i < len(kinds):
        raise IndexError(i)
    sc = StackCompose()
    for k in kinds[: i + 1]:
        sc.step(k)
    return set(sc.stack)


# ---------------------------------------------------------------------------
# Mask storage

UNSET = -(2 ** 15)


@dataclass
class MaskBundle:
    """Sparse attention mask with relative positions at attended entries.

    ``bits`` holds bit-packed rows of A; ``rel`` holds R for each set bit in
    row-major order, with ``offsets`` giving each row's slice into ``rel``.
    """

    shape: tuple[int, int]
    bits: np.ndarray
    offsets: np.ndarray
    rel: np.ndarray
    stack_trace: tuple[int, ...] = field(default_factory=tuple)

    @classmethod
    def from_dense(cls, A: np.ndarray, R: np.ndarray | None = None, stack_trace=()) -> "MaskBundle":
        A = np.asarray(A, dtype=bool)
        if R is None:
            R = np.zeros(A.shape, dtype=np.int64)
        counts = A.sum(axis=1)
        offsets = np.zeros(A.shape[0] + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(A.shape, np.packbits(A, axis=1), offsets, np.asarray(R)[A].astype(np.int16), tuple(stack_trace))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], n_cols: int, rel_rows=None, stack_trace=()) -> "MaskBundle":
        A = np.zeros((len(rows), n_cols), dtype=bool)
        R = np.zeros((len(rows), n_cols), dtype=np.int64)
        for i, cols in enumerate(rows):
            A[i, list(cols)] = True
            if rel_rows is not None:
                R[i, list(cols)] = rel_rows[i]
        return cls.from_dense(A, R, stack_trace)

    @property
    def A(self) -> np.ndarray:
        return np.unpackbits(self.bits, axis=1, count=self.shape[1]).astype(bool)

    def R(self, fill: int = UNSET) -> np.ndarray:
        out = np.full(self.shape, fill, dtype=np.int64)
        out[self.A] = self.rel
        return out

    def row(self, i: int) -> np.ndarray:
        return np.flatnonzero(np.unpackbits(self.bits[i], count=self.shape[1]))

    def __eq__(self, other) -> bool:
        return (isinstance(other, MaskBundle) and self.shape == other.shape
                and np.array_equal(self.bits, other.bits) and np.array_equal(self.rel, other.rel))


# ---------------------------------------------------------------------------
# Relative positions


def relative_values(mode: MaskMode, row_pos, row_depth, col_pos, col_depth) -> np.ndarray:
    """Clamped R for the outer product of rows x columns."""
    row_pos = np.asarray(row_pos)
    col_pos = np.asarray(col_pos)
    if mode.positions is Positions.NONE:
        return np.zeros((len(row_pos), len(col_pos)), dtype=np.int64)
    if mode.positions is Positions.LINEAR_DELTA:
        R = row_pos[:, None] - col_pos[None, :]
    else:
        if row_depth is None or col_depth is None:
            raise ValueError("tree-depth relative positions need depths")
        R = np.asarray(row_depth)[:, None] - np.asarray(col_depth)[None, :]
    return np.clip(R, mode.r_min, mode.r_max).astype(np.int64)


def relative_positions(seq, mode: MaskMode, A: np.ndarray) -> np.ndarray:
    """R wherever A is set, ``UNSET`` elsewhere; all zero in NONE mode."""
    n = A.shape[0]
    pos = np.arange(n)
    depths = seq.depths if mode.positions is Positions.TREE_DEPTH_DELTA else None
    if mode.positions is Positions.TREE_DEPTH_DELTA and depths is None:
        raise ValueError("tree-depth relative positions need depths")
    R = relative_values(mode, pos, depths, pos, depths)
    if mode.positions is Positions.NONE:
        return R
    return np.where(A, R, UNSET)


# ---------------------------------------------------------------------------
# Entry points


def stack_compose_mask(seq, mode: MaskMode | None = None, strict: bool = True) -> MaskBundle:
    mode = mode or PRESETS["tg"]
    rows, stack = stack_compose_rows(seq.kinds, strict=strict)
    n = len(rows)
    A = np.zeros((n, n), dtype=bool)
    for i, cols in enumerate(rows):
        A[i, cols] = True
    R = relative_positions(seq, mode, A)
    return MaskBundle.from_dense(A, np.where(A, R, 0), stack)


def causal_mask(seq_len: int) -> MaskBundle:
    if seq_len < 1:
        raise ValueError("sequence length must be >= 1")
    A = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    return MaskBundle.from_dense(A, None, tuple(range(seq_len)))


def build_mask(seq, mode: MaskMode) -> MaskBundle:
    """Mask + relative positions for a whole sequence under ``mode``."""
    if mode.attention is Attention.TG_STACK_COMPOSE:
        return stack_compose_mask(seq, mode)
    n = len(seq.kinds)
    A = np.tril(np.ones((n, n), dtype=bool))
    pads = [i for i, k in enumerate(seq.kinds) if k == Kind.PAD]
    if pads:
        A[pads, :] = False
        A[:, pads] = False
        A[pads, pads] = True
    R = relative_positions(seq, mode, A)
    pad_set = set(pads)
    return MaskBundle.from_dense(A, np.where(A, R, 0), tuple(i for i in range(n) if i not in pad_set))


def dump_mask(seq, bundle: MaskBundle) -> str:
    """Text grid for golden-file tests: rows attend, columns are attended."""
    A = bundle.A
    R = bundle.R()
    lines = []
    tokens = getattr(seq, "tokens", None) or [k.name for k in seq.kinds]
    width = max(len(t) for t in tokens)
    for i, t in enumerate(tokens):
        lines.append(f"{i:>3} {t:<{width}} " + "".join("1" if a else "." for a in A[i]))
    depths = seq.depths
    lines.append("depths: " + (" ".join(map(str, depths)) if depths is not None else "n/a"))
    lines.append("R:")
    for i in range(A.shape[0]):
        lines.append(" ".join(f"{r:>3}" if A[i, j] else "  ." for j, r in enumerate(R[i])))
    return "\n".join(lines) + "\n"
