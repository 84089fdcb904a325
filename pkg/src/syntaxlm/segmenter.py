"""Fixed-length segmentation and recurrent memory with original-position bookkeeping.

Memory slot contents depend only on the action sequence, never on hidden
values, so the whole per-segment layout (masks, relative positions, memory
gather indices) can be computed once per sequence with :func:`precompute_stream`
and replayed on batched hidden states.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .maskgen import Attention, MaskBundle, MaskMode, PRESETS, StackCompose, relative_values
from .treebank import Kind


@dataclass
class SegmentPlan:
    L: int
    M: int
    mode: MaskMode
    kinds: list[Kind]
    depths: list[int] | None
    ids: np.ndarray | None
    n_segments: int
    rows: list[list[int]] | None  # stack/compose rows for the whole sequence
    boundary_stacks: list[list[int]] | None  # stack after each segment's last position
    pad_id: int = 0

    @property
    def length(self) -> int:
        return len(self.kinds)

    def bounds(self, tau: int) -> tuple[int, int]:
        if not 0 <= tau < self.n_segments:
            raise IndexError(f"segment {tau} out of range")
        start = tau * self.L
        return start, min(start + self.L, self.length)

    def segment_ids(self, tau: int) -> np.ndarray:
        if self.ids is None:
            raise ValueError("plan was built without token ids")
        start, end = self.bounds(tau)
        out = np.full(self.L, self.pad_id, dtype=np.int64)
        out[: end - start] = self.ids[start:end]
        return out


def plan_segments(seq, L: int, M: int = 0, mode: MaskMode | None = None,
                  ids: Sequence[int] | None = None, pad_id: int = 0) -> SegmentPlan:
    if L < 1:
        raise ValueError("segment length must be >= 1")
    if M < 0:
        raise ValueError("memory size must be >= 0")
    mode = mode or PRESETS["tg"]
    kinds = list(seq.kinds)
    n_seg = max(1, math.ceil(len(kinds) / L))
    rows = stacks = None
    if mode.attention is Attention.TG_STACK_COMPOSE:
        sc = StackCompose()
        rows, stacks = [], []
        ends = {min((t + 1) * L, len(kinds)) - 1 for t in range(n_seg)}
        for i, k in enumerate(kinds):
            rows.append(sc.step(k))
            if i in ends:
                stacks.append(list(sc.stack))
    depths = None if seq.depths is None else list(seq.depths)
    return SegmentPlan(L, M, mode, kinds, depths, None if ids is None else np.asarray(ids, dtype=np.int64),
                       n_seg, rows, stacks, pad_id)


@dataclass
class MemoryState:
    capacity: int
    origins: list[int] = field(default_factory=list)
    depths: list[int] = field(default_factory=list)
    layers: list[torch.Tensor] | None = None  # per layer, (n_slots, d)
    truncations: int = 0

    def __len__(self) -> int:
        return len(self.origins)

    def check(self) -> None:
        if len(self.origins) > self.capacity:
            raise ValueError("memory holds more slots than its capacity")
        if any(b <= a for a, b in zip(self.origins, self.origins[1:])):
            raise ValueError("memory slot origins must be strictly increasing")


def segment_mask(plan: SegmentPlan, tau: int, memory: MemoryState, mode: MaskMode | None = None) -> MaskBundle:
    """L x (M+L) mask; memory slots are columns 0..M-1, the segment is M.."""
    mode = mode or plan.mode
    L, M = plan.L, plan.M
    start, end = plan.bounds(tau)
    n_real = end - start
    memory.check()
    if memory.capacity != M:
        raise ValueError(f"memory capacity {memory.capacity} does not match plan M={M}")
    if memory.origins and memory.origins[-1] >= start:
        raise ValueError(f"memory slot at origin {memory.origins[-1]} is not before segment start {start}")
    n_mem = len(memory.origins)
    mem_orig = np.asarray(memory.origins, dtype=np.int64)
    slot_of = {o: s for s, o in enumerate(memory.origins)}
    is_pad = np.array([k == Kind.PAD for k in plan.kinds[start:end]], dtype=bool)
    A = np.zeros((L, M + L), dtype=bool)
    for r in range(n_real):
        i = start + r
        if is_pad[r]:
            A[r, M + r] = True
            continue
        if mode.attention is Attention.TG_STACK_COMPOSE:
            for j in plan.rows[i]:
                if j >= start:
                    A[r, M + j - start] = True
                elif j in slot_of:
                    A[r, slot_of[j]] = True
        else:
            A[r, :n_mem] = True
            A[r, M:M + r + 1] = ~is_pad[: r + 1]
    for r in range(n_real, L):
        A[r, M + r] = True

    col_pos = np.zeros(M + L, dtype=np.int64)
    col_pos[:n_mem] = mem_orig
    col_pos[M:] = start + np.arange(L)
    row_pos = start + np.arange(L)
    if plan.depths is not None:
        dep = np.zeros(plan.length + L, dtype=np.int64)
        dep[: plan.length] = plan.depths
        col_dep = np.zeros(M + L, dtype=np.int64)
        col_dep[:n_mem] = memory.depths
        col_dep[M:] = dep[start:start + L]
        row_dep = dep[start:start + L]
    else:
        col_dep = row_dep = None
    R = relative_values(mode, row_pos, row_dep, col_pos, col_dep)
    R[n_real:] = 0
    stack = plan.boundary_stacks[tau] if plan.boundary_stacks is not None else ()
    return MaskBundle.from_dense(A, np.where(A, R, 0), stack)


def memory_transition(plan: SegmentPlan, tau: int, origins: Sequence[int]) -> tuple[list[int], list[int], int]:
    """Bookkeeping of a memory update.

    Returns the new slot origins, for each new slot its source index into the
    concatenation ``[old slots, segment rows]`` (old slots counted as ``len(origins)``),
    and how many attendable positions were dropped for lack of capacity.
    """
    start, end = plan.bounds(tau)
    n_old = len(origins)
    candidates = [(o, s) for s, o in enumerate(origins)]
    candidates += [(start + r, n_old + r) for r in range(end - start) if plan.kinds[start + r] != Kind.PAD]
    dropped = 0
    if plan.mode.attention is Attention.TG_STACK_COMPOSE:
        keep_set = set(plan.boundary_stacks[tau])
        candidates = [c for c in candidates if c[0] in keep_set]
        if len(candidates) > plan.M:
            dropped = len(candidates) - plan.M
    if plan.M == 0:
        candidates = []
    else:
        candidates = candidates[-plan.M:]
    return [c[0] for c in candidates], [c[1] for c in candidates], dropped


def update_memory(memory: MemoryState, hidden: Sequence[torch.Tensor] | None, plan: SegmentPlan, tau: int,
                  mode: MaskMode | None = None) -> MemoryState:
    """New memory after segment ``tau``.

    ``hidden`` holds, per layer, that layer's *input* states for the segment
    (shape ``(L, d)``); they are detached before being stored.
    """
    if mode is not None and mode != plan.mode:
        raise ValueError("mode differs from the plan's mode")
    new_origins, src, dropped = memory_transition(plan, tau, memory.origins)
    depths = [plan.depths[o] for o in new_origins] if plan.depths is not None else [0] * len(new_origins)
    layers = None
    if hidden is not None:
        layers = []
        for k, h in enumerate(hidden):
            old = memory.layers[k] if memory.layers is not None else h.new_zeros((0, h.shape[-1]))
            pool = torch.cat([old, h], dim=0).detach()
            layers.append(pool[torch.as_tensor(src, dtype=torch.long)] if src else pool[:0])
    return MemoryState(plan.M, new_origins, depths, layers, memory.truncations + dropped)


@dataclass
class StreamLayout:
    """Precomputed per-segment tensors for one sequence.

    ``gather[t]`` indexes the concatenation of an M-slot padded memory and the
    L segment rows; -1 marks an empty slot.
    """

    ids: np.ndarray  # (S, L)
    masks: np.ndarray  # (S, L, M+L) bool
    rel: np.ndarray  # (S, L, M+L) clamped R
    gather: np.ndarray  # (S, M)
    truncations: int


def precompute_stream(plan: SegmentPlan) -> StreamLayout:
    L, M, S = plan.L, plan.M, plan.n_segments
    masks = np.zeros((S, L, M + L), dtype=bool)
    rel = np.zeros((S, L, M + L), dtype=np.int16)
    gather = np.full((S, M), -1, dtype=np.int64)
    ids = np.stack([plan.segment_ids(t) for t in range(S)]) if plan.ids is not None else None
    mem = MemoryState(M)
    for t in range(S):
        bundle = segment_mask(plan, t, mem)
        masks[t] = bundle.A
        rel[t] = bundle.R(fill=0)
        new_origins, src, dropped = memory_transition(plan, t, mem.origins)
        n_old = len(mem.origins)
        for s, j in enumerate(src):
            # old slot j stays at index j in the padded memory; segment row r sits at M + r
            gather[t, s] = j if j < n_old else M + (j - n_old)
        depths = [plan.depths[o] for o in new_origins] if plan.depths is not None else [0] * len(new_origins)
        mem = MemoryState(M, new_origins, depths, None, mem.truncations + dropped)
    return StreamLayout(ids, masks, rel, gather, mem.truncations)
