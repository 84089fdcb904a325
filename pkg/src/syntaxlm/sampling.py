"""Ancestral sampling with optional well-formedness constraints."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .maskgen import Attention, InputView, StackCompose, relative_values
from .model import LanguageModel
from .treebank import Action, ActionSequence, Kind, SequenceError


@dataclass
class Sample:
    """A sampled sequence; when ``ill_formed``, its last action is usually the offending one."""

    actions: ActionSequence
    ill_formed: bool
    reason: str = ""

    @property
    def tokens(self) -> list[str]:
        return self.actions.tokens


class _State:
    """One sample in progress: positions so far (BOS first) and the open-constituent stack."""

    def __init__(self, vocab, mode):
        self.vocab = vocab
        self.mode = mode
        self.ids = [vocab.bos_id]
        self.kinds = [Kind.BOS]
        self.depths = [0]
        self.actions: list[Action] = []
        self.rows: list[list[int]] = []
        self.sc = StackCompose() if mode.attention is Attention.TG_STACK_COMPOSE else None
        self.open: list[str] = []
        self.has_child: list[bool] = []
        self.started = False
        self.done = False
        self.reason = ""
        self._rows_for_last()

    def _rows_for_last(self) -> None:
        if self.sc is not None:
            self.rows.append(self.sc.step(self.kinds[-1]))
        else:
            self.rows.append(list(range(len(self.kinds))))

    def push(self, token_id: int, action: Action) -> None:
        self.ids.append(token_id)
        self.kinds.append(action.kind)
        self.depths.append(action.depth)
        self.actions.append(action)
        self._rows_for_last()

    def fail(self, reason: str, action: Action | None = None) -> None:
        """Stop this sample; the offending action, if any, is kept for inspection."""
        if action is not None:
            self.actions.append(action)
        self.done = True
        self.reason = reason


def _min_completion(n_open: int, top_has_child: bool, cc: int) -> int:
    """Fewest further actions needed to close every open constituent."""
    if n_open == 0:
        return 0
    return n_open * cc + (0 if top_has_child else 1)


def _admissible(s: _State, vocab, size: int, cc: int, max_len: int, depth_cap: int) -> torch.Tensor:
    ok = torch.zeros(size, dtype=torch.bool)
    used = len(s.actions)
    n_open = len(s.open)
    top_child = s.has_child[-1] if s.has_child else True
    if n_open < depth_cap and used + 1 + _min_completion(n_open + 1, False, cc) <= max_len:
        ok[vocab.ids_of_class("ont")] = True
    if not s.started:
        return ok
    if used + 1 + _min_completion(n_open, True, cc) <= max_len:
        ok[vocab.ids_of_class("terminal")] = True
        ok[vocab.unk_id] = True
    if top_child and used + cc + _min_completion(n_open - 1, True, cc) <= max_len:
        ok[vocab.index[s.open[-1] + ")"]] = True
    return ok


def _apply(s: _State, tok: int, view: InputView) -> None:
    vocab = s.vocab
    symbol = vocab.symbols[tok]
    cls = vocab.classes[tok]
    if view is InputView.TERMINALS_ONLY:
        if tok == vocab.eos_id:
            s.push(tok, Action(symbol, Kind.EOS, 0))
            s.done = True
        else:
            s.push(tok, Action(symbol, Kind.T, 0))
        return
    if cls == "ont":
        if s.started and not s.open:
            return s.fail("second root after the tree was complete", Action(symbol, Kind.ONT, 0))
        s.push(tok, Action(symbol, Kind.ONT, len(s.open)))
        if s.has_child:
            s.has_child[-1] = True
        s.open.append(symbol[1:])
        s.has_child.append(False)
        s.started = True
    elif cls in ("terminal",) or tok == vocab.unk_id:
        if not s.open:
            return s.fail("terminal outside any constituent", Action(symbol, Kind.T, 0))
        s.push(tok, Action(symbol, Kind.T, len(s.open)))
        s.has_child[-1] = True
    elif cls == "cnt":
        depth = max(len(s.open) - 1, 0)
        if not s.open:
            return s.fail("closing with an empty stack", Action(symbol, Kind.CNT, depth))
        if symbol != s.open[-1] + ")":
            return s.fail(f"{symbol} closes ({s.open[-1]}", Action(symbol, Kind.CNT, depth))
        if not s.has_child[-1]:
            return s.fail("empty constituent", Action(symbol, Kind.CNT, depth))
        if view is InputView.DUPLICATED_TREES:
            s.push(tok, Action(symbol, Kind.CNT1, depth))
            s.push(tok, Action(symbol, Kind.CNT2, depth))
        else:
            s.push(tok, Action(symbol, Kind.CNT, depth))
        s.open.pop()
        s.has_child.pop()
        if not s.open:
            s.done = True
    else:
        s.fail(f"unexpected symbol {symbol}", Action(symbol, Kind.EOS if tok == vocab.eos_id else Kind.T, 0))


def sample(lm: LanguageModel, n: int, max_len: int = 64, constraints: bool = True, temperature: float = 1.0,
           seed: int = 0, depth_cap: int = 16, batch_size: int = 256) -> list[Sample]:
    """Draw ``n`` sequences by ancestral sampling.

    ``max_len`` counts actions in the model's view; in the duplicated view a
    sampled closing occupies two positions, the second inserted without a
    prediction event.  With ``constraints`` on, only continuations that can
    still complete one well-formed tree within ``max_len`` are admissible.
    ``temperature=0`` decodes greedily.
    """
    gen = torch.Generator().manual_seed(seed)
    out: list[Sample] = []
    for start in range(0, n, batch_size):
        out.extend(_sample_batch(lm, min(batch_size, n - start), max_len, constraints, temperature, gen,
                                 depth_cap))
    return out


def _sample_batch(lm, n, max_len, constraints, temperature, gen, depth_cap) -> list[Sample]:
    vocab, mode, view, net = lm.vocab, lm.mode, lm.view, lm.net
    cc = 2 if view is InputView.DUPLICATED_TREES else 1
    states = [_State(vocab, mode) for _ in range(n)]
    net.eval()
    while True:
        active = [s for s in states if not s.done]
        if not active:
            break
        T = max(len(s.ids) for s in active)
        ids = np.full((len(active), T), vocab.pad_id, dtype=np.int64)
        masks = np.zeros((len(active), T, T), dtype=bool)
        rel = np.zeros((len(active), T, T), dtype=np.int64)
        for b, s in enumerate(active):
            n_s = len(s.ids)
            ids[b, :n_s] = s.ids
            for i, r in enumerate(s.rows):
                masks[b, i, r] = True
            masks[b, np.arange(n_s, T), np.arange(n_s, T)] = True
            pos = np.arange(n_s)
            deps = None if view is InputView.TERMINALS_ONLY else np.asarray(s.depths)
            rel[b, :n_s, :n_s] = np.where(masks[b, :n_s, :n_s], relative_values(mode, pos, deps, pos, deps), 0)
        with torch.no_grad():
            logits, _ = net(torch.from_numpy(ids), torch.from_numpy(masks), torch.from_numpy(rel))
        for b, s in enumerate(active):
            scores = logits[b, len(s.ids) - 1].to(torch.float64)
            allowed = ~net.blocked
            if constraints and view is not InputView.TERMINALS_ONLY:
                allowed = allowed & _admissible(s, vocab, len(scores), cc, max_len, depth_cap)
                if not allowed.any():
                    s.fail("no admissible continuation")
                    continue
            scores = scores.masked_fill(~allowed, -torch.inf)
            if temperature == 0:
                tok = int(torch.argmax(scores))
            else:
                tok = int(torch.multinomial(torch.softmax(scores / temperature, dim=-1), 1, generator=gen))
            try:
                _apply(s, tok, view)
            except SequenceError as exc:
                s.fail(str(exc))
            if not s.done and len(s.actions) >= max_len:
                s.fail("max_len reached before the tree was complete")
    out = []
    for s in states:
        seq = ActionSequence(tuple(s.actions), duplicated=view is InputView.DUPLICATED_TREES)
        out.append(Sample(seq, bool(s.reason), s.reason))
    return out
