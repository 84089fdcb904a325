"""Autoregressive transformer over action sequences with relative-position attention.

The network is post-norm, ties its output projection to the embedding matrix,
and attends through a precomputed mask (stack/compose or causal).  Scores are

    s_ij = (q_i + u)^T k_j + (q_i + v)^T r_ij

where r_ij is a learned row indexed by the clamped relative position R_ij.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .maskgen import Attention, InputView, MaskMode, PRESETS, Positions
from .segmenter import plan_segments, precompute_stream
from .treebank import (Action, ActionSequence, Kind, Tree, Vocabulary, concat, duplicate_closing, linearize,
                       strip_duplicates)


class NumericalError(FloatingPointError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    mode: MaskMode = field(default_factory=MaskMode)
    segment_length: int = 256
    memory_size: int = 256
    seed: int = 0
    init_std: float | None = None  # None: 1/sqrt(fan-in) per matrix

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 1:
            raise ValueError("need at least one layer")

    def to_json(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["mode"] = MaskMode.from_json(obj["mode"])
        return cls(**obj)


# ---------------------------------------------------------------------------
# Encoding


@dataclass
class Encoded:
    """Model-ready sequence: BOS followed by the view's actions."""

    ids: np.ndarray
    kinds: list[Kind]
    depths: list[int] | None
    tokens: list[str]
    sentence: np.ndarray  # sentence index of every position (BOS belongs to sentence 0)
    n_words: int

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def predict(self) -> np.ndarray:
        return prediction_schedule(self.kinds)

    @property
    def event_positions(self) -> np.ndarray:
        """Positions that emit a distribution; each predicts the next token."""
        return np.flatnonzero(self.predict)


def prediction_schedule(kinds: Sequence[Kind]) -> np.ndarray:
    """predict[i] is true iff position i is not a COMPOSE position and has a successor."""
    n = len(kinds)
    out = np.array([k != Kind.CNT1 for k in kinds], dtype=bool)
    if n:
        out[-1] = False
    return out


TreeLike = Union[Tree, Sequence[Tree], ActionSequence]


def encode(item: TreeLike, vocab: Vocabulary, view: InputView) -> Encoded:
    """Encode a tree, a document (list of trees) or an action sequence."""
    if isinstance(item, Tree):
        item = [item]
    if isinstance(item, ActionSequence):
        seqs = [item]
    else:
        seqs = [linearize(t) for t in item]
    if view is InputView.TERMINALS_ONLY:
        actions: list[Action] = [Action("<bos>", Kind.BOS, 0)]
        sentence = [0]
        for s_idx, seq in enumerate(seqs):
            words = [a for a in seq if a.kind == Kind.T]
            actions += words
            actions.append(Action("<eos>", Kind.EOS, 0))
            sentence += [s_idx] * (len(words) + 1)
        ids = [vocab.id(a) for a in actions]
        return Encoded(np.asarray(ids, dtype=np.int64), [a.kind for a in actions], None,
                       [a.token for a in actions], np.asarray(sentence), sum(a.kind == Kind.T for a in actions))
    sentence = [0]
    parts = []
    for s_idx, seq in enumerate(seqs):
        seq = strip_duplicates(seq) if view is InputView.RAW_TREES else (
            seq if seq.duplicated else duplicate_closing(seq))
        parts.append(seq)
        sentence += [s_idx] * len(seq)
    full = concat(parts)
    actions = [Action("<bos>", Kind.BOS, 0)] + list(full.actions)
    ids = [vocab.id(a) for a in actions]
    return Encoded(np.asarray(ids, dtype=np.int64), [a.kind for a in actions], [a.depth for a in actions],
                   [a.token for a in actions], np.asarray(sentence), sum(a.kind == Kind.T for a in actions))


def output_ids(vocab: Vocabulary, view: InputView) -> list[int]:
    """Symbols the model may predict under ``view``."""
    allowed = set(vocab.ids_of_class("terminal")) | {vocab.unk_id}
    if view is InputView.TERMINALS_ONLY:
        allowed.add(vocab.eos_id)
    else:
        allowed |= set(vocab.ids_of_class("ont")) | set(vocab.ids_of_class("cnt"))
    return sorted(allowed)


# ---------------------------------------------------------------------------
# Network


class RelativeAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, n_relative: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.w_q = nn.Linear(d_model, d_model, bias=False)
        self.w_k = nn.Linear(d_model, d_model, bias=False)
        self.w_v = nn.Linear(d_model, d_model, bias=False)
        self.w_o = nn.Linear(d_model, d_model, bias=False)
        self.w_r = nn.Parameter(torch.zeros(n_relative, d_model))
        self.u = nn.Parameter(torch.zeros(n_heads, self.d_head))
        self.v = nn.Parameter(torch.zeros(n_heads, self.d_head))

    def forward(self, h, mem, mask, rel, return_probs: bool = False):
        B, L, d = h.shape
        ctx = torch.cat([mem, h], dim=1)
        N = ctx.shape[1]
        H, dh = self.n_heads, self.d_head
        q = self.w_q(h).view(B, L, H, dh)
        k = self.w_k(ctx).view(B, N, H, dh)
        v = self.w_v(ctx).view(B, N, H, dh)
        content = torch.einsum("blhd,bnhd->bhln", q + self.u, k)
        by_offset = torch.einsum("blhd,rhd->bhlr", q + self.v, self.w_r.view(-1, H, dh))
        position = torch.gather(by_offset, 3, rel.unsqueeze(1).expand(B, H, L, N))
        scores = (content + position) / math.sqrt(dh)
        scores = scores.masked_fill(~mask.unsqueeze(1), torch.finfo(scores.dtype).min)
        probs = torch.softmax(scores, dim=-1)
        out = torch.einsum("bhln,bnhd->blhd", probs, v).reshape(B, L, d)
        out = self.w_o(out)
        return (out, probs) if return_probs else out


class Layer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = RelativeAttention(cfg.d_model, cfg.n_heads, cfg.mode.n_relative)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)

    def forward(self, h, mem, mask, rel):
        h = self.norm1(h + self.attn(h, mem, mask, rel))
        return self.norm2(h + self.ff2(F.relu(self.ff1(h))))


class TransformerLM(nn.Module):
    def __init__(self, cfg: ModelConfig, output_ids: Sequence[int] | None = None):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Parameter(torch.zeros(cfg.vocab_size, cfg.d_model))
        self.layers = nn.ModuleList(Layer(cfg) for _ in range(cfg.n_layers))
        blocked = torch.ones(cfg.vocab_size, dtype=torch.bool)
        blocked[list(output_ids) if output_ids is not None else slice(None)] = False
        self.register_buffer("blocked", blocked, persistent=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.cfg.seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith(".u") or name.endswith(".v") or name.endswith("bias"):
                    p.zero_()
                else:
                    std = self.cfg.init_std if self.cfg.init_std is not None else p.shape[-1] ** -0.5
                    p.copy_(torch.randn(p.shape, generator=gen) * std)

    def forward(self, ids, mask, rel, memory: Sequence[torch.Tensor] | None = None, check: bool = True):
        """One segment.

        ids (B, L); mask (B, L, M+L) bool; rel (B, L, M+L) clamped R;
        memory: per layer (B, M, d).  Returns logits (B, L, V) and the input
        states of every layer (for the memory update).
        """
        B, L = ids.shape
        h = self.embedding[ids]
        rel_idx = rel.long() - self.cfg.mode.r_min
        hiddens = []
        for k, layer in enumerate(self.layers):
            hiddens.append(h)
            mem = memory[k] if memory is not None else h.new_zeros(B, 0, h.shape[-1])
            h = layer(h, mem, mask, rel_idx)
            if check and not torch.isfinite(h).all():
                raise NumericalError("non-finite activations", layer=k)
        logits = h @ self.embedding.t()
        logits = logits.masked_fill(self.blocked, torch.finfo(logits.dtype).min)
        return logits, hiddens

    def forward_stream(self, ids, masks, rel, gather, check: bool = True):
        """All segments of a batch of streams: ids (B, S, L), masks/rel (B, S, L, M+L), gather (B, S, M)."""
        B, S, L = ids.shape
        M = masks.shape[-1] - L
        d = self.cfg.d_model
        dtype = self.embedding.dtype
        memory = [torch.zeros(B, M, d, dtype=dtype) for _ in self.layers]
        outs = []
        for t in range(S):
            logits, hiddens = self(ids[:, t], masks[:, t], rel[:, t], memory, check=check)
            outs.append(logits)
            if t + 1 < S and M > 0:
                idx = gather[:, t].clone()
                idx[idx < 0] = M + L
                idx = idx.unsqueeze(-1).expand(B, M, d)
                new = []
                for k in range(len(self.layers)):
                    pool = torch.cat([memory[k], hiddens[k], hiddens[k].new_zeros(B, 1, d)], dim=1).detach()
                    new.append(torch.gather(pool, 1, idx))
                memory = new
        return torch.stack(outs, dim=1)


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Prepared:
    enc: Encoded
    ids: np.ndarray
    masks: np.ndarray
    rel: np.ndarray
    gather: np.ndarray
    targets: np.ndarray  # (S, L), -1 where no prediction
    truncations: int


def prepare(enc: Encoded, cfg: ModelConfig, pad_id: int) -> Prepared:
    plan = plan_segments(enc, cfg.segment_length, cfg.memory_size, cfg.mode, ids=enc.ids, pad_id=pad_id)
    layout = precompute_stream(plan)
    S, L = layout.ids.shape
    targets = np.full(S * L, -1, dtype=np.int64)
    pos = enc.event_positions
    targets[pos] = enc.ids[pos + 1]
    return Prepared(enc, layout.ids, layout.masks, layout.rel, layout.gather, targets.reshape(S, L),
                    layout.truncations)


def collate(items: Sequence[Prepared], pad_id: int):
    """Stack prepared streams; single-segment batches are trimmed to their real length."""
    S = max(p.ids.shape[0] for p in items)
    _, L = items[0].ids.shape
    M = items[0].masks.shape[-1] - L
    if S == 1:
        n = max(len(p.enc) for p in items)
        ids = np.full((len(items), 1, n), pad_id, dtype=np.int64)
        masks = np.zeros((len(items), 1, n, n), dtype=bool)
        rel = np.zeros((len(items), 1, n, n), dtype=np.int64)
        targets = np.full((len(items), 1, n), -1, dtype=np.int64)
        # memory is empty in the first segment, so its columns can be dropped
        for b, p in enumerate(items):
            ids[b, 0] = p.ids[0, :n]
            masks[b, 0] = p.masks[0, :n, M:M + n]
            rel[b, 0] = p.rel[0, :n, M:M + n]
            targets[b, 0] = p.targets[0, :n]
        gather = np.full((len(items), 1, 0), -1, dtype=np.int64)
    else:
        ids = np.full((len(items), S, L), pad_id, dtype=np.int64)
        masks = np.zeros((len(items), S, L, M + L), dtype=bool)
        rel = np.zeros((len(items), S, L, M + L), dtype=np.int64)
        targets = np.full((len(items), S, L), -1, dtype=np.int64)
        gather = np.full((len(items), S, M), -1, dtype=np.int64)
        for b, p in enumerate(items):
            s = p.ids.shape[0]
            ids[b, :s], masks[b, :s], rel[b, :s], targets[b, :s], gather[b, :s] = (
                p.ids, p.masks, p.rel, p.targets, p.gather)
        idx = np.arange(L)
        masks[:, :, idx, M + idx] |= ids == pad_id
    return (torch.from_numpy(ids), torch.from_numpy(masks), torch.from_numpy(rel),
            torch.from_numpy(gather), torch.from_numpy(targets))


def stream_size(p: Prepared) -> int:
    """Token cost of a prepared stream once collated (single segments are trimmed)."""
    return p.ids.size if p.ids.shape[0] > 1 else len(p.enc)


def batches_by_length(items: Sequence, size_of, max_tokens: int) -> list[list[int]]:
    order = sorted(range(len(items)), key=lambda i: size_of(items[i]))
    out, cur, cur_max = [], [], 0
    for i in order:
        n = size_of(items[i])
        if cur and max(cur_max, n) * (len(cur) + 1) > max_tokens:
            out.append(cur)
            cur, cur_max = [], 0
        cur.append(i)
        cur_max = max(cur_max, n)
    if cur:
        out.append(cur)
    return out


# ---------------------------------------------------------------------------
# Scoring wrapper


class LanguageModel:
    """A network together with its vocabulary and mask mode."""

    def __init__(self, net: TransformerLM, vocab: Vocabulary):
        self.net = net
        self.vocab = vocab

    @classmethod
    def create(cls, cfg: ModelConfig, vocab: Vocabulary) -> "LanguageModel":
        if cfg.vocab_size != len(vocab):
            raise ValueError("config vocab_size does not match vocabulary")
        return cls(TransformerLM(cfg, output_ids(vocab, cfg.mode.input_view)), vocab)

    @property
    def cfg(self) -> ModelConfig:
        return self.net.cfg

    @property
    def mode(self) -> MaskMode:
        return self.net.cfg.mode

    @property
    def view(self) -> InputView:
        return self.net.cfg.mode.input_view

    def encode(self, item: TreeLike) -> Encoded:
        return encode(item, self.vocab, self.view)

    def prepare(self, enc: Encoded) -> Prepared:
        return prepare(enc, self.cfg, self.vocab.pad_id)

    def logits(self, item: TreeLike | Encoded) -> torch.Tensor:
        """(T, V) logits for a single sequence, streamed through segments."""
        enc = item if isinstance(item, Encoded) else self.encode(item)
        ids, masks, rel, gather, _ = collate([self.prepare(enc)], self.vocab.pad_id)
        with torch.no_grad():
            out = self.net.forward_stream(ids, masks, rel, gather)
        return out.reshape(-1, out.shape[-1])[: len(enc)]

    def event_logprobs(self, items: Sequence[TreeLike | Encoded], max_tokens: int = 8192) -> list[np.ndarray]:
        """Per-event log probabilities (float64) for each sequence, in event order."""
        encs = [it if isinstance(it, Encoded) else self.encode(it) for it in items]
        preps = [self.prepare(e) for e in encs]
        out: list[np.ndarray | None] = [None] * len(encs)
        groups = batches_by_length(preps, stream_size, max_tokens)
        was_training = self.net.training
        self.net.eval()
        with torch.no_grad():
            for group in groups:
                ids, masks, rel, gather, targets = collate([preps[i] for i in group], self.vocab.pad_id)
                logits = self.net.forward_stream(ids, masks, rel, gather)
                logp = torch.log_softmax(logits.to(torch.float64), dim=-1)
                for b, i in enumerate(group):
                    t = targets[b].reshape(-1)
                    lp = logp[b].reshape(-1, logp.shape[-1])
                    sel = torch.nonzero(t >= 0).squeeze(-1)
                    out[i] = lp[sel, t[sel]].numpy().copy()
        self.net.train(was_training)
        return out

    def joint_logprobs(self, items: Sequence[TreeLike]) -> np.ndarray:
        return np.array([float(np.sum(lp, dtype=np.float64)) for lp in self.event_logprobs(items)])

    def joint_logprob(self, item: TreeLike) -> float:
        return float(self.joint_logprobs([item])[0])

    def loss(self, items: Sequence[TreeLike | Encoded]) -> torch.Tensor:
        """Mean NLL over prediction events (differentiable)."""
        encs = [it if isinstance(it, Encoded) else self.encode(it) for it in items]
        ids, masks, rel, gather, targets = collate([self.prepare(e) for e in encs], self.vocab.pad_id)
        return sequence_loss(self.net, ids, masks, rel, gather, targets)


def sequence_loss(net: TransformerLM, ids, masks, rel, gather, targets, reduction: str = "mean"):
    if not (targets >= 0).any():
        raise ValueError("no prediction events in batch")
    logits = net.forward_stream(ids, masks, rel, gather)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-1,
                           reduction=reduction)


# ---------------------------------------------------------------------------
# Checkpoints

MAGIC = b"SLMCKPT\0"
FORMAT_VERSION = 1


def save_checkpoint(lm: LanguageModel, path: str | Path, metadata: dict | None = None) -> None:
    """Header (config + vocab + manifest JSON) followed by a float32 little-endian blob."""
    manifest, blobs, offset = [], [], 0
    for name, p in lm.net.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"config": lm.cfg.to_json(), "vocab": lm.vocab.to_json(), "manifest": manifest,
                         "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path, dtype=torch.float32) -> tuple[LanguageModel, dict]:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(n).decode("utf-8"))
        blob = np.frombuffer(f.read(), dtype="<f4")
    cfg = ModelConfig.from_json(header["config"])
    lm = LanguageModel.create(cfg, Vocabulary.from_json(header["vocab"]))
    state = {}
    for entry in header["manifest"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = blob[entry["offset"]: entry["offset"] + size].reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    lm.net.load_state_dict(state)
    lm.net.to(dtype)
    return lm, header["metadata"]
