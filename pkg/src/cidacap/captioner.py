"""Meshed-memory transformer captioner over grid region features.

Region features enter through a :class:`~cidacap.smoothing.CBS1d` layer, pass
three memory-augmented encoder layers, and every decoder layer attends to all
encoder outputs, mixing them with learned sigmoid gates.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import ce_with_ls
from .smoothing import SIGMA_FLOOR, CBS1d, SigmaSchedule

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


# -------------------------------------------------------------------- vocab

class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def words(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def encode(self, tokens: Sequence[str], bos_eos: bool = True) -> list[int]:
        ids = [self.stoi.get(t.lower(), UNK) for t in tokens]
        return [BOS] + ids + [EOS] if bos_eos else ids

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([w for w in text.split("\n") if w])


def build_vocab(captions: Sequence[Sequence[str] | str], min_count: int = 1) -> Vocab:
    """Lowercased whitespace tokens; ids ordered by frequency, then alphabetically."""
    if not captions:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for cap in captions:
        toks = cap.split() if isinstance(cap, str) else cap
        counts.update(t.lower() for t in toks)
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)


# ---------------------------------------------------------------- attention

@dataclass
class MemorySlots:
    keys: torch.Tensor  # (m, d)
    values: torch.Tensor  # (m, d)

    @property
    def m(self) -> int:
        return self.keys.shape[0]


def mem_attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
                  slots: MemorySlots | None = None, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product attention with memory slots appended to keys and values.

    ``queries`` is ``(..., n, d)``; ``keys``/``values`` ``(..., m_in, d)``.
    ``mask`` (broadcastable to ``(..., n, m_in)``) is True where attention is
    blocked; memory slots are never masked.
    """
    d = queries.shape[-1]
    if keys.shape[-1] != d or values.shape[-2] != keys.shape[-2]:
        raise ValueError("attention input shapes are inconsistent")
    if slots is not None and slots.m > 0:
        if slots.keys.shape[-1] != d or slots.values.shape != slots.keys.shape:
            raise ValueError("memory slot shapes are inconsistent with d_model")
        lead = keys.shape[:-2]
        keys = torch.cat([keys, slots.keys.expand(*lead, -1, -1)], dim=-2)
        values = torch.cat([values, slots.values.expand(*lead, -1, -1)], dim=-2)
        if mask is not None:
            pad = torch.zeros(*mask.shape[:-1], slots.m, dtype=torch.bool, device=mask.device)
            mask = torch.cat([mask.expand(*mask.shape[:-1], mask.shape[-1]), pad], dim=-1)
    scores = queries @ keys.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    return F.softmax(scores, dim=-1) @ values


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, memory_slots: int = 0, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.h, self.dk = n_heads, d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.m = memory_slots
        if memory_slots:
            self.mem_k = nn.Parameter(torch.randn(memory_slots, d_model) / math.sqrt(self.dk))
            self.mem_v = nn.Parameter(torch.randn(memory_slots, d_model) / math.sqrt(memory_slots))
        self.drop = nn.Dropout(dropout)

    def _split(self, x):
        B, n, _ = x.shape
        return x.view(B, n, self.h, self.dk).transpose(1, 2)

    def forward(self, xq, xkv, mask=None):
        B, n, _ = xq.shape
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        slots = None
        if self.m:
            mk = self.mem_k.view(self.m, self.h, self.dk).transpose(0, 1)
            mv = self.mem_v.view(self.m, self.h, self.dk).transpose(0, 1)
            slots = MemorySlots(mk.unsqueeze(0).expand(B, -1, -1, -1), mv.unsqueeze(0).expand(B, -1, -1, -1))
        out = mem_attention(q, k, v, slots, mask)
        out = out.transpose(1, 2).reshape(B, n, self.h * self.dk)
        return self.o(self.drop(out))


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff, dropout):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, memory_slots, dropout):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads, memory_slots, dropout)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = self.ln1(x + self.drop(self.attn(x, x)))
        return self.ln2(x + self.drop(self.ff(x)))


class MeshedCrossAttention(nn.Module):
    """Cross-attention to every encoder layer, combined with sigmoid gates.

    ``sum_j sigmoid(W_j [h; c_j] + b_j) * c_j / sqrt(L)`` with ``c_j`` the
    cross-attention of ``h`` over encoder output ``j``.
    """

    def __init__(self, d_model, n_heads, n_enc, dropout):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads, 0, dropout)
        self.gates = nn.ModuleList([nn.Linear(2 * d_model, d_model) for _ in range(n_enc)])
        self.n_enc = n_enc

    def cross(self, h, enc):
        return self.attn(h, enc)

    def forward(self, h, enc_outputs):
        if len(enc_outputs) != self.n_enc:
            raise ValueError(f"expected {self.n_enc} encoder outputs, got {len(enc_outputs)}")
        total = 0.0
        for gate, enc in zip(self.gates, enc_outputs):
            c = self.cross(h, enc)
            total = total + torch.sigmoid(gate(torch.cat([h, c], dim=-1))) * c
        return total / math.sqrt(self.n_enc)


class DecoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, n_enc, dropout):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, 0, dropout)
        self.mesh = MeshedCrossAttention(d_model, n_heads, n_enc, dropout)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.ln3 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, enc_outputs, causal_mask):
        x = self.ln1(x + self.drop(self.self_attn(x, x, causal_mask)))
        x = self.ln2(x + self.drop(self.mesh(x, enc_outputs)))
        return self.ln3(x + self.drop(self.ff(x)))


def sinusoid_table(n_pos: int, d: int) -> torch.Tensor:
    pos = torch.arange(n_pos, dtype=torch.float32)[:, None]
    i = torch.arange(d, dtype=torch.float32)[None, :]
    angle = pos / torch.pow(10000.0, (2 * (i // 2)) / d)
    table = torch.zeros(n_pos, d)
    table[:, 0::2] = torch.sin(angle[:, 0::2])
    table[:, 1::2] = torch.cos(angle[:, 1::2])
    return table


# -------------------------------------------------------------------- model

@dataclass
class CaptionerConfig:
    vocab_size: int
    d_in: int = 128
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 3
    memory_slots: int = 8
    dropout: float = 0.1
    max_len: int = 20
    cbs: bool = True
    sigma_floor: float = SIGMA_FLOOR


class MeshedCaptioner(nn.Module):
    def __init__(self, config: CaptionerConfig):
        super().__init__()
        self.config = c = config
        self.input_layer = CBS1d(c.d_in, c.d_model, cbs=c.cbs, floor=c.sigma_floor)
        self.encoder = nn.ModuleList([EncoderLayer(c.d_model, c.n_heads, c.d_ff, c.memory_slots, c.dropout)
                                      for _ in range(c.n_layers)])
        self.embed = nn.Embedding(c.vocab_size, c.d_model, padding_idx=PAD)
        self.register_buffer("pos", sinusoid_table(c.max_len + 1, c.d_model), persistent=False)
        self.decoder = nn.ModuleList([DecoderLayer(c.d_model, c.n_heads, c.d_ff, c.n_layers, c.dropout)
                                      for _ in range(c.n_layers)])
        self.out = nn.Linear(c.d_model, c.vocab_size)
        self.emb_drop = nn.Dropout(c.dropout)

    def set_sigma(self, sigma):
        self.input_layer.set_sigma(sigma)

    def encode(self, regions: torch.Tensor, sigma=None) -> list[torch.Tensor]:
        """All encoder layer outputs for ``(B, N, d_in)`` (or ``(N, d_in)``) regions."""
        if sigma is not None:
            self.set_sigma(sigma)
        if regions.dim() == 2:
            regions = regions.unsqueeze(0)
        if regions.shape[1] == 0:
            raise ValueError("empty region set")
        x = self.input_layer(regions)
        outs = []
        for layer in self.encoder:
            x = layer(x)
            outs.append(x)
        return outs

    def decode(self, tokens: torch.Tensor, enc_outputs: Sequence[torch.Tensor]) -> torch.Tensor:
        """Logits ``(B, t, V)`` for every prefix position of ``tokens`` ``(B, t)``."""
        if tokens.max() >= self.config.vocab_size or tokens.min() < 0:
            raise ValueError("token id outside the vocabulary")
        t = tokens.shape[1]
        if t > self.config.max_len:
            raise ValueError(f"prefix longer than max_len={self.config.max_len}")
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=tokens.device), diagonal=1)
        x = self.emb_drop(self.embed(tokens) + self.pos[:t])
        B = tokens.shape[0]
        encs = [e.expand(B, -1, -1) if e.shape[0] == 1 and B > 1 else e for e in enc_outputs]
        for layer in self.decoder:
            x = layer(x, encs, causal)
        return self.out(x)

    def decode_step(self, prefix, enc_outputs) -> torch.Tensor:
        """Next-token logits for prefix ``(t,)`` or ``(B, t)`` starting with BOS."""
        prefix = torch.as_tensor(prefix, dtype=torch.long)
        single = prefix.dim() == 1
        if single:
            prefix = prefix.unsqueeze(0)
        if (prefix[:, 0] != BOS).any():
            raise ValueError("prefix must start with BOS")
        logits = self.decode(prefix, enc_outputs)[:, -1]
        return logits[0] if single else logits

    def forward(self, regions, tokens, sigma=None):
        return self.decode(tokens, self.encode(regions, sigma))


# ----------------------------------------------------------------- training

def pad_captions(captions: Sequence[Sequence[int]], max_len: int | None = None):
    """Teacher-forcing inputs and targets from ``[BOS, ..., EOS]`` id lists."""
    if max_len is not None:
        captions = [c[:max_len] + ([EOS] if len(c) > max_len and c[max_len - 1] != EOS else [])
                    if len(c) > max_len else c for c in captions]
    T = max(len(c) for c in captions) - 1
    inp = torch.full((len(captions), T), PAD, dtype=torch.long)
    tgt = torch.full((len(captions), T), PAD, dtype=torch.long)
    for i, c in enumerate(captions):
        c = torch.as_tensor(c, dtype=torch.long)
        inp[i, :len(c) - 1] = c[:-1]
        tgt[i, :len(c) - 1] = c[1:]
    return inp, tgt


def caption_loss(model: MeshedCaptioner, regions: torch.Tensor, captions: Sequence[Sequence[int]],
                 epsilon: float = 0.0, sigma=None) -> torch.Tensor:
    """Mean label-smoothed CE over the non-PAD target positions."""
    inp, tgt = pad_captions(captions)
    keep = tgt != PAD
    if not keep.any():
        raise ValueError("batch contains only padding")
    logits = model(regions, inp, sigma)
    return ce_with_ls(logits[keep], tgt[keep], epsilon)


def train_step(model, optimizer, regions, captions, epsilon: float = 0.0, sigma=None) -> float:
    model.train()
    loss = caption_loss(model, regions, captions, epsilon, sigma)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite captioning loss {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


@dataclass
class CaptionTrainConfig:
    epochs: int = 50
    batch_size: int = 50
    lr: float = 5e-4
    ls_epsilon: float = 0.0
    seed: int = 0


def _seed_for(seed, *parts):
    ss = np.random.SeedSequence([int(seed)] + [int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


def fit_captioner(model: MeshedCaptioner, regions: torch.Tensor, captions: Sequence[Sequence[int]],
                  cfg: CaptionTrainConfig | None = None, sigma_schedule: SigmaSchedule | None = None,
                  *, optimizer=None, resume: dict | None = None,
                  on_epoch_end: Callable[[dict], None] | None = None, phase: int = 0):
    """Adam training over ``regions`` ``(n, N, d_in)`` and tokenized captions.

    Returns the per-epoch trace (loss, sigma). Shuffling and dropout are seeded
    per epoch, so a run resumed from an epoch checkpoint matches the
    uninterrupted one.
    """
    cfg = cfg or CaptionTrainConfig()
    if len(regions) != len(captions) or not len(captions):
        raise ValueError("need equally many (non-zero) region sets and captions")
    opt = optimizer or torch.optim.Adam(model.parameters(), lr=cfg.lr)
    start, trace = 0, []
    if resume:
        opt.load_state_dict(resume["optimizer"])
        start = int(resume["epoch"])
        trace = list(resume.get("trace", []))
    n = len(captions)
    for epoch in range(start, cfg.epochs):
        sigma = sigma_schedule(epoch) if sigma_schedule is not None else None
        model.set_sigma(sigma)
        g = torch.Generator().manual_seed(_seed_for(cfg.seed, phase, epoch, 0))
        order = torch.randperm(n, generator=g)
        torch.manual_seed(_seed_for(cfg.seed, phase, epoch, 1))
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            loss = train_step(model, opt, regions[b], [captions[j] for j in b], cfg.ls_epsilon)
            total += loss * len(b)
        trace.append({"epoch": epoch, "loss": total / n, "sigma": sigma})
        log.info("captioner epoch %d loss %.4f sigma %s", epoch, total / n, sigma)
        if on_epoch_end is not None:
            on_epoch_end({"model": model, "optimizer": opt, "epoch": epoch, "trace": trace})
    return trace


# ------------------------------------------------------------------ decoding

@dataclass
class CaptionHypothesis:
    tokens: list[int]
    logprob: float
    score: float = field(init=False)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != BOS:
            raise ValueError("hypothesis must begin with BOS")
        self.score = self.logprob / max(1, len(self.tokens) - 1)

    @property
    def complete(self) -> bool:
        return self.tokens[-1] == EOS


def _next_logprobs(model, prefixes, enc):
    logits = model.decode_step(torch.tensor(prefixes, dtype=torch.long), enc)
    logp = F.log_softmax(logits.double(), dim=-1)
    logp[:, PAD] = -math.inf
    logp[:, BOS] = -math.inf
    return logp


@torch.no_grad()
def beam_search(model: MeshedCaptioner, regions: torch.Tensor, beam: int = 5, max_len: int | None = None,
                return_beam: bool = False):
    """Length-normalized beam search for one image.

    Finished hypotheses occupy beam slots like live ones. At the final length
    every expansion of the surviving beams is scored, and the best
    length-normalized hypothesis (complete, or partial at ``max_len``) wins.
    """
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    max_len = max_len or model.config.max_len
    if max_len < 2:
        raise ValueError("max_len must allow at least one generated token")
    was_training = model.training
    model.eval()
    enc = model.encode(regions if regions.dim() == 3 else regions.unsqueeze(0))
    live = [([BOS], 0.0)]
    finished: list[CaptionHypothesis] = []
    for t in range(1, max_len):
        logp = _next_logprobs(model, [p for p, _ in live], enc)
        cands = []
        for li, (prefix, score) in enumerate(live):
            row = logp[li]
            for w in range(row.shape[0]):
                if math.isfinite(row[w].item()):
                    cands.append((prefix + [w], score + row[w].item()))
        if t == max_len - 1:
            finished.extend(CaptionHypothesis(p, s) for p, s in cands)
            break
        # stable sort keeps (beam index, token id) order among ties
        cands.sort(key=lambda c: -c[1])
        live = []
        for prefix, score in cands[:beam]:
            if prefix[-1] == EOS:
                finished.append(CaptionHypothesis(prefix, score))
            else:
                live.append((prefix, score))
        if not live:
            break
    model.train(was_training)
    ranked = sorted(finished, key=lambda h: -h.score)
    return (ranked[0], ranked) if return_beam else ranked[0]


@torch.no_grad()
def greedy_decode(model: MeshedCaptioner, regions: torch.Tensor, max_len: int | None = None) -> list[int]:
    max_len = max_len or model.config.max_len
    was_training = model.training
    model.eval()
    enc = model.encode(regions if regions.dim() == 3 else regions.unsqueeze(0))
    tokens = [BOS]
    while len(tokens) < max_len:
        logp = _next_logprobs(model, [tokens], enc)[0]
        w = int(torch.argmax(logp))
        tokens.append(w)
        if w == EOS:
            break
    model.train(was_training)
    return tokens


def generate(model, regions: torch.Tensor, vocab: Vocab, beam: int = 5, max_len: int | None = None):
    """Decoded token strings for a stack of region sets."""
    return [vocab.decode(beam_search(model, r, beam, max_len).tokens) for r in regions]
