"""A small from-scratch encoder-decoder used for end-to-end experiments.

Everything the experiments need to inspect is exposed: attention modules
return per-head weights, the decoder supports incremental (cached)
stepping for batched constrained generation, and symbol embeddings can be
warm-started from the text embeddings of the tokens that would render
them. CPU-only and deterministic per seed.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import decoding
from .codec import (
    OrderKind,
    SymbolSequence,
    SymbolVocab,
    decode_symbolic,
    encode_lexical,
    encode_symbolic,
    parse_lexical,
)
from .corpus import CorpusSplit
from .metrics import micro_f1
from .negsample import make_plan
from .schema import (
    Document,
    RelationInstance,
    RelationMatrix,
    RelationTypeSet,
    all_cells,
    nonzero_cells,
)

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    width: int = 128
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_width: int = 256
    max_src_len: int = 512
    max_tgt_len: int = 256
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        for name in ("width", "heads", "encoder_layers", "decoder_layers", "ffn_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")


@dataclass(frozen=True)
class Tokenizer:
    """Maps text tokens to IDs above the reserved symbol space.

    IDs below `symbol_total` belong to the symbol vocabulary (EOS
    included); text IDs follow, with BOS/PAD/UNK at the first three text
    positions.
    """

    symbol_total: int
    tokens: tuple[str, ...]

    SPECIALS = ("<bos>", "<pad>", "<unk>")

    def __post_init__(self) -> None:
        if self.tokens[: len(self.SPECIALS)] != self.SPECIALS:
            raise ValueError("tokenizer must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate text tokens")

    @classmethod
    def from_documents(
        cls,
        docs: Iterable[Document],
        relations: RelationTypeSet,
        symbol_total: int,
    ) -> "Tokenizer":
        seen = set()
        for doc in docs:
            seen.update(doc.tokens())
        seen.update(relations.names)
        seen.update(str(d) for d in range(10))
        seen.update(("|", ";"))
        return cls(
            symbol_total=symbol_total,
            tokens=cls.SPECIALS + tuple(sorted(seen)),
        )

    @property
    def bos_id(self) -> int:
        return self.symbol_total

    @property
    def pad_id(self) -> int:
        return self.symbol_total + 1

    @property
    def unk_id(self) -> int:
        return self.symbol_total + 2

    @property
    def vocab_size(self) -> int:
        return self.symbol_total + len(self.tokens)

    def token_id(self, token: str) -> int:
        try:
            return self.symbol_total + self.tokens.index(token)
        except ValueError:
            return self.unk_id

    def encode_text(self, tokens: Sequence[str]) -> list[int]:
        index = self._index()
        return [index.get(t, self.unk_id) for t in tokens]

    def _index(self) -> dict[str, int]:
        if not hasattr(self, "_cache"):
            object.__setattr__(
                self,
                "_cache",
                {t: self.symbol_total + i for i, t in enumerate(self.tokens)},
            )
        return self._cache  # type: ignore[attr-defined]

    def text_of(self, idx: int) -> str:
        return self.tokens[idx - self.symbol_total]

    def text_ids(self) -> list[int]:
        """Generatable text IDs: every text token except the specials."""
        return list(range(self.symbol_total + 3, self.vocab_size))


class MultiHeadAttention(nn.Module):
    """Plain scaled dot-product attention with separated K/V projection so
    callers can cache."""

    def __init__(self, width: int, heads: int, dropout: float) -> None:
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)
        self.drop = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def project_kv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._split(self.k_proj(x)), self._split(self.v_proj(x))

    def attend(
        self,
        q_in: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        bias: torch.Tensor | None = None,
        need_weights: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        q = self._split(self.q_proj(q_in))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias
        weights = torch.softmax(scores, dim=-1)
        weights = self.drop(weights)
        out = (weights @ v).transpose(1, 2).reshape(
            q_in.shape[0], q_in.shape[1], self.heads * self.head_dim
        )
        return self.out_proj(out), (weights if need_weights else None)

    def forward(
        self,
        q_in: torch.Tensor,
        kv_in: torch.Tensor,
        bias: torch.Tensor | None = None,
        need_weights: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        k, v = self.project_kv(kv_in)
        return self.attend(q_in, k, v, bias, need_weights)


class FeedForward(nn.Module):
    def __init__(self, width: int, ffn_width: int, dropout: float) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(width, ffn_width),
            nn.GELU(),
            nn.Linear(ffn_width, width),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.width)
        self.attn = MultiHeadAttention(cfg.width, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.width)
        self.ffn = FeedForward(cfg.width, cfg.ffn_width, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
        h = self.ln1(x)
        a, _ = self.attn(h, h, bias)
        x = x + self.drop(a)
        return x + self.ffn(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.width)
        self.self_attn = MultiHeadAttention(cfg.width, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.width)
        self.cross_attn = MultiHeadAttention(cfg.width, cfg.heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.width)
        self.ffn = FeedForward(cfg.width, cfg.ffn_width, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        self_bias: torch.Tensor | None,
        mem_bias: torch.Tensor | None,
        need_weights: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        h = self.ln1(x)
        a, weights = self.self_attn(h, h, self_bias, need_weights)
        x = x + self.drop(a)
        c, _ = self.cross_attn(self.ln2(x), memory, mem_bias)
        x = x + self.drop(c)
        return x + self.ffn(self.ln3(x)), weights


class Seq2SeqModel(nn.Module):
    """Encoder-decoder with a single tied embedding/output matrix covering
    symbol IDs and text IDs alike."""

    def __init__(self, config: ModelConfig, vocab_size: int) -> None:
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        self.tok_emb = nn.Embedding(vocab_size, config.width)
        self.enc_pos = nn.Embedding(config.max_src_len, config.width)
        self.dec_pos = nn.Embedding(config.max_tgt_len, config.width)
        self.enc_layers = nn.ModuleList(
            EncoderLayer(config) for _ in range(config.encoder_layers)
        )
        self.dec_layers = nn.ModuleList(
            DecoderLayer(config) for _ in range(config.decoder_layers)
        )
        self.ln_enc = nn.LayerNorm(config.width)
        self.ln_dec = nn.LayerNorm(config.width)
        self.drop = nn.Dropout(config.dropout)
        self.scale = math.sqrt(config.width)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.enc_pos.weight, std=0.02)
        nn.init.normal_(self.dec_pos.weight, std=0.02)

    def embed_src(self, src: torch.Tensor) -> torch.Tensor:
        t = src.shape[1]
        if t > self.config.max_src_len:
            raise ValueError(f"source length {t} exceeds {self.config.max_src_len}")
        pos = torch.arange(t, device=src.device)
        return self.drop(self.tok_emb(src) * self.scale + self.enc_pos(pos))

    def encode(self, src: torch.Tensor, src_bias: torch.Tensor | None) -> torch.Tensor:
        x = self.embed_src(src)
        for layer in self.enc_layers:
            x = layer(x, src_bias)
        return self.ln_enc(x)

    def decode(
        self,
        memory: torch.Tensor,
        dec_in: torch.Tensor,
        mem_bias: torch.Tensor | None,
        need_weights: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        t = dec_in.shape[1]
        if t > self.config.max_tgt_len:
            raise ValueError(f"target length {t} exceeds {self.config.max_tgt_len}")
        pos = torch.arange(t, device=dec_in.device)
        x = self.drop(self.tok_emb(dec_in) * self.scale + self.dec_pos(pos))
        causal = torch.full((t, t), NEG_INF, device=dec_in.device).triu(1)
        causal = causal.view(1, 1, t, t)
        weights = None
        for layer in self.dec_layers:
            x, w = layer(x, memory, causal, mem_bias, need_weights)
            if w is not None:
                weights = w
        x = self.ln_dec(x)
        return self.logits(x), weights

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.tok_emb.weight.T

    def forward(
        self,
        src: torch.Tensor,
        dec_in: torch.Tensor,
        src_pad: torch.Tensor | None = None,
        need_weights: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        bias = pad_bias(src_pad) if src_pad is not None else None
        memory = self.encode(src, bias)
        return self.decode(memory, dec_in, bias, need_weights)


def pad_bias(pad_mask: torch.Tensor) -> torch.Tensor:
    """(B, T) bool, True where padded -> additive bias (B, 1, 1, T)."""
    return pad_mask.view(pad_mask.shape[0], 1, 1, -1).float() * NEG_INF


def build_model(config: ModelConfig, vocab_size: int, seed: int) -> Seq2SeqModel:
    torch.manual_seed(seed)
    return Seq2SeqModel(config, vocab_size)


class IncrementalDecoder:
    """Stepwise decoding with cached keys/values; numerically matches the
    full decoder forward in eval mode."""

    def __init__(
        self,
        model: Seq2SeqModel,
        memory: torch.Tensor,
        mem_bias: torch.Tensor | None,
    ) -> None:
        self.model = model
        self.memory = memory
        self.mem_bias = mem_bias
        self.t = 0
        self.cross_kv = [
            layer.cross_attn.project_kv(memory) for layer in model.dec_layers
        ]
        self.self_k: list[torch.Tensor | None] = [None] * len(model.dec_layers)
        self.self_v: list[torch.Tensor | None] = [None] * len(model.dec_layers)

    @torch.no_grad()
    def step(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens: (B,) last emitted (or start) token. Returns (B, V)."""
        m = self.model
        if self.t >= m.config.max_tgt_len:
            raise ValueError("decoder position exceeds max_tgt_len")
        pos = torch.tensor([self.t], device=tokens.device)
        x = m.tok_emb(tokens).unsqueeze(1) * m.scale + m.dec_pos(pos)
        for i, layer in enumerate(m.dec_layers):
            h = layer.ln1(x)
            k_new, v_new = layer.self_attn.project_kv(h)
            if self.self_k[i] is None:
                self.self_k[i], self.self_v[i] = k_new, v_new
            else:
                self.self_k[i] = torch.cat([self.self_k[i], k_new], dim=2)
                self.self_v[i] = torch.cat([self.self_v[i], v_new], dim=2)
            a, _ = layer.self_attn.attend(h, self.self_k[i], self.self_v[i])
            x = x + a
            ck, cv = self.cross_kv[i]
            c, _ = layer.cross_attn.attend(layer.ln2(x), ck, cv, self.mem_bias)
            x = x + c
            x = x + layer.ffn(layer.ln3(x))
        self.t += 1
        return m.logits(m.ln_dec(x)).squeeze(1)


# ---------------------------------------------------------------------------
# Warm-start initialization of symbol embeddings.


def init_symbol_embeddings(
    vocab: SymbolVocab,
    relations: RelationTypeSet,
    base_embeddings: Mapping[str, np.ndarray],
    width: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[str]]:
    """Build an embedding table for the reserved symbol IDs.

    Each entity symbol is the mean of the base embeddings of the digit
    tokens spelling its ID in decimal; each relation symbol is the mean of
    its name's word embeddings. Symbols whose base tokens are missing fall
    back to seeded random rows and are reported back to the caller.
    """
    table = rng.normal(scale=0.02, size=(vocab.total_size, width)).astype(np.float32)
    missing: list[str] = []

    def mean_of(parts: list[str], target: str) -> np.ndarray | None:
        rows = []
        for p in parts:
            if p not in base_embeddings:
                missing.append(f"{target}: no base embedding for {p!r}")
                return None
            rows.append(np.asarray(base_embeddings[p], dtype=np.float32))
        return np.mean(rows, axis=0)

    slots = range(1) if vocab.arity == 2 else range(4)
    done = set()
    for slot in slots:
        start, size = vocab.entity_ranges[slot if vocab.arity == 4 else 0]
        for k in range(size):
            sid = start + k
            if sid in done:
                continue
            done.add(sid)
            row = mean_of(list(str(sid)), f"entity symbol {sid}")
            if row is not None:
                table[sid] = row
    for r in range(vocab.relation_count):
        row = mean_of(relations.name(r).split(), f"relation symbol {r}")
        if row is not None:
            table[vocab.relation_id(r)] = row
    return table, missing


def apply_warm_start(
    model: Seq2SeqModel,
    tokenizer: Tokenizer,
    vocab: SymbolVocab,
    relations: RelationTypeSet,
    seed: int = 0,
) -> list[str]:
    """Overwrite the model's symbol rows from its own text-token rows."""
    weight = model.tok_emb.weight.detach().cpu().numpy()
    base = {
        tok: weight[tokenizer.symbol_total + i]
        for i, tok in enumerate(tokenizer.tokens)
        if tok not in Tokenizer.SPECIALS
    }
    table, missing = init_symbol_embeddings(
        vocab, relations, base, model.config.width, np.random.default_rng(seed)
    )
    with torch.no_grad():
        model.tok_emb.weight[: vocab.total_size] = torch.from_numpy(table)
    return missing


# ---------------------------------------------------------------------------
# Losses.


def sequence_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Summed cross-entropy over every step of one target, EOS included."""
    if logits.shape[0] != targets.shape[0]:
        raise ValueError("logits and targets disagree on length")
    return F.cross_entropy(logits, targets, reduction="sum")


@dataclass(frozen=True)
class MatrixLossResult:
    total: torch.Tensor
    positive_term: torch.Tensor
    negative_term: torch.Tensor


def matrix_loss(
    cell_logits: torch.Tensor,
    matrix: RelationMatrix,
    cells: Sequence[tuple[int, ...]] | None = None,
) -> MatrixLossResult:
    """Classification loss over every off-diagonal cell.

    `cell_logits` holds one (C+1)-way logit row per cell (the extra class
    is the empty cell); rows align with `cells`, defaulting to row-column
    order over the whole matrix. Multi-label cells contribute one term per
    gold label. The total is reduced in one pass and the positive/negative
    terms separately, so total == positive + negative is a checkable
    identity rather than a definition.
    """
    if cells is None:
        cells = list(all_cells(matrix))
    if len(cells) != cell_logits.shape[0]:
        raise ValueError(
            f"{len(cells)} cells but {cell_logits.shape[0]} logit rows"
        )
    empty_class = cell_logits.shape[1] - 1
    rows: list[int] = []
    classes: list[int] = []
    for row, cell in enumerate(cells):
        labels = matrix.relations_at(tuple(cell))
        if labels:
            for r in sorted(labels):
                if r >= empty_class:
                    raise ValueError(
                        f"cell {cell}: label {r} outside the {empty_class} types"
                    )
                rows.append(row)
                classes.append(r)
        else:
            rows.append(row)
            classes.append(empty_class)
    cls = torch.tensor(classes, dtype=torch.long, device=cell_logits.device)
    terms = F.cross_entropy(cell_logits[rows], cls, reduction="none")
    pos_mask = cls != empty_class
    return MatrixLossResult(
        total=terms.sum(),
        positive_term=terms[pos_mask].sum(),
        negative_term=terms[~pos_mask].sum(),
    )


class CellScorer(nn.Module):
    """Per-cell classification head over pooled entity representations;
    the matrix-loss path through the encoder."""

    def __init__(self, width: int, relation_count: int, arity: int = 2) -> None:
        super().__init__()
        self.arity = arity
        self.hidden = nn.Linear(arity * width, width)
        self.out = nn.Linear(width, relation_count + 1)

    def forward(
        self, entity_reprs: torch.Tensor, cells: Sequence[tuple[int, ...]]
    ) -> torch.Tensor:
        rows = torch.stack(
            [torch.cat([entity_reprs[e] for e in cell]) for cell in cells]
        )
        return self.out(F.gelu(self.hidden(rows)))


def pool_entities(
    memory: torch.Tensor, mention_positions: Sequence[Sequence[int]]
) -> torch.Tensor:
    """memory: (T, width); mention_positions[i] lists the flat token
    positions of entity i's mentions. Mean-pools each entity."""
    return torch.stack(
        [memory[list(pos)].mean(dim=0) for pos in mention_positions]
    )


def mention_token_positions(doc: Document) -> list[list[int]]:
    offsets = []
    total = 0
    for sent in doc.sentences:
        offsets.append(total)
        total += len(sent)
    out = []
    for ent in doc.entities:
        positions = []
        for m in ent.mentions:
            base = offsets[m.sentence_id]
            positions.extend(range(base + m.start, base + m.end))
        out.append(positions)
    return out


# ---------------------------------------------------------------------------
# Attention probing.


@dataclass(frozen=True)
class AttentionTrace:
    """Last-decoder-layer self-attention, per head: (heads, T, T); row t is
    the distribution over key positions 0..t (causal)."""

    weights: np.ndarray
    arity: int

    def __post_init__(self) -> None:
        w = self.weights
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ValueError(f"weights shape {w.shape} is not (heads, T, T)")
        sums = w.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-5):
            raise ValueError("attention rows must sum to 1")

    def summed(self) -> np.ndarray:
        return self.weights.sum(axis=0)


def pointers_from_trace(trace: AttentionTrace) -> list[tuple[int, int]]:
    """For each group after the first: which earlier group got the most
    attention mass at the step that predicted this group's relation.

    The trace covers decoder input [start, y_0 .. y_{T-2}]; key position 0
    (the start token) is excluded from the mass. Fewer than two complete
    groups yields an empty list.
    """
    summed = trace.summed()
    k = trace.arity
    t = summed.shape[0]
    n_groups = (t - 1) // (k + 1)
    out: list[tuple[int, int]] = []
    for g in range(1, n_groups):
        rel_step = g * (k + 1) + k  # output position predicting group g's relation
        row = summed[rel_step]
        masses = []
        for prev in range(g):
            lo = prev * (k + 1) + 1  # +1: key positions are output positions shifted past start
            masses.append(float(row[lo : lo + k + 1].sum()))
        out.append((g, int(np.argmax(masses))))
    return out


def attention_pointers(
    model: Seq2SeqModel,
    src_ids: Sequence[int],
    tokenizer: Tokenizer,
    sequence: SymbolSequence,
) -> list[tuple[int, int]]:
    """Teacher-force a decoded sequence back through the model and read
    off group-level attention pointers."""
    k = sequence.arity
    if (len(sequence.ids) - (1 if sequence.ids and sequence.ids[-1] == 0 else 0)) // (
        k + 1
    ) < 2:
        return []
    model.eval()
    with torch.no_grad():
        src = torch.tensor([list(src_ids)], dtype=torch.long)
        dec_in = torch.tensor(
            [[tokenizer.bos_id] + list(sequence.ids[:-1])], dtype=torch.long
        )
        _, weights = model(src, dec_in, need_weights=True)
    trace = AttentionTrace(
        weights=weights[0].cpu().numpy().astype(np.float64), arity=k
    )
    return pointers_from_trace(trace)


# ---------------------------------------------------------------------------
# Target construction and batched evaluation.


@dataclass(frozen=True)
class RunSpec:
    """Codec and sampling choices for one training run."""

    target_format: str = "symbolic"  # symbolic | lexical
    order_kind: str = "row_column"  # row_column | annotation | random
    order_seed: int = 0
    neg_strategy: str = "none"
    neg_fraction: float = 0.10
    neg_window: int = 1
    warm_start: bool = False
    row_targets: bool = False
    max_groups: int = 40
    lexical_max_len: int = 160

    def __post_init__(self) -> None:
        if self.target_format not in ("symbolic", "lexical"):
            raise ValueError(f"unknown target format {self.target_format!r}")
        if self.target_format == "lexical" and self.neg_strategy != "none":
            raise ValueError("negative sampling applies to symbolic targets only")
        if self.target_format == "lexical" and self.row_targets:
            raise ValueError("row-factorized targets require the symbolic format")

    def order(self) -> OrderKind:
        if self.order_kind == "random":
            return OrderKind.random(self.order_seed)
        return OrderKind(self.order_kind)


def doc_source_ids(doc: Document, tokenizer: Tokenizer, max_len: int) -> list[int]:
    ids = tokenizer.encode_text(list(doc.tokens()))
    return ids[:max_len]


def make_targets(
    split: CorpusSplit,
    vocab: SymbolVocab,
    tokenizer: Tokenizer,
    run: RunSpec,
    seed: int,
    epoch: int,
) -> list[tuple[int, list[int], list[int]]]:
    """(doc_index, dec_in, dec_out) triples for one epoch.

    Dynamic sampling redraws per epoch; the other strategies are pure
    functions of the document, so every epoch sees the same target.
    """
    out = []
    for di, doc in enumerate(split.documents):
        matrix = split.gold[doc.doc_id]
        if run.target_format == "lexical":
            text = encode_lexical(doc, matrix, split.relations, run.order())
            y = tokenizer.encode_text(text.split()) + [vocab.eos_id]
            out.append((di, [tokenizer.bos_id] + y[:-1], y))
            continue
        plan = None
        if run.neg_strategy != "none":
            plan = make_plan(
                matrix,
                run.neg_strategy,
                fraction=run.neg_fraction,
                window=run.neg_window,
                seed=seed if run.neg_strategy == "dynamic" else _stable_seed(seed, di),
                epoch=epoch,
                doc_id=doc.doc_id,
            )
        seq = encode_symbolic(matrix, vocab, run.order(), plan, doc.doc_id)
        y = list(seq.ids)
        if run.row_targets:
            slices = _row_slices(seq, vocab)
            # Rows without groups still contribute a (head -> EOS) example,
            # the condition they are decoded under at evaluation time.
            for row in range(matrix.slot_sizes[0]):
                row_y = slices.get(row, [vocab.eos_id])
                head = vocab.entity_id(0, row)
                out.append((di, [head] + row_y[:-1], row_y))
        else:
            out.append((di, [tokenizer.bos_id] + y[:-1], y))
    return out


def _stable_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index) % (2**31 - 1)


def _row_slices(seq: SymbolSequence, vocab: SymbolVocab) -> dict[int, list[int]]:
    k = seq.arity
    rows: dict[int, list[int]] = {}
    body = seq.ids[:-1]
    for g in range(len(body) // (k + 1)):
        group = body[g * (k + 1) : (g + 1) * (k + 1)]
        row = vocab.entity_index(0, group[0])
        rows.setdefault(row, []).extend(group)
    return {r: ids + [vocab.eos_id] for r, ids in rows.items()}


@torch.no_grad()
def batched_symbolic_greedy(
    model: Seq2SeqModel,
    tokenizer: Tokenizer,
    vocab: SymbolVocab,
    src_batch: list[list[int]],
    slot_sizes_list: list[tuple[int, ...]],
    max_len: int | None = None,
    strict: bool = False,
    row_heads: list[int | None] | None = None,
) -> list[SymbolSequence]:
    """Constrained greedy decoding for a whole batch of documents using
    the incremental decoder. Grammar masks come from the same state
    machine as the reference decoder."""
    model.eval()
    if max_len is None:
        max_len = decoding.default_max_len(vocab.arity)
    # the decoder consumes one position for the start token
    max_len = min(max_len, model.config.max_tgt_len - 1)
    b = len(src_batch)
    src, pad_mask = pad_batch(src_batch, tokenizer.pad_id)
    bias = pad_bias(pad_mask)
    memory = model.encode(src, bias)
    dec = IncrementalDecoder(model, memory, bias)
    if row_heads is None:
        row_heads = [None] * b
    states = [
        decoding.initial_state(vocab, ss, strict=strict, row_head=rh)
        for ss, rh in zip(slot_sizes_list, row_heads)
    ]
    emitted: list[list[int]] = [[] for _ in range(b)]
    # Row decodes start from the row-head symbol instead of BOS.
    tokens = torch.tensor(
        [
            tokenizer.bos_id if rh is None else vocab.entity_id(0, rh)
            for rh in row_heads
        ],
        dtype=torch.long,
    )
    for _ in range(max_len):
        if all(s.finished for s in states):
            break
        logits = dec.step(tokens).cpu().numpy()
        next_tokens = []
        for i, state in enumerate(states):
            if state.finished:
                next_tokens.append(tokenizer.pad_id)
                continue
            allowed = decoding.allowed_tokens(state)
            tok = int(allowed[np.argmax(logits[i][allowed])])
            states[i] = decoding.step(state, tok)
            emitted[i].append(tok)
            next_tokens.append(tok)
        tokens = torch.tensor(next_tokens, dtype=torch.long)
    out = []
    for i, state in enumerate(states):
        ids = emitted[i]
        if not state.finished:  # ran out of budget: cut to a group boundary
            ids = ids[: (len(ids) // (vocab.arity + 1)) * (vocab.arity + 1)]
        out.append(SymbolSequence(ids=tuple(ids), arity=vocab.arity))
    return out


@torch.no_grad()
def batched_lexical_greedy(
    model: Seq2SeqModel,
    tokenizer: Tokenizer,
    src_batch: list[list[int]],
    max_len: int,
    eos_id: int,
) -> list[list[int]]:
    """Unconstrained (text-vocabulary) greedy decoding for the lexical
    baseline."""
    model.eval()
    max_len = min(max_len, model.config.max_tgt_len - 1)
    b = len(src_batch)
    src, pad_mask = pad_batch(src_batch, tokenizer.pad_id)
    bias = pad_bias(pad_mask)
    memory = model.encode(src, bias)
    dec = IncrementalDecoder(model, memory, bias)
    allowed = np.array([eos_id] + tokenizer.text_ids(), dtype=np.int64)
    done = [False] * b
    emitted: list[list[int]] = [[] for _ in range(b)]
    tokens = torch.full((b,), tokenizer.bos_id, dtype=torch.long)
    for _ in range(max_len):
        if all(done):
            break
        logits = dec.step(tokens).cpu().numpy()
        next_tokens = []
        for i in range(b):
            if done[i]:
                next_tokens.append(tokenizer.pad_id)
                continue
            tok = int(allowed[np.argmax(logits[i][allowed])])
            if tok == eos_id:
                done[i] = True
            else:
                emitted[i].append(tok)
            next_tokens.append(tok)
        tokens = torch.tensor(next_tokens, dtype=torch.long)
    return emitted


def pad_batch(
    seqs: list[list[int]], pad_id: int
) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    mask = torch.ones((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = False
    return ids, mask


class ModelScoreOracle:
    """Adapts the model to the generic score-oracle protocol for one
    document (used by the reference decoders and the CLI)."""

    def __init__(
        self,
        model: Seq2SeqModel,
        tokenizer: Tokenizer,
        src_ids: Sequence[int],
        row_mode: bool = False,
    ) -> None:
        self.model = model
        self.tokenizer = tokenizer
        self.row_mode = row_mode
        model.eval()
        with torch.no_grad():
            self.memory = model.encode(
                torch.tensor([list(src_ids)], dtype=torch.long), None
            )

    def scores(self, prefix: tuple[int, ...]) -> np.ndarray:
        if self.row_mode:
            dec = list(prefix)  # prefix[0] is the forced row head
        else:
            dec = [self.tokenizer.bos_id] + list(prefix)
        with torch.no_grad():
            logits, _ = self.model.decode(
                self.memory, torch.tensor([dec], dtype=torch.long), None
            )
        return logits[0, -1].cpu().numpy()


# ---------------------------------------------------------------------------
# Training.


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 24
    lr: float = 3e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    stop_at_dev_f1: float | None = None
    # Loss weight on empty-cell target tokens. Negative terms outnumber
    # positives under band sampling; < 1 rebalances without changing the
    # targets themselves.
    no_rel_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError(f"learning rate {self.lr} must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError(f"warmup fraction {self.warmup_frac} outside [0, 1)")
        if self.no_rel_weight <= 0:
            raise ValueError(f"no_rel_weight {self.no_rel_weight} must be positive")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    dev_precision: float
    dev_recall: float
    dev_f1: float
    seconds: float
    positive_terms: int
    negative_terms: int


@dataclass
class TrainResult:
    model: Seq2SeqModel
    tokenizer: Tokenizer
    vocab: SymbolVocab
    run: RunSpec
    history: list[EpochStats]
    warm_start_missing: list[str] = field(default_factory=list)

    @property
    def final_dev_f1(self) -> float:
        return self.history[-1].dev_f1 if self.history else 0.0

    def best_dev_f1(self) -> float:
        return max((h.dev_f1 for h in self.history), default=0.0)


def gold_instances(split: CorpusSplit) -> dict[str, set[RelationInstance]]:
    return {
        doc.doc_id: set(nonzero_cells(split.gold[doc.doc_id]))
        for doc in split.documents
    }


def predict_split(
    model: Seq2SeqModel,
    tokenizer: Tokenizer,
    vocab: SymbolVocab,
    split: CorpusSplit,
    run: RunSpec,
    max_len: int | None = None,
    batch_size: int = 128,
) -> dict[str, set[RelationInstance]]:
    """Greedy predictions for every document of a split.

    Row-target runs decode each row independently (the trained condition)
    and merge; rows of all documents share one batch stream.
    """
    preds: dict[str, set[RelationInstance]] = {}
    docs = split.documents
    if run.target_format == "symbolic" and run.row_targets:
        items = [(d, r) for d in docs for r in range(d.entity_count)]
        for d in docs:
            preds[d.doc_id] = set()
        for lo in range(0, len(items), batch_size):
            chunk = items[lo : lo + batch_size]
            srcs = [
                doc_source_ids(d, tokenizer, model.config.max_src_len)
                for d, _ in chunk
            ]
            sizes = [(d.entity_count,) * vocab.arity for d, _ in chunk]
            heads: list[int | None] = [r for _, r in chunk]
            seqs = batched_symbolic_greedy(
                model, tokenizer, vocab, srcs, sizes,
                max_len=max_len, row_heads=heads,
            )
            for (doc, _), seq in zip(chunk, seqs):
                parse = decode_symbolic(
                    seq, vocab, slot_sizes=(doc.entity_count,) * vocab.arity
                )
                preds[doc.doc_id].update(
                    RelationInstance(entities=c, relation=r)
                    for c, rels in parse.matrix.cells.items()
                    for r in rels
                )
        return preds
    for lo in range(0, len(docs), batch_size):
        chunk = docs[lo : lo + batch_size]
        srcs = [
            doc_source_ids(d, tokenizer, model.config.max_src_len) for d in chunk
        ]
        if run.target_format == "symbolic":
            sizes = [
                (d.entity_count,) * vocab.arity for d in chunk
            ]
            cap = max_len or min(
                decoding.default_max_len(vocab.arity, run.max_groups),
                model.config.max_tgt_len - 1,
            )
            seqs = batched_symbolic_greedy(
                model, tokenizer, vocab, srcs, sizes, max_len=cap
            )
            for doc, seq in zip(chunk, seqs):
                parse = decode_symbolic(
                    seq, vocab, slot_sizes=(doc.entity_count,) * vocab.arity
                )
                preds[doc.doc_id] = {
                    RelationInstance(entities=c, relation=r)
                    for c, rels in parse.matrix.cells.items()
                    for r in rels
                }
        else:
            cap = min(run.lexical_max_len, model.config.max_tgt_len - 1)
            outs = batched_lexical_greedy(
                model, tokenizer, srcs, cap, vocab.eos_id
            )
            for doc, ids in zip(chunk, outs):
                text = " ".join(tokenizer.text_of(i) for i in ids)
                parse = parse_lexical(text, doc, split.relations)
                preds[doc.doc_id] = {
                    RelationInstance(entities=c, relation=r)
                    for c, rels in parse.matrix.cells.items()
                    for r in rels
                }
    return preds


def train(
    train_split: CorpusSplit,
    dev_split: CorpusSplit,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    run: RunSpec,
) -> TrainResult:
    """Teacher-forced training with per-epoch dev evaluation.

    Dynamic sampling rebuilds targets every epoch from (seed, epoch,
    doc_id); everything else is deterministic in the seed, so reruns
    reproduce the same history.
    """
    relations = train_split.relations
    vocab = SymbolVocab.default(relations.count)
    tokenizer = Tokenizer.from_documents(
        list(train_split.documents) + list(dev_split.documents),
        relations,
        vocab.total_size,
    )
    model = build_model(model_cfg, tokenizer.vocab_size, train_cfg.seed)
    missing: list[str] = []
    if run.warm_start:
        missing = apply_warm_start(
            model, tokenizer, vocab, relations, seed=train_cfg.seed
        )

    srcs = [
        doc_source_ids(d, tokenizer, model_cfg.max_src_len)
        for d in train_split.documents
    ]
    dev_gold = gold_instances(dev_split)

    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim < 2 else decay).append(p)
    optimizer = torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": train_cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=train_cfg.lr,
    )
    # Target count per epoch is constant (row mode multiplies items), so
    # size the schedule from a concrete epoch's targets.
    first_targets = make_targets(train_split, vocab, tokenizer, run, train_cfg.seed, 0)
    steps_per_epoch = math.ceil(len(first_targets) / train_cfg.batch_size)
    total_steps = max(1, steps_per_epoch * train_cfg.epochs)
    warmup = max(1, int(train_cfg.warmup_frac * total_steps))

    def lr_factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_factor)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([train_cfg.seed, 0xA5])
    )

    history: list[EpochStats] = []
    step_count = 0
    for epoch in range(train_cfg.epochs):
        t0 = time.monotonic()
        targets = first_targets if epoch == 0 else make_targets(
            train_split, vocab, tokenizer, run, train_cfg.seed, epoch
        )
        pos_terms = neg_terms = 0
        for di, _, y in targets:
            if run.target_format == "symbolic":
                neg = sum(1 for t in y if t == vocab.no_relation_id)
                pos_terms += sum(1 for t in y if vocab.is_relation_symbol(t)) - neg
                neg_terms += neg
            else:
                doc = train_split.documents[di]
                pos_terms += train_split.gold[doc.doc_id].instance_count()

        model.train()
        order = shuffle_rng.permutation(len(targets))
        total_loss = 0.0
        total_tokens = 0
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [targets[i] for i in order[lo : lo + train_cfg.batch_size]]
            src_ids, _ = pad_batch([srcs[di] for di, _, _ in batch], tokenizer.pad_id)
            src_pad = src_ids.eq(tokenizer.pad_id)
            dec_in, _ = pad_batch([x for _, x, _ in batch], tokenizer.pad_id)
            dec_out, out_mask = pad_batch([y for _, _, y in batch], tokenizer.pad_id)
            logits, _ = model(src_ids, dec_in, src_pad)
            flat = logits.view(-1, logits.shape[-1])
            loss_sum = F.cross_entropy(
                flat, dec_out.view(-1), reduction="none"
            )
            keep = (~out_mask).view(-1).float()
            if run.target_format == "symbolic" and train_cfg.no_rel_weight != 1.0:
                keep = torch.where(
                    dec_out.view(-1).eq(vocab.no_relation_id),
                    keep * train_cfg.no_rel_weight,
                    keep,
                )
            n_tok = keep.sum()
            loss = (loss_sum * keep).sum() / n_tok
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {step_count} "
                    f"(lr={scheduler.get_last_lr()[0]:.2e}); aborting"
                )
            optimizer.zero_grad()
            loss.backward()
            if train_cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.clip_norm)
            optimizer.step()
            scheduler.step()
            step_count += 1
            total_loss += float(loss.detach()) * float(n_tok)
            total_tokens += int(n_tok)

        preds = predict_split(model, tokenizer, vocab, dev_split, run)
        report = micro_f1(preds, dev_gold)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=total_loss / max(total_tokens, 1),
                dev_precision=report.precision,
                dev_recall=report.recall,
                dev_f1=report.f1,
                seconds=time.monotonic() - t0,
                positive_terms=int(pos_terms),
                negative_terms=int(neg_terms),
            )
        )
        if (
            train_cfg.stop_at_dev_f1 is not None
            and report.f1 >= train_cfg.stop_at_dev_f1
        ):
            break
    return TrainResult(
        model=model,
        tokenizer=tokenizer,
        vocab=vocab,
        run=run,
        history=history,
        warm_start_missing=missing,
    )


# ---------------------------------------------------------------------------
# Checkpoints: a self-describing, byte-deterministic container.

_MAGIC = b"RGCKPT1\n"


def save_checkpoint(
    path: str | Path,
    model: Seq2SeqModel,
    tokenizer: Tokenizer,
    vocab: SymbolVocab,
    relations: RelationTypeSet,
) -> None:
    state = model.state_dict()
    names = sorted(state)
    header = {
        "format_version": 1,
        "model": asdict(model.config),
        "vocab_size": model.vocab_size,
        "tokenizer": {
            "symbol_total": tokenizer.symbol_total,
            "tokens": list(tokenizer.tokens),
        },
        "symbol_vocab": {
            "arity": vocab.arity,
            "entity_ranges": [list(r) for r in vocab.entity_ranges],
            "relation_range": list(vocab.relation_range),
            "relation_count": vocab.relation_count,
        },
        "relations": list(relations.names),
        "params": [
            {"name": n, "shape": list(state[n].shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(">Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(state[n].detach().cpu().numpy().astype("<f4").tobytes(order="C"))


def load_checkpoint(
    path: str | Path,
) -> tuple[Seq2SeqModel, Tokenizer, SymbolVocab, RelationTypeSet]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (length,) = struct.unpack(">Q", fh.read(8))
        header = json.loads(fh.read(length))
        if header.get("format_version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version")
        cfg = ModelConfig(**header["model"])
        model = Seq2SeqModel(cfg, header["vocab_size"])
        state = {}
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            arr = np.frombuffer(buf, dtype="<f4").reshape(shape)
            state[meta["name"]] = torch.from_numpy(arr.copy())
        model.load_state_dict(state)
    tok = header["tokenizer"]
    tokenizer = Tokenizer(
        symbol_total=tok["symbol_total"], tokens=tuple(tok["tokens"])
    )
    sv = header["symbol_vocab"]
    vocab = SymbolVocab(
        arity=sv["arity"],
        entity_ranges=tuple(tuple(r) for r in sv["entity_ranges"]),
        relation_range=tuple(sv["relation_range"]),
        relation_count=sv["relation_count"],
    )
    relations = RelationTypeSet(tuple(header["relations"]))
    return model, tokenizer, vocab, relations
