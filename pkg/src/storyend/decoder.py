"""Causal transformer decoder with per-layer multimodal injection,
token/label vocabularies, beam search, and the incoherence head.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, DataError, DimensionError
from . import tensor as T
from .injector import InjectorParams, inject, init_injector, attention_diagnostics
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"]

_TOKEN_RE = re.compile(r"[\w']+|[^\w\s]")


def tokenize(text):
    """Lowercase whitespace+punctuation split for raw text input."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Token <-> id mapping with pad/bos/eos/unk specials at fixed ids."""

    def __init__(self, tokens):
        self.itos = list(SPECIALS) + sorted(set(tokens) - set(SPECIALS))
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens):
        return [self.stoi.get(tok.lower(), UNK) for tok in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids if i not in (PAD, BOS, EOS)]

    @classmethod
    def from_records(cls, records):
        tokens = []
        for rec in records:
            for sent in rec.sentences:
                tokens.extend(t.lower() for t in sent)
            tokens.extend(t.lower() for t in rec.ending)
        return cls(tokens)


class LabelVocab:
    """Open label set (object categories, predicates) with an <unk> slot."""

    def __init__(self, labels):
        self.itos = ["<unk>"] + sorted(set(labels))
        self.stoi = {lab: i for i, lab in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def index(self, label):
        return self.stoi.get(label, 0)


@dataclass
class ModelConfig:
    """Desk-scale defaults; production-scale sizes are expressible but slow."""

    d_model: int = 64
    n_heads: int = 4
    dec_layers: int = 2
    enc_layers: int = 1
    reason_layers: int = 2
    fuse_layers: int = 2
    max_len: int = 25
    n_sentences: int = 4
    max_sentence_len: int = 32
    self_loop: bool = False
    vector_gate: bool = False
    attention_projections: bool = False
    cross_modal_edges: bool = True
    max_objects: int = 10
    max_relations: int = 20

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    injector: Optional[InjectorParams] = None


@dataclass
class DecoderStack:
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: list[BlockParams]
    ln_f_gain: Tensor
    ln_f_bias: Tensor
    lm_head: Tensor
    lm_bias: Tensor
    clf_w1: Tensor
    clf_b1: Tensor
    clf_w2: Tensor
    clf_b2: Tensor


def _init_block(params, prefix, dim, rng, with_injector, cfg):
    bound = 1.0 / np.sqrt(dim)
    hid = 4 * dim
    attn = AttentionParams(
        wq=params.add(f"{prefix}.wq", Tensor(rng.uniform(-bound, bound, (dim, dim)))),
        wk=params.add(f"{prefix}.wk", Tensor(rng.uniform(-bound, bound, (dim, dim)))),
        wv=params.add(f"{prefix}.wv", Tensor(rng.uniform(-bound, bound, (dim, dim)))),
        wo=params.add(f"{prefix}.wo", Tensor(rng.uniform(-bound, bound, (dim, dim)))),
        bo=params.add(f"{prefix}.bo", Tensor(np.zeros(dim))),
    )
    injector = None
    if with_injector:
        injector = init_injector(
            params, f"{prefix}.inj", dim, rng,
            vector_gate=cfg.vector_gate, projections=cfg.attention_projections,
        )
    return BlockParams(
        ln1_gain=params.add(f"{prefix}.ln1_gain", Tensor(np.ones(dim))),
        ln1_bias=params.add(f"{prefix}.ln1_bias", Tensor(np.zeros(dim))),
        attn=attn,
        ln2_gain=params.add(f"{prefix}.ln2_gain", Tensor(np.ones(dim))),
        ln2_bias=params.add(f"{prefix}.ln2_bias", Tensor(np.zeros(dim))),
        ff_w1=params.add(f"{prefix}.ff_w1", Tensor(rng.uniform(-bound, bound, (dim, hid)))),
        ff_b1=params.add(f"{prefix}.ff_b1", Tensor(np.zeros(hid))),
        ff_w2=params.add(f"{prefix}.ff_w2", Tensor(rng.uniform(-1.0 / np.sqrt(hid), 1.0 / np.sqrt(hid), (hid, dim)))),
        ff_b2=params.add(f"{prefix}.ff_b2", Tensor(np.zeros(dim))),
        injector=injector,
    )


def init_decoder(params, cfg, vocab_size, rng):
    dim = cfg.d_model
    bound = 1.0 / np.sqrt(dim)
    tok_emb = params.add("dec.tok_emb", Tensor(rng.normal(0.0, 0.02, (vocab_size, dim))))
    pos_emb = params.add("dec.pos_emb", Tensor(rng.normal(0.0, 0.02, (cfg.max_len + 2, dim))))
    blocks = [
        _init_block(params, f"dec.block{i}", dim, rng, with_injector=True, cfg=cfg)
        for i in range(cfg.dec_layers)
    ]
    return DecoderStack(
        tok_emb=tok_emb,
        pos_emb=pos_emb,
        blocks=blocks,
        ln_f_gain=params.add("dec.ln_f_gain", Tensor(np.ones(dim))),
        ln_f_bias=params.add("dec.ln_f_bias", Tensor(np.zeros(dim))),
        lm_head=params.add("dec.lm_head", Tensor(rng.uniform(-bound, bound, (dim, vocab_size)))),
        lm_bias=params.add("dec.lm_bias", Tensor(np.zeros(vocab_size))),
        clf_w1=params.add("dec.clf_w1", Tensor(rng.uniform(-bound, bound, (dim, dim)))),
        clf_b1=params.add("dec.clf_b1", Tensor(np.zeros(dim))),
        clf_w2=params.add("dec.clf_w2", Tensor(rng.uniform(-bound, bound, (dim, cfg.n_sentences)))),
        clf_b2=params.add("dec.clf_b2", Tensor(np.zeros(cfg.n_sentences))),
    )


def multi_head_attention(x, attn, n_heads, causal):
    """Multi-head self-attention over (t, d); causal masks future positions."""
    t, dim = x.data.shape
    dh = dim // n_heads
    q = T.matmul(x, attn.wq)
    k = T.matmul(x, attn.wk)
    v = T.matmul(x, attn.wv)
    mask = None
    if causal and t > 1:
        mask = Tensor(np.triu(np.full((t, t), -1e9), k=1))
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qs = T.slice_cols(q, lo, hi)
        ks = T.slice_cols(k, lo, hi)
        vs = T.slice_cols(v, lo, hi)
        scores = T.matmul(qs, T.transpose(ks)) * (1.0 / np.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        heads.append(T.matmul(T.softmax(scores, axis=-1), vs))
    merged = heads[0] if n_heads == 1 else T.concat_cols(heads)
    return T.matmul(merged, attn.wo) + attn.bo


def transformer_block(x, block, n_heads, causal=True, visual_nodes=None,
                      semantic_nodes=None):
    """Pre-LN block: self-attention, feed-forward, then (optionally) the
    multimodal injector applied to the block output."""
    h = x + multi_head_attention(
        T.layer_norm(x, block.ln1_gain, block.ln1_bias), block.attn, n_heads, causal
    )
    normed = T.layer_norm(h, block.ln2_gain, block.ln2_bias)
    ff = T.matmul(T.relu(T.matmul(normed, block.ff_w1) + block.ff_b1), block.ff_w2) + block.ff_b2
    h = h + ff
    if block.injector is not None and visual_nodes is not None:
        h = inject(h, visual_nodes, semantic_nodes, block.injector)
    return h


def decoder_hidden_states(prefix_ids, visual_nodes, semantic_nodes, stack, cfg,
                          collect_diagnostics=False):
    """Hidden states (t, d) for a token prefix; raises on bad ids/lengths."""
    if len(prefix_ids) == 0:
        raise ContractError("decoder prefix must start with the begin token")
    if len(prefix_ids) > cfg.max_len + 2:
        raise ContractError(f"prefix of {len(prefix_ids)} exceeds max length {cfg.max_len + 2}")
    vocab_size = stack.tok_emb.data.shape[0]
    for tok in prefix_ids:
        if not 0 <= tok < vocab_size:
            raise ContractError(f"token id {tok} outside vocabulary of {vocab_size}")
    x = T.gather_rows(stack.tok_emb, prefix_ids) + T.gather_rows(stack.pos_emb, range(len(prefix_ids)))
    diagnostics = []
    for block in stack.blocks:
        x = transformer_block(x, block, cfg.n_heads, causal=True,
                              visual_nodes=visual_nodes, semantic_nodes=semantic_nodes)
        if collect_diagnostics:
            diagnostics.append(
                attention_diagnostics(x, visual_nodes, semantic_nodes, block.injector)
            )
    x = T.layer_norm(x, stack.ln_f_gain, stack.ln_f_bias)
    return (x, diagnostics) if collect_diagnostics else x


def logits_from_hidden(hidden, stack):
    return T.matmul(hidden, stack.lm_head) + stack.lm_bias


def decode_step(prefix_ids, visual_nodes, semantic_nodes, stack, cfg):
    """Hidden states plus the next-token distribution at the last position."""
    hidden = decoder_hidden_states(prefix_ids, visual_nodes, semantic_nodes, stack, cfg)
    logits = logits_from_hidden(hidden, stack)
    dist = T.softmax(T.row(logits, len(prefix_ids) - 1))
    return hidden, dist


def generation_loss(ending_ids, visual_nodes, semantic_nodes, stack, cfg):
    """Teacher-forced mean NLL of the gold ending (eos included).

    Returns (loss, final hidden state) so the incoherence head can reuse
    the pass. `ending_ids` excludes specials; bos/eos are added here.
    """
    if not ending_ids:
        raise DataError("empty gold ending")
    full = [BOS] + list(ending_ids) + [EOS]
    hidden = decoder_hidden_states(full[:-1], visual_nodes, semantic_nodes, stack, cfg)
    logits = logits_from_hidden(hidden, stack)
    loss = T.sequence_cross_entropy(logits, full[1:])
    return loss, T.row(hidden, len(full) - 2)


def incoherence_logits(final_hidden, stack):
    """Sigmoid MLP over the last teacher-forced hidden state: one
    replaced-sentence probability per sentence root."""
    h = T.stack_rows([final_hidden])
    hid = T.relu(T.matmul(h, stack.clf_w1) + stack.clf_b1)
    out = T.matmul(hid, stack.clf_w2) + stack.clf_b2
    return T.sigmoid(T.row(out, 0))


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprob: float
    finished: bool = False


def beam_search(step_logprobs: Callable, beam_size, max_len, bos=BOS, eos=EOS):
    """Length-synchronous beam search over per-step log-probabilities.

    `step_logprobs(prefix)` returns a vector of next-token log-probs.
    Returns the finished hypothesis with the highest total log-probability
    (no length normalization); ties break toward the lexicographically
    smaller token sequence. Hypotheses finish at `eos` or at max_len.
    """
    if beam_size < 1:
        raise ContractError(f"beam size must be >= 1, got {beam_size}")
    alive = [BeamHypothesis([bos], 0.0)]
    finished = []
    for _ in range(max_len):
        candidates = []
        for hyp in alive:
            logp = step_logprobs(hyp.tokens)
            for tok in range(len(logp)):
                candidates.append((hyp.logprob + float(logp[tok]), hyp.tokens + [tok]))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for score, tokens in candidates[:beam_size]:
            hyp = BeamHypothesis(tokens, score, finished=tokens[-1] == eos)
            if hyp.finished:
                finished.append(hyp)
            else:
                alive.append(hyp)
        if not alive:
            break
    finished.extend(BeamHypothesis(h.tokens, h.logprob, True) for h in alive)
    best = min(finished, key=lambda h: (-h.logprob, h.tokens))
    return best


def make_step_fn(visual_nodes, semantic_nodes, stack, cfg):
    """Log-prob step callback for beam search (no tape, inference only)."""
    def step(prefix):
        hidden = decoder_hidden_states(prefix, visual_nodes, semantic_nodes, stack, cfg)
        logits = logits_from_hidden(hidden, stack).data[-1]
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())
    return step
