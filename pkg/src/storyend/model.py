"""Full pipeline assembly: plot token encoder, graph construction,
per-modality reasoning, cross-modal fusion, and the injected decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import decoder as D
from . import rgcn
from . import tensor as T
from .decoder import BOS, EOS, ModelConfig, Vocab, LabelVocab
from .graphs import build_semantic_graph, build_visual_graph, merge_graphs
from .injector import attention_diagnostics
from .params import ModelParams
from .tensor import Tensor


@dataclass
class StoryState:
    """Per-story intermediate state up to (and excluding) fusion."""

    record: object
    semantic_graph: object
    visual_graph: object
    semantic_features: Tensor   # post per-modality reasoning
    visual_features: Tensor
    root_rows: list[int]        # row index of each sentence root in semantic_features


@dataclass
class FusedStory:
    state: StoryState
    visual_nodes: Tensor
    semantic_nodes: Tensor
    semantic_node_ids: list[int]
    visual_node_ids: list[int]


class StoryEndingModel:
    """Holds the config, vocabularies and every trainable tensor."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, categories: LabelVocab,
                 predicates: LabelVocab, rng=None, params: Optional[ModelParams] = None):
        self.cfg = cfg
        self.vocab = vocab
        self.categories = categories
        self.predicates = predicates
        if params is not None:
            self.params = params
            self._bind_existing()
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        dim = cfg.d_model
        p = self.params = ModelParams()
        p.add("enc.obj_emb", Tensor(rng.normal(0.0, 0.02, (len(categories), dim))))
        p.add("enc.rel_emb", Tensor(rng.normal(0.0, 0.02, (len(predicates), dim))))
        p.add("enc.pos_emb", Tensor(rng.normal(0.0, 0.02, (cfg.max_sentence_len, dim))))
        self.enc_blocks = [
            D._init_block(p, f"enc.block{i}", dim, rng, with_injector=False, cfg=cfg)
            for i in range(cfg.enc_layers)
        ]
        self.sem_stack = rgcn.init_rgcn_stack(
            p, "rgcn.sem", cfg.reason_layers, dim, rng, self_loop=cfg.self_loop)
        self.vis_stack = rgcn.init_rgcn_stack(
            p, "rgcn.vis", cfg.reason_layers, dim, rng, self_loop=cfg.self_loop)
        self.fuse_stack = rgcn.init_rgcn_stack(
            p, "rgcn.fuse", cfg.fuse_layers, dim, rng, self_loop=cfg.self_loop,
            with_layer_norm=True)
        self.decoder = D.init_decoder(p, cfg, len(vocab), rng)

    def _bind_existing(self):
        """Rebuild the typed parameter views over a loaded flat registry."""
        p = self.params
        cfg = self.cfg

        def block(prefix, with_injector):
            from .decoder import AttentionParams, BlockParams
            from .injector import InjectorParams
            injector = None
            if with_injector:
                kwargs = {}
                for name in ("q_proj", "k_proj", "v_proj"):
                    key = f"{prefix}.inj.{name}"
                    kwargs[name] = p[key] if key in p else None
                injector = InjectorParams(
                    u=p[f"{prefix}.inj.gate_u"], v=p[f"{prefix}.inj.gate_v"], **kwargs)
            return BlockParams(
                ln1_gain=p[f"{prefix}.ln1_gain"], ln1_bias=p[f"{prefix}.ln1_bias"],
                attn=AttentionParams(
                    wq=p[f"{prefix}.wq"], wk=p[f"{prefix}.wk"], wv=p[f"{prefix}.wv"],
                    wo=p[f"{prefix}.wo"], bo=p[f"{prefix}.bo"]),
                ln2_gain=p[f"{prefix}.ln2_gain"], ln2_bias=p[f"{prefix}.ln2_bias"],
                ff_w1=p[f"{prefix}.ff_w1"], ff_b1=p[f"{prefix}.ff_b1"],
                ff_w2=p[f"{prefix}.ff_w2"], ff_b2=p[f"{prefix}.ff_b2"],
                injector=injector)

        def stack(prefix, n_layers, with_ln):
            from .graphs import EdgeRelation
            layers = [
                {rel: p[f"{prefix}.layer{i}.{rel.value}"] for rel in EdgeRelation}
                for i in range(n_layers)
            ]
            self_w = None
            if cfg.self_loop:
                self_w = [p[f"{prefix}.layer{i}.self"] for i in range(n_layers)]
            return rgcn.RgcnStack(
                layers=layers,
                ln_gain=p[f"{prefix}.ln_gain"] if with_ln else None,
                ln_bias=p[f"{prefix}.ln_bias"] if with_ln else None,
                self_weights=self_w)

        self.enc_blocks = [block(f"enc.block{i}", False) for i in range(cfg.enc_layers)]
        self.sem_stack = stack("rgcn.sem", cfg.reason_layers, False)
        self.vis_stack = stack("rgcn.vis", cfg.reason_layers, False)
        self.fuse_stack = stack("rgcn.fuse", cfg.fuse_layers, True)
        self.decoder = D.DecoderStack(
            tok_emb=p["dec.tok_emb"], pos_emb=p["dec.pos_emb"],
            blocks=[block(f"dec.block{i}", True) for i in range(cfg.dec_layers)],
            ln_f_gain=p["dec.ln_f_gain"], ln_f_bias=p["dec.ln_f_bias"],
            lm_head=p["dec.lm_head"], lm_bias=p["dec.lm_bias"],
            clf_w1=p["dec.clf_w1"], clf_b1=p["dec.clf_b1"],
            clf_w2=p["dec.clf_w2"], clf_b2=p["dec.clf_b2"])

    # -- encoding ----------------------------------------------------------

    def encode_sentence(self, tokens):
        """Contextual token embeddings for one plot sentence: shared token
        table, learned positions, and a small non-causal transformer."""
        ids = self.vocab.encode(tokens[: self.cfg.max_sentence_len])
        x = T.gather_rows(self.decoder.tok_emb, ids) + T.gather_rows(
            self.params["enc.pos_emb"], range(len(ids)))
        for block in self.enc_blocks:
            x = D.transformer_block(x, block, self.cfg.n_heads, causal=False)
        return x

    def _object_embedder(self, category):
        return T.row(self.params["enc.obj_emb"], self.categories.index(category))

    def _relation_embedder(self, predicate):
        return T.row(self.params["enc.rel_emb"], self.predicates.index(predicate))

    def build_story(self, record):
        """Graphs plus per-modality reasoned node features for one record."""
        truncated = [sent[: self.cfg.max_sentence_len] for sent in record.sentences]
        token_embeddings = [self.encode_sentence(sent) for sent in truncated]
        sem_graph, sem_feats = build_semantic_graph(
            truncated, record.srl_events, token_embeddings, story_id=record.story_id)
        vis_graph, vis_feats = build_visual_graph(
            record.scene_objects, record.scene_relations,
            self._object_embedder, self._relation_embedder, dim=self.cfg.d_model)
        sem_feats = rgcn.reason(sem_graph, sem_feats, self.sem_stack)
        vis_feats = rgcn.reason(vis_graph, vis_feats, self.vis_stack)
        root_rows = [n.feature_index for n in sem_graph.nodes
                     if n.kind.value == "sentence_root"]
        return StoryState(record, sem_graph, vis_graph, sem_feats, vis_feats, root_rows)

    def fuse_story(self, state: StoryState):
        merged, feats = merge_graphs(
            state.semantic_graph, state.visual_graph,
            state.semantic_features, state.visual_features,
            cross_modal_edges=self.cfg.cross_modal_edges)
        result = rgcn.fuse(merged, feats, self.fuse_stack)
        return FusedStory(
            state=state,
            visual_nodes=result.visual,
            semantic_nodes=result.semantic,
            semantic_node_ids=result.semantic_node_ids,
            visual_node_ids=result.visual_node_ids)

    # -- losses and generation --------------------------------------------

    def generation_loss(self, fused: FusedStory):
        ending_ids = self.vocab.encode(fused.state.record.ending[: self.cfg.max_len - 1])
        return D.generation_loss(
            ending_ids, fused.visual_nodes, fused.semantic_nodes, self.decoder, self.cfg)

    def incoherence_probs(self, final_hidden):
        return D.incoherence_logits(final_hidden, self.decoder)

    def generate(self, record, beam_size=3, max_len=None, diagnostics=False):
        """Beam-search an ending for one record (inference mode, no tape)."""
        max_len = max_len or self.cfg.max_len
        fused = self.fuse_story(self.build_story(record))
        step = D.make_step_fn(fused.visual_nodes, fused.semantic_nodes, self.decoder, self.cfg)
        hyp = D.beam_search(step, beam_size, max_len)
        tokens = self.vocab.decode(hyp.tokens)
        out = {"story_id": record.story_id, "generated_ending": tokens,
               "logprob": hyp.logprob}
        if diagnostics:
            out["diagnostics"] = self._generation_diagnostics(fused, hyp.tokens)
        return out

    def _generation_diagnostics(self, fused: FusedStory, token_ids):
        """Last-layer injector attribution for each generated token."""
        hidden = D.decoder_hidden_states(
            token_ids[:-1] if token_ids[-1] == EOS else token_ids,
            fused.visual_nodes, fused.semantic_nodes, self.decoder, self.cfg)
        diag = attention_diagnostics(
            hidden, fused.visual_nodes, fused.semantic_nodes,
            self.decoder.blocks[-1].injector)
        out = []
        for pos, info in enumerate(diag):
            if pos + 1 < len(token_ids):
                info["token"] = self.vocab.itos[token_ids[pos + 1]]
            out.append(info)
        return out

    # -- persistence -------------------------------------------------------

    def meta(self):
        return {
            "config": self.cfg.to_dict(),
            "vocab": self.vocab.itos,
            "categories": self.categories.itos,
            "predicates": self.predicates.itos,
        }

    @classmethod
    def from_checkpoint(cls, params, meta):
        cfg = ModelConfig.from_dict(meta["config"])
        vocab = Vocab.__new__(Vocab)
        vocab.itos = list(meta["vocab"])
        vocab.stoi = {tok: i for i, tok in enumerate(vocab.itos)}
        categories = LabelVocab.__new__(LabelVocab)
        categories.itos = list(meta["categories"])
        categories.stoi = {lab: i for i, lab in enumerate(categories.itos)}
        predicates = LabelVocab.__new__(LabelVocab)
        predicates.itos = list(meta["predicates"])
        predicates.stoi = {lab: i for i, lab in enumerate(predicates.itos)}
        return cls(cfg, vocab, categories, predicates, params=params)
