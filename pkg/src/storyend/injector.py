"""Gated cross-modal injection into decoder states.

Selective attention reads visual and semantic node memories with the
decoder hidden state as the query (no learned Q/K/V projections); a
sigmoid gate mixes the two readouts and the input state is added back
as a residual.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError
from . import tensor as T
from .tensor import Tensor


@dataclass
class InjectorParams:
    """Gate weights for one decoder layer.

    `u` scores the visual readout and `v` the semantic one. Shape (1, d)
    gives a scalar gate per position; (d, d) gives the vector-gate
    variant. Optional shared projections (q, k, v) can be enabled for
    ablation runs."""

    u: Tensor
    v: Tensor
    q_proj: Optional[Tensor] = None
    k_proj: Optional[Tensor] = None
    v_proj: Optional[Tensor] = None


def init_injector(params, prefix, dim, rng, vector_gate=False, projections=False):
    bound = 1.0 / np.sqrt(dim)
    gate_shape = (dim, dim) if vector_gate else (1, dim)
    u = params.add(f"{prefix}.gate_u", Tensor(rng.uniform(-bound, bound, gate_shape)))
    v = params.add(f"{prefix}.gate_v", Tensor(rng.uniform(-bound, bound, gate_shape)))
    proj = {}
    if projections:
        for name in ("q_proj", "k_proj", "v_proj"):
            proj[name] = params.add(
                f"{prefix}.{name}", Tensor(rng.uniform(-bound, bound, (dim, dim)))
            )
    return InjectorParams(u=u, v=v, **proj)


def selective_attention(h, nodes, q_proj=None, k_proj=None, v_proj=None):
    """Attention-weighted sum of node features for each position of `h`.

    Q is `h` verbatim and K = V = `nodes` verbatim unless projections are
    supplied; scores are scaled by 1/sqrt(d).
    """
    if nodes.data.shape[0] == 0:
        raise ContractError("selective attention over an empty node memory")
    if h.data.shape[1] != nodes.data.shape[1]:
        raise DimensionError(
            f"query dim {h.data.shape[1]} != memory dim {nodes.data.shape[1]}"
        )
    q = T.matmul(h, q_proj) if q_proj is not None else h
    k = T.matmul(nodes, k_proj) if k_proj is not None else nodes
    v = T.matmul(nodes, v_proj) if v_proj is not None else nodes
    scores = T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(h.data.shape[1]))
    return T.matmul(T.softmax(scores, axis=-1), v)


def inject(h, visual_nodes, semantic_nodes, params):
    """Gated fusion of the two modality readouts plus the residual state.

    Per position: lam = sigmoid(U h_vis + V h_sem) in (0, 1);
    output = lam * h_vis + (1 - lam) * h_sem + h.
    """
    proj = (params.q_proj, params.k_proj, params.v_proj)
    h_vis = selective_attention(h, visual_nodes, *proj)
    h_sem = selective_attention(h, semantic_nodes, *proj)
    pre = T.matmul(h_vis, T.transpose(params.u)) + T.matmul(h_sem, T.transpose(params.v))
    lam = T.sigmoid(pre)
    return T.mul(lam, h_vis) + T.mul(1.0 - lam, h_sem) + h


def attention_diagnostics(h, visual_nodes, semantic_nodes, params, top_k=3):
    """Per-position gate value and top-k attended node indices per modality.

    Pure numpy; used for the generation diagnostics dump, never for
    training.
    """
    def scores(nodes):
        q = h.data @ params.q_proj.data if params.q_proj is not None else h.data
        k = nodes.data @ params.k_proj.data if params.k_proj is not None else nodes.data
        s = q @ k.T / np.sqrt(h.data.shape[1])
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=-1, keepdims=True)

    att_vis = scores(visual_nodes)
    att_sem = scores(semantic_nodes)

    def readout(att, nodes):
        v = nodes.data @ params.v_proj.data if params.v_proj is not None else nodes.data
        return att @ v

    pre = readout(att_vis, visual_nodes) @ params.u.data.T + readout(att_sem, semantic_nodes) @ params.v.data.T
    lam = 1.0 / (1.0 + np.exp(-pre))
    out = []
    for pos in range(h.data.shape[0]):
        top_vis = np.argsort(-att_vis[pos])[:top_k]
        top_sem = np.argsort(-att_sem[pos])[:top_k]
        out.append({
            "lambda": lam[pos].mean().item(),
            "top_visual_nodes": [
                {"node": int(i), "weight": att_vis[pos, i].item()} for i in top_vis
            ],
            "top_semantic_nodes": [
                {"node": int(i), "weight": att_sem[pos, i].item()} for i in top_sem
            ],
        })
    return out
