"""Relational graph convolution: per-relation weights, in-neighbor mean
aggregation, ReLU. Used for per-modality event reasoning and, after a
layer normalization, for cross-modal fusion over the merged graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError
from . import tensor as T
from .graphs import EdgeRelation, NodeKind
from .tensor import Tensor


@dataclass
class RgcnStack:
    """L layers of per-relation (d_in, d_out) weights, plus the pre-fusion
    layer-norm parameters and an optional self-connection weight per layer."""

    layers: list[dict[EdgeRelation, Tensor]]
    ln_gain: Optional[Tensor] = None
    ln_bias: Optional[Tensor] = None
    self_weights: Optional[list[Tensor]] = None


def init_rgcn_stack(params, prefix, n_layers, dim, rng, self_loop=False,
                    with_layer_norm=False):
    """Create and register one stack's weights under `prefix.*`."""
    bound = 1.0 / np.sqrt(dim)
    layers = []
    self_weights = [] if self_loop else None
    for layer in range(n_layers):
        weights = {}
        for rel in EdgeRelation:
            name = f"{prefix}.layer{layer}.{rel.value}"
            weights[rel] = params.add(name, Tensor(rng.uniform(-bound, bound, (dim, dim))))
        layers.append(weights)
        if self_loop:
            self_weights.append(
                params.add(f"{prefix}.layer{layer}.self", Tensor(rng.uniform(-bound, bound, (dim, dim))))
            )
    ln_gain = ln_bias = None
    if with_layer_norm:
        ln_gain = params.add(f"{prefix}.ln_gain", Tensor(np.ones(dim)))
        ln_bias = params.add(f"{prefix}.ln_bias", Tensor(np.zeros(dim)))
    return RgcnStack(layers=layers, ln_gain=ln_gain, ln_bias=ln_bias, self_weights=self_weights)


def _relation_adjacency(graph, n):
    """Per-relation row-normalized in-adjacency: A[i, j] = 1/|N_r(i)| for
    every edge j -> i under relation r. Relations without edges are skipped."""
    table = {}
    for e in graph.edges:
        table.setdefault(e.relation, []).append(e)
    out = {}
    for rel, edges in table.items():
        a = np.zeros((n, n))
        indeg = np.zeros(n)
        for e in edges:
            indeg[e.dst] += 1
        for e in edges:
            a[e.dst, e.src] = 1.0 / indeg[e.dst]
        out[rel] = Tensor(a)
    return out


def rgcn_layer(graph, features, weights, self_weight=None, adjacency=None):
    """One message-passing layer.

    Each node sums, over relations and in-neighbors, the transformed
    neighbor features scaled by 1/|N_r(i)|, then applies ReLU. Nodes with
    no in-edges output the zero vector (there is no implicit self term;
    pass `self_weight` to add one).
    """
    n = graph.node_count
    if features.data.shape[0] != n:
        raise DimensionError(
            f"feature rows {features.data.shape[0]} != node count {n}"
        )
    if adjacency is None:
        adjacency = _relation_adjacency(graph, n)
    total = None
    for rel, weight in weights.items():
        a = adjacency.get(rel)
        if a is None:
            continue
        msg = T.matmul(a, T.matmul(features, weight))
        total = msg if total is None else total + msg
    if self_weight is not None:
        extra = T.matmul(features, self_weight)
        total = extra if total is None else total + extra
    if total is None:
        return Tensor(np.zeros((n, features.data.shape[1])))
    return T.relu(total)


def reason(graph, features, stack):
    """Apply the stack's layers sequentially (L = 0 is the identity)."""
    adjacency = _relation_adjacency(graph, graph.node_count)
    out = features
    for i, weights in enumerate(stack.layers):
        self_w = stack.self_weights[i] if stack.self_weights else None
        out = rgcn_layer(graph, out, weights, self_w, adjacency)
    return out


@dataclass
class FusionResult:
    semantic: Tensor        # rows for sentence-root and event nodes
    visual: Tensor          # rows for image-root, object and relation nodes
    semantic_node_ids: list[int]
    visual_node_ids: list[int]


_SEMANTIC_KINDS = (NodeKind.SENTENCE_ROOT, NodeKind.EVENT)
_VISUAL_KINDS = (NodeKind.IMAGE_ROOT, NodeKind.OBJECT, NodeKind.RELATION)


def fuse(merged_graph, features, stack):
    """Layer-normalize node features, run the stack over the merged graph,
    and split the output by node modality."""
    kinds = merged_graph.kinds()
    if NodeKind.IMAGE_ROOT not in kinds:
        raise ContractError("fusion graph lacks an image root")
    if NodeKind.SENTENCE_ROOT not in kinds:
        raise ContractError("fusion graph lacks sentence roots")
    if stack.ln_gain is None or stack.ln_bias is None:
        raise ContractError("fusion stack was built without layer-norm parameters")
    normalized = T.layer_norm(features, stack.ln_gain, stack.ln_bias)
    out = reason(merged_graph, normalized, stack)
    sem_ids = merged_graph.node_ids_of(*_SEMANTIC_KINDS)
    vis_ids = merged_graph.node_ids_of(*_VISUAL_KINDS)
    return FusionResult(
        semantic=T.gather_rows(out, sem_ids),
        visual=T.gather_rows(out, vis_ids),
        semantic_node_ids=sem_ids,
        visual_node_ids=vis_ids,
    )
