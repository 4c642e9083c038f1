"""Event graphs: semantic (from SRL spans), visual (from scene triplets),
and the merged cross-modal graph that bridges the image root to every
sentence root.

Construction is deterministic: an identical story record always yields
identical node ordering, edges and features.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import AnnotationError, SchemaError, StoryEndError
from . import tensor as T
from .tensor import Tensor

MAX_OBJECTS = 10
MAX_RELATIONS = 20


class NodeKind(enum.Enum):
    SENTENCE_ROOT = "sentence_root"
    EVENT = "event"
    IMAGE_ROOT = "image_root"
    OBJECT = "object"
    RELATION = "relation"


class EdgeRelation(enum.Enum):
    SENT_NEXT = "sent_next"
    SENT_PREV = "sent_prev"
    SENT_TO_EVENT = "sent_to_event"
    EVENT_TO_SENT = "event_to_sent"
    OBJ_TO_REL = "obj_to_rel"
    REL_TO_OBJ = "rel_to_obj"
    IMG_TO_OBJ = "img_to_obj"
    OBJ_TO_IMG = "obj_to_img"
    IMG_TO_SENT = "img_to_sent"
    SENT_TO_IMG = "sent_to_img"


# Relation-specific reversal map: the edge multiset of every well-formed
# graph is closed under reversing each edge and swapping its relation.
REVERSE_RELATION = {
    EdgeRelation.SENT_NEXT: EdgeRelation.SENT_PREV,
    EdgeRelation.SENT_PREV: EdgeRelation.SENT_NEXT,
    EdgeRelation.SENT_TO_EVENT: EdgeRelation.EVENT_TO_SENT,
    EdgeRelation.EVENT_TO_SENT: EdgeRelation.SENT_TO_EVENT,
    EdgeRelation.IMG_TO_OBJ: EdgeRelation.OBJ_TO_IMG,
    EdgeRelation.OBJ_TO_IMG: EdgeRelation.IMG_TO_OBJ,
    EdgeRelation.IMG_TO_SENT: EdgeRelation.SENT_TO_IMG,
    EdgeRelation.SENT_TO_IMG: EdgeRelation.IMG_TO_SENT,
}


class Node(NamedTuple):
    node_id: int
    kind: NodeKind
    feature_index: int


class Edge(NamedTuple):
    src: int
    dst: int
    relation: EdgeRelation


# Triplet edges (obj -> rel -> obj) are directional; reversal closure is
# only required of the paired relation kinds above.
_PAIRED = set(REVERSE_RELATION)


@dataclass
class EventGraph:
    """Typed nodes plus typed directed edges; no self loops."""

    nodes: list[Node] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)

    @property
    def node_count(self):
        return len(self.nodes)

    def kinds(self):
        return [n.kind for n in self.nodes]

    def node_ids_of(self, *kinds):
        want = set(kinds)
        return [n.node_id for n in self.nodes if n.kind in want]

    def edges_by_relation(self):
        table = {rel: [] for rel in EdgeRelation}
        for e in self.edges:
            table[e.relation].append(e)
        return table

    def validate(self):
        ids = {n.node_id for n in self.nodes}
        if len(ids) != len(self.nodes):
            raise StoryEndError("duplicate node ids in event graph")
        for e in self.edges:
            if e.src not in ids or e.dst not in ids:
                raise StoryEndError(f"edge {e} references a missing node")
            if e.src == e.dst:
                raise StoryEndError(f"self-loop edge at node {e.src}")
        multiset = {}
        for e in self.edges:
            multiset[e] = multiset.get(e, 0) + 1
        for e, count in multiset.items():
            if e.relation in _PAIRED:
                rev = Edge(e.dst, e.src, REVERSE_RELATION[e.relation])
                if multiset.get(rev, 0) != count:
                    raise StoryEndError(f"edge {e} lacks its reverse-pair {rev}")
        return self


@dataclass
class StoryRecord:
    """One example: plot sentences, SRL spans, scene triplets, gold ending.

    `srl_events[i]` lists the events of sentence i; each event is a list of
    (role_label, token_start, token_end) spans. `scene_relations` entries
    are (subject_object_id, predicate_label, object_object_id).
    """

    story_id: str
    sentences: list[list[str]]
    srl_events: list[list[list[tuple[str, int, int]]]]
    scene_objects: list[tuple[str, str, Optional[list[float]]]]
    scene_relations: list[tuple[str, str, str]]
    ending: list[str]

    def to_dict(self):
        return {
            "story_id": self.story_id,
            "sentences": self.sentences,
            "srl_events": [
                [[[role, start, end] for role, start, end in event] for event in sent]
                for sent in self.srl_events
            ],
            "scene_objects": [
                [oid, category, feature] for oid, category, feature in self.scene_objects
            ],
            "scene_relations": [list(rel) for rel in self.scene_relations],
            "ending": self.ending,
        }


def _require(cond, message):
    if not cond:
        raise SchemaError(0, message)


def record_from_dict(obj, max_objects=MAX_OBJECTS, max_relations=MAX_RELATIONS):
    """Build a validated StoryRecord from a parsed JSON object.

    Raises SchemaError (line number 0; callers refill it) naming the first
    offending field.
    """
    _require(isinstance(obj, dict), "record must be a JSON object")
    for key in ("story_id", "sentences", "srl_events", "scene_objects",
                "scene_relations", "ending"):
        _require(key in obj, f"missing field '{key}'")
    _require(isinstance(obj["story_id"], str) and obj["story_id"], "story_id must be a non-empty string")

    sentences = obj["sentences"]
    _require(isinstance(sentences, list) and sentences, "sentences must be a non-empty list")
    for i, sent in enumerate(sentences):
        _require(isinstance(sent, list) and all(isinstance(t, str) for t in sent),
                 f"sentences[{i}] must be a list of strings")
        _require(len(sent) > 0, f"sentences[{i}] is empty")

    srl = obj["srl_events"]
    _require(isinstance(srl, list) and len(srl) == len(sentences),
             "srl_events must have one entry per sentence")
    parsed_srl = []
    for i, events in enumerate(srl):
        _require(isinstance(events, list), f"srl_events[{i}] must be a list")
        sent_events = []
        for j, event in enumerate(events):
            _require(isinstance(event, list) and event, f"srl_events[{i}][{j}] must be a non-empty list of spans")
            spans = []
            for k, span in enumerate(event):
                _require(isinstance(span, list) and len(span) == 3,
                         f"srl_events[{i}][{j}][{k}] must be [role, start, end]")
                role, start, end = span
                _require(isinstance(role, str), f"srl_events[{i}][{j}][{k}] role must be a string")
                _require(isinstance(start, int) and isinstance(end, int),
                         f"srl_events[{i}][{j}][{k}] span bounds must be integers")
                _require(0 <= start < end <= len(sentences[i]),
                         f"srl_events[{i}][{j}][{k}] span ({start},{end}) outside sentence of length {len(sentences[i])}")
                spans.append((role, start, end))
            sent_events.append(spans)
        parsed_srl.append(sent_events)

    objects = obj["scene_objects"]
    _require(isinstance(objects, list), "scene_objects must be a list")
    _require(len(objects) <= max_objects, f"scene_objects exceeds the limit of {max_objects}")
    parsed_objects = []
    seen_ids = set()
    feature_dim = None
    for i, entry in enumerate(objects):
        _require(isinstance(entry, list) and len(entry) == 3,
                 f"scene_objects[{i}] must be [object_id, category, feature-or-null]")
        oid, category, feature = entry
        _require(isinstance(oid, str) and oid, f"scene_objects[{i}] object_id must be a non-empty string")
        _require(oid not in seen_ids, f"scene_objects[{i}] duplicate object_id '{oid}'")
        seen_ids.add(oid)
        _require(isinstance(category, str) and category, f"scene_objects[{i}] category must be a non-empty string")
        if feature is not None:
            _require(isinstance(feature, list) and feature and
                     all(isinstance(x, (int, float)) for x in feature),
                     f"scene_objects[{i}] feature must be null or a list of numbers")
            if feature_dim is None:
                feature_dim = len(feature)
            _require(len(feature) == feature_dim,
                     f"scene_objects[{i}] feature dimension {len(feature)} != {feature_dim}")
            feature = [float(x) for x in feature]
        parsed_objects.append((oid, category, feature))

    relations = obj["scene_relations"]
    _require(isinstance(relations, list), "scene_relations must be a list")
    _require(len(relations) <= max_relations, f"scene_relations exceeds the limit of {max_relations}")
    parsed_relations = []
    for i, entry in enumerate(relations):
        _require(isinstance(entry, list) and len(entry) == 3,
                 f"scene_relations[{i}] must be [subject_id, predicate, object_id]")
        subj, pred, objid = entry
        for label, value in (("subject_id", subj), ("predicate", pred), ("object_id", objid)):
            _require(isinstance(value, str) and value,
                     f"scene_relations[{i}] {label} must be a non-empty string")
        _require(subj in seen_ids, f"scene_relations[{i}] references missing object '{subj}'")
        _require(objid in seen_ids, f"scene_relations[{i}] references missing object '{objid}'")
        parsed_relations.append((subj, pred, objid))

    ending = obj["ending"]
    _require(isinstance(ending, list) and all(isinstance(t, str) for t in ending),
             "ending must be a list of strings")

    return StoryRecord(
        story_id=obj["story_id"],
        sentences=sentences,
        srl_events=parsed_srl,
        scene_objects=parsed_objects,
        scene_relations=parsed_relations,
        ending=ending,
    )


def load_corpus(path, max_objects=MAX_OBJECTS, max_relations=MAX_RELATIONS):
    """Read a JSON-lines corpus; raises SchemaError with the line number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, f"invalid JSON ({exc.msg})") from exc
            try:
                records.append(record_from_dict(obj, max_objects, max_relations))
            except SchemaError as exc:
                raise SchemaError(line_no, str(exc).split(": ", 1)[1]) from exc
    return records


def validate_corpus(path, max_objects=MAX_OBJECTS, max_relations=MAX_RELATIONS):
    """Per-line schema verdicts: list of (line_number, ok, message)."""
    verdicts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                verdicts.append((line_no, False, f"invalid JSON ({exc.msg})"))
                continue
            try:
                record_from_dict(obj, max_objects, max_relations)
            except SchemaError as exc:
                verdicts.append((line_no, False, str(exc).split(": ", 1)[1]))
            else:
                verdicts.append((line_no, True, "OK"))
    return verdicts


def write_corpus(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


# -- graph builders --------------------------------------------------------


def build_semantic_graph(sentences, srl_events, token_embeddings, story_id="?"):
    """Per-sentence roots plus one event node per SRL span.

    Root features are mean pools over the sentence's token embeddings;
    event features mean-pool their span. Roots are chained in sequence
    order with next/prev edges; each event is bidirectionally linked to
    its sentence root. Returns (EventGraph, node feature tensor).
    """
    graph = EventGraph()
    rows = []
    root_ids = []
    for i, sent in enumerate(sentences):
        emb = token_embeddings[i]
        if emb.data.shape[0] != len(sent):
            raise AnnotationError(
                f"story {story_id}: sentence {i} has {len(sent)} tokens but "
                f"{emb.data.shape[0]} embedding rows"
            )
        root_id = len(graph.nodes)
        graph.nodes.append(Node(root_id, NodeKind.SENTENCE_ROOT, root_id))
        rows.append(T.mean_pool(emb))
        root_ids.append(root_id)
        for event in srl_events[i]:
            for role, start, end in event:
                if not 0 <= start < end <= len(sent):
                    raise AnnotationError(
                        f"story {story_id}: sentence {i} span ({start},{end}) "
                        f"role '{role}' outside sentence of length {len(sent)}"
                    )
                node_id = len(graph.nodes)
                graph.nodes.append(Node(node_id, NodeKind.EVENT, node_id))
                mask = np.zeros(len(sent), dtype=bool)
                mask[start:end] = True
                rows.append(T.mean_pool(emb, mask))
                graph.edges.append(Edge(root_id, node_id, EdgeRelation.SENT_TO_EVENT))
                graph.edges.append(Edge(node_id, root_id, EdgeRelation.EVENT_TO_SENT))
    for a, b in zip(root_ids, root_ids[1:]):
        graph.edges.append(Edge(a, b, EdgeRelation.SENT_NEXT))
        graph.edges.append(Edge(b, a, EdgeRelation.SENT_PREV))
    return graph, T.stack_rows(rows)


def build_visual_graph(scene_objects, scene_relations, object_embedder,
                       relation_embedder, whole_image_feature=None, dim=None):
    """Image root, one node per object, one node per relation triplet.

    Object features use the provided region vector when present, else the
    learned category embedding. The image root defaults to the mean of
    object features; pass `whole_image_feature` to supply a precomputed
    whole-image vector instead. Each triplet (subject, predicate, object)
    contributes subject->relation and relation->object edges.
    """
    graph = EventGraph()
    graph.nodes.append(Node(0, NodeKind.IMAGE_ROOT, 0))
    object_rows = []
    id_to_node = {}
    for oid, category, feature in scene_objects:
        node_id = len(graph.nodes)
        graph.nodes.append(Node(node_id, NodeKind.OBJECT, node_id))
        id_to_node[oid] = node_id
        object_rows.append(Tensor(feature) if feature is not None else object_embedder(category))
        graph.edges.append(Edge(0, node_id, EdgeRelation.IMG_TO_OBJ))
        graph.edges.append(Edge(node_id, 0, EdgeRelation.OBJ_TO_IMG))
    relation_rows = []
    for subj, pred, objid in scene_relations:
        if subj not in id_to_node or objid not in id_to_node:
            missing = subj if subj not in id_to_node else objid
            raise AnnotationError(f"scene relation references missing object '{missing}'")
        node_id = len(graph.nodes)
        graph.nodes.append(Node(node_id, NodeKind.RELATION, node_id))
        relation_rows.append(relation_embedder(pred))
        graph.edges.append(Edge(id_to_node[subj], node_id, EdgeRelation.OBJ_TO_REL))
        graph.edges.append(Edge(node_id, id_to_node[objid], EdgeRelation.REL_TO_OBJ))
    if whole_image_feature is not None:
        root_row = whole_image_feature
    elif object_rows:
        root_row = T.mean_pool(T.stack_rows(object_rows))
    else:
        if dim is None:
            raise AnnotationError("an empty scene needs an explicit feature dimension")
        root_row = Tensor(np.zeros(dim))
    # Feature table order matches node order: root, objects, relations.
    return graph, T.stack_rows([root_row] + object_rows + relation_rows)


def merge_graphs(semantic, visual, semantic_features, visual_features,
                 cross_modal_edges=True):
    """Node-disjoint union plus image-root <-> sentence-root bridges.

    Semantic nodes keep their ids; visual ids are shifted. Setting
    `cross_modal_edges=False` omits the bridging edges (the fusion
    ablation) while keeping the union itself.
    """
    offset = semantic.node_count
    merged = EventGraph()
    merged.nodes.extend(semantic.nodes)
    merged.nodes.extend(
        Node(n.node_id + offset, n.kind, n.feature_index + offset) for n in visual.nodes
    )
    merged.edges.extend(semantic.edges)
    merged.edges.extend(
        Edge(e.src + offset, e.dst + offset, e.relation) for e in visual.edges
    )
    if cross_modal_edges:
        img_roots = [n.node_id for n in merged.nodes if n.kind is NodeKind.IMAGE_ROOT]
        for root in merged.nodes[:offset]:
            if root.kind is not NodeKind.SENTENCE_ROOT:
                continue
            for img in img_roots:
                merged.edges.append(Edge(img, root.node_id, EdgeRelation.IMG_TO_SENT))
                merged.edges.append(Edge(root.node_id, img, EdgeRelation.SENT_TO_IMG))
    if len({n.node_id for n in merged.nodes}) != len(merged.nodes):
        raise StoryEndError("internal error: duplicate node ids after merge")
    features = T.concat_rows(semantic_features, visual_features)
    return merged, features


def graph_to_json(graph):
    """Debug dump: nodes with kinds and edges with relations."""
    return {
        "nodes": [
            {"id": n.node_id, "kind": n.kind.value, "feature_index": n.feature_index}
            for n in graph.nodes
        ],
        "edges": [
            {"src": e.src, "dst": e.dst, "relation": e.relation.value}
            for e in graph.edges
        ],
    }
