"""Event graph construction, record schema validation, and corpus I/O."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storyend import tensor as T
from storyend.errors import AnnotationError, SchemaError, StoryEndError
from storyend.graphs import (Edge, EdgeRelation, EventGraph, Node, NodeKind,
                             REVERSE_RELATION, build_semantic_graph,
                             build_visual_graph, load_corpus, merge_graphs,
                             record_from_dict, validate_corpus, write_corpus)
from storyend.synthdata import make_synthetic_corpus
from storyend.tensor import Tensor


def embeddings_for(sentences, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.normal(size=(len(s), dim))) for s in sentences]


def zero_embedder(dim=6):
    return lambda label: Tensor(np.zeros(dim))


# -- random record generator (pure numpy, mirrored by the fuzz criteria) ----


def random_record_parts(rng):
    n_sent = int(rng.integers(1, 5))
    sentences = [
        [f"w{rng.integers(50)}" for _ in range(rng.integers(2, 9))]
        for _ in range(n_sent)
    ]
    srl_events = []
    for sent in sentences:
        events = []
        for _ in range(rng.integers(0, 3)):
            spans = []
            for _ in range(rng.integers(1, 3)):
                start = int(rng.integers(0, len(sent)))
                end = int(rng.integers(start + 1, len(sent) + 1))
                spans.append(("ARG", start, end))
            events.append(spans)
        srl_events.append(events)
    n_obj = int(rng.integers(0, 5))
    objects = [(f"o{i}", f"cat{rng.integers(6)}", None) for i in range(n_obj)]
    relations = []
    if n_obj >= 2:
        for _ in range(rng.integers(0, 4)):
            i, j = rng.choice(n_obj, size=2, replace=False)
            relations.append((f"o{i}", f"pred{rng.integers(4)}", f"o{j}"))
    return sentences, srl_events, objects, relations


# -- semantic graph --------------------------------------------------------


def test_semantic_graph_edge_count_formula():
    rng = np.random.default_rng(0)
    for _ in range(50):
        sentences, srl_events, _, _ = random_record_parts(rng)
        graph, feats = build_semantic_graph(
            sentences, srl_events, embeddings_for(sentences))
        n_events = sum(len(ev) for sent in srl_events for ev in sent)
        n_sent = len(sentences)
        assert graph.node_count == n_sent + n_events
        assert len(graph.edges) == 2 * n_events + 2 * (n_sent - 1)
        assert feats.data.shape[0] == graph.node_count
        graph.validate()


def test_semantic_root_feature_is_sentence_mean():
    sentences = [["a", "b", "c"]]
    emb = embeddings_for(sentences, seed=3)
    graph, feats = build_semantic_graph(sentences, [[]], emb)
    assert np.allclose(feats.data[0], emb[0].data.mean(axis=0))


def test_semantic_event_feature_is_span_mean():
    sentences = [["a", "b", "c", "d"]]
    emb = embeddings_for(sentences, seed=4)
    graph, feats = build_semantic_graph(
        sentences, [[[("V", 1, 3)]]], emb)
    assert np.allclose(feats.data[1], emb[0].data[1:3].mean(axis=0))


def test_semantic_chain_edges_connect_adjacent_roots():
    sentences = [["a"], ["b"], ["c"]]
    graph, _ = build_semantic_graph(
        sentences, [[], [], []], embeddings_for(sentences))
    nxt = [(e.src, e.dst) for e in graph.edges if e.relation is EdgeRelation.SENT_NEXT]
    assert nxt == [(0, 1), (1, 2)]


def test_semantic_span_out_of_bounds_raises():
    sentences = [["a", "b"]]
    with pytest.raises(AnnotationError) as exc:
        build_semantic_graph(
            sentences, [[[("V", 1, 5)]]], embeddings_for(sentences), story_id="s9")
    assert "s9" in str(exc.value)


# -- visual graph ----------------------------------------------------------


def test_visual_graph_edge_count_formula():
    rng = np.random.default_rng(1)
    for _ in range(50):
        _, _, objects, relations = random_record_parts(rng)
        graph, feats = build_visual_graph(
            objects, relations, zero_embedder(), zero_embedder(), dim=6)
        assert graph.node_count == 1 + len(objects) + len(relations)
        assert len(graph.edges) == 2 * len(objects) + 2 * len(relations)
        assert feats.data.shape[0] == graph.node_count
        graph.validate()


def test_visual_triplet_expands_through_relation_node():
    objects = [("o1", "dog", None), ("o2", "ball", None)]
    graph, _ = build_visual_graph(
        objects, [("o1", "chasing", "o2")], zero_embedder(), zero_embedder(), dim=6)
    o2r = [(e.src, e.dst) for e in graph.edges if e.relation is EdgeRelation.OBJ_TO_REL]
    r2o = [(e.src, e.dst) for e in graph.edges if e.relation is EdgeRelation.REL_TO_OBJ]
    rel_node = graph.node_ids_of(NodeKind.RELATION)[0]
    assert o2r == [(1, rel_node)]
    assert r2o == [(rel_node, 2)]


def test_visual_root_defaults_to_object_mean():
    rng = np.random.default_rng(7)
    f1, f2 = rng.normal(size=6), rng.normal(size=6)
    objects = [("a", "x", list(f1)), ("b", "y", list(f2))]
    _, feats = build_visual_graph(objects, [], zero_embedder(), zero_embedder())
    assert np.allclose(feats.data[0], (f1 + f2) / 2.0)


def test_visual_whole_image_feature_overrides_mean():
    whole = Tensor(np.full(6, 2.5))
    objects = [("a", "x", None)]
    _, feats = build_visual_graph(
        objects, [], zero_embedder(), zero_embedder(), whole_image_feature=whole)
    assert np.allclose(feats.data[0], 2.5)


def test_visual_dangling_relation_raises():
    with pytest.raises(AnnotationError) as exc:
        build_visual_graph([("o1", "dog", None)], [("o1", "near", "o9")],
                           zero_embedder(), zero_embedder(), dim=6)
    assert "o9" in str(exc.value)


# -- merge -----------------------------------------------------------------


def _merged(rng, cross_modal=True):
    sentences, srl_events, objects, relations = random_record_parts(rng)
    sem, sem_f = build_semantic_graph(sentences, srl_events, embeddings_for(sentences))
    vis, vis_f = build_visual_graph(objects, relations, zero_embedder(), zero_embedder(), dim=6)
    merged, feats = merge_graphs(sem, vis, sem_f, vis_f, cross_modal_edges=cross_modal)
    return sem, vis, merged, feats, len(sentences)


def test_merge_adds_two_bridges_per_sentence_root():
    rng = np.random.default_rng(2)
    for _ in range(30):
        sem, vis, merged, feats, n_sent = _merged(rng)
        assert len(merged.edges) == len(sem.edges) + len(vis.edges) + 2 * n_sent
        assert merged.node_count == sem.node_count + vis.node_count
        assert feats.data.shape[0] == merged.node_count
        merged.validate()


def test_merge_without_cross_modal_edges_keeps_union_only():
    rng = np.random.default_rng(2)
    sem, vis, merged, _, _ = _merged(rng, cross_modal=False)
    assert len(merged.edges) == len(sem.edges) + len(vis.edges)
    kinds = {e.relation for e in merged.edges}
    assert EdgeRelation.IMG_TO_SENT not in kinds
    assert EdgeRelation.SENT_TO_IMG not in kinds


def test_merge_is_deterministic():
    rng1, rng2 = np.random.default_rng(5), np.random.default_rng(5)
    _, _, m1, f1, _ = _merged(rng1)
    _, _, m2, f2, _ = _merged(rng2)
    assert m1.nodes == m2.nodes
    assert m1.edges == m2.edges
    assert np.array_equal(f1.data, f2.data)


def test_reverse_pairing_closure_holds_everywhere():
    rng = np.random.default_rng(6)
    for _ in range(30):
        _, _, merged, _, _ = _merged(rng)
        multiset = {}
        for e in merged.edges:
            multiset[e] = multiset.get(e, 0) + 1
        for e, count in multiset.items():
            if e.relation in REVERSE_RELATION:
                rev = Edge(e.dst, e.src, REVERSE_RELATION[e.relation])
                assert multiset.get(rev, 0) == count


def test_merged_graph_is_connected_when_bridged():
    # BFS oracle: with bridges present and at least one sentence, every
    # node is reachable from sentence root 0 through undirected adjacency.
    rng = np.random.default_rng(8)
    for _ in range(20):
        _, _, merged, _, _ = _merged(rng)
        adj = {n.node_id: set() for n in merged.nodes}
        for e in merged.edges:
            adj[e.src].add(e.dst)
            adj[e.dst].add(e.src)
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            frontier = nxt
        # relation nodes of scenes with no objects cannot exist; isolated
        # event-less sentences are chained, so full reachability holds
        assert seen == set(adj)


def test_validate_rejects_self_loop():
    graph = EventGraph(
        nodes=[Node(0, NodeKind.SENTENCE_ROOT, 0)],
        edges=[Edge(0, 0, EdgeRelation.SENT_NEXT)])
    with pytest.raises(StoryEndError):
        graph.validate()


def test_validate_rejects_missing_reverse_pair():
    graph = EventGraph(
        nodes=[Node(0, NodeKind.SENTENCE_ROOT, 0), Node(1, NodeKind.SENTENCE_ROOT, 1)],
        edges=[Edge(0, 1, EdgeRelation.SENT_NEXT)])
    with pytest.raises(StoryEndError):
        graph.validate()


# -- record schema ---------------------------------------------------------


def good_record_dict():
    return make_synthetic_corpus(2, np.random.default_rng(0))[0].to_dict()


def test_record_round_trip():
    obj = good_record_dict()
    rec = record_from_dict(obj)
    assert rec.to_dict() == obj


def test_record_rejects_bad_span():
    obj = good_record_dict()
    obj["srl_events"][0][0][0][2] = 99
    with pytest.raises(SchemaError) as exc:
        record_from_dict(obj)
    assert "span" in str(exc.value).lower()


def test_record_rejects_duplicate_object_id():
    obj = good_record_dict()
    obj["scene_objects"].append(list(obj["scene_objects"][0]))
    with pytest.raises(SchemaError):
        record_from_dict(obj)


def test_record_rejects_too_many_objects():
    obj = good_record_dict()
    obj["scene_objects"] = [[f"o{i}", "cat", None] for i in range(11)]
    obj["scene_relations"] = []
    with pytest.raises(SchemaError) as exc:
        record_from_dict(obj)
    assert "10" in str(exc.value)


def test_record_rejects_missing_field():
    obj = good_record_dict()
    del obj["ending"]
    with pytest.raises(SchemaError) as exc:
        record_from_dict(obj)
    assert "ending" in str(exc.value)


# -- corpus I/O ------------------------------------------------------------


def test_corpus_write_load_round_trip(tmp_path):
    records = make_synthetic_corpus(5, np.random.default_rng(1))
    path = tmp_path / "c.jsonl"
    write_corpus(path, records)
    loaded = load_corpus(path)
    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in records]


def test_load_corpus_names_bad_line(tmp_path):
    path = tmp_path / "c.jsonl"
    good = json.dumps(good_record_dict())
    path.write_text(good + "\n{broken\n")
    with pytest.raises(SchemaError) as exc:
        load_corpus(path)
    assert exc.value.line_number == 2


def test_validate_corpus_gives_per_line_verdicts(tmp_path):
    path = tmp_path / "c.jsonl"
    good = good_record_dict()
    bad = good_record_dict()
    bad["sentences"] = []
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    verdicts = validate_corpus(path)
    assert verdicts[0][1] is True
    assert verdicts[1][1] is False


# -- hypothesis fuzz -------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fuzzed_construction_upholds_invariants(seed):
    rng = np.random.default_rng(seed)
    _, _, merged, feats, _ = _merged(rng)
    merged.validate()
    assert feats.data.shape[0] == merged.node_count
    assert len({n.node_id for n in merged.nodes}) == merged.node_count
