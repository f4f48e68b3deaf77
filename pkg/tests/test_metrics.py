import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossalign.datamodel import InstanceRecord, Location, Modality, SceneRecord
from crossalign.errors import SetupError
from crossalign.metrics import (EmbeddingSet, InstanceQuery, RecallTable, SceneMeta, evaluate_embeddings,
                                instance_matching_recall, scene_level_recall, scene_retrieval_recall)
from crossalign.retrieval import RankedResult, build_index, instance_match, query_topk
from crossalign.synthgen import brute_force_oracle

from conftest import random_metric_fixture


def queries(src, dst, cats):
    return [InstanceQuery(q, q, r, cats) for q, r in instance_match(src, dst).items()]


def test_perfect_and_adversarial_instance_recall():
    rng = np.random.default_rng(0)
    vecs = {f"o{i}": rng.normal(size=4) for i in range(4)}
    cats = dict.fromkeys(vecs, "c")
    assert instance_matching_recall(queries(vecs, vecs, cats), 1) == 1.0
    # each target is anti-aligned with its own query, so it ranks last
    e = np.eye(4)
    src = {f"o{i}": e[i] for i in range(4)}
    dst = {f"o{i}": -e[i] + 0.01 for i in range(4)}
    assert instance_matching_recall(queries(src, dst, cats), 1) == 0.0


def test_missing_ground_truth_is_setup_error():
    r = RankedResult(("b",), (1.0,))
    with pytest.raises(SetupError):
        instance_matching_recall([InstanceQuery("a", "a", r, {"a": "x", "b": "x"})])


def test_same_diff_restriction():
    cats = {"a": "chair", "b": "chair", "c": "table"}
    r = RankedResult(("c", "b", "a"), (0.9, 0.8, 0.7))
    q = [InstanceQuery("a", "a", r, cats)]
    assert instance_matching_recall(q, 1, "all") == 0.0
    assert instance_matching_recall(q, 1, "same") == 0.0    # b (a chair) still beats a
    assert instance_matching_recall(q, 1, "diff") == 0.0    # c (a table) still beats a
    r2 = RankedResult(("c", "a", "b"), (0.9, 0.8, 0.7))
    q2 = [InstanceQuery("a", "a", r2, cats)]
    assert instance_matching_recall(q2, 1, "same") == 1.0
    assert instance_matching_recall(q2, 1, "diff") == 0.0


def test_scene_level_examples():
    assert scene_level_recall([(2, 3)]) == {0.25: 1.0, 0.5: 1.0, 0.75: 0.0}
    assert scene_level_recall([(3, 3), (5, 5)]) == {0.25: 1.0, 0.5: 1.0, 0.75: 1.0}
    assert scene_level_recall([(1, 2)], (0.5,)) == {0.5: 1.0}
    with pytest.raises(SetupError):
        scene_level_recall([(0, 0)])


def test_retrieval_variants_small():
    meta = {"a": SceneMeta("k", "g1"), "a2": SceneMeta("k", "g1"), "b": SceneMeta("k", "g2")}
    rk = {"a": RankedResult(("a", "b", "a2"), (1.0, 0.5, 0.4))}
    assert scene_retrieval_recall(rk, meta, "matching", 1) == 1.0
    assert scene_retrieval_recall(rk, meta, "category", 1) == 1.0
    # the query's own scan never counts as a temporal hit
    assert scene_retrieval_recall(rk, meta, "temporal", 1) == 0.0
    assert scene_retrieval_recall(rk, meta, "temporal", 2) == 1.0
    with pytest.raises(SetupError):
        scene_retrieval_recall({"b": RankedResult(("b", "a"), (1.0, 0.0))},
                               {"a": SceneMeta("k", "g1"), "b": SceneMeta("k", "g2")}, "temporal")


def test_single_category_db_category_recall_is_one():
    rng = np.random.default_rng(2)
    embs = {f"s{i}": rng.normal(size=3) for i in range(6)}
    meta = {s: SceneMeta("kitchen", s) for s in embs}
    idx = build_index(embs)
    rk = {q: query_topk(idx, -v, len(idx)) for q, v in embs.items()}
    assert scene_retrieval_recall(rk, meta, "category", 1) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_suite_equals_oracle_and_invariants(seed):
    scenes, emb = random_metric_fixture(np.random.default_rng(seed))
    table = evaluate_embeddings(scenes, emb)
    assert table == brute_force_oracle(scenes, emb)
    for name, row in table.values.items():
        assert all(v is None or 0.0 <= v <= 1.0 for v in row.values())
        if name.endswith("/matching"):
            cat = table.values[name.replace("/matching", "/category")]
            intra = table.values[name.replace("/matching", "/intra_category")]
            for c, v in row.items():
                if v is not None:
                    assert cat[c] >= v and intra[c] >= v


def test_ten_scene_temporal_fixture():
    rng = np.random.default_rng(7)
    scenes = []
    for b in range(10):
        group = f"g{b // 2}" if b < 6 else f"g{b}"   # three temporal pairs
        cat = "kitchen" if b < 4 else "office"
        scenes.append(SceneRecord(f"s{b}", cat, group, [InstanceRecord("o0", "chair", Location([0, 0, 0], [1, 1, 1]),
                                                                       {Modality.IMAGE: np.zeros(1)})]))
    emb = EmbeddingSet(scenes={k: {s.scene_id: rng.normal(size=4) for s in scenes} for k in ("R", "P")})
    table = evaluate_embeddings(scenes, emb, scene_keys=("R", "P"))
    assert table == brute_force_oracle(scenes, emb, scene_keys=("R", "P"))
    assert table.counts["scene/R->P/temporal"] == (6, 10)


def test_unavailable_rows_are_na():
    scenes, emb = random_metric_fixture(np.random.default_rng(3))
    emb.scenes.pop("F", None)
    table = evaluate_embeddings(scenes, emb)
    assert table.get("scene/F->P/matching", "R@1") is None
    assert "n/a" in table.to_text()


def test_table_json_round_trip():
    scenes, emb = random_metric_fixture(np.random.default_rng(4))
    table = evaluate_embeddings(scenes, emb)
    assert RecallTable.from_json(table.to_json()) == table


def test_embedding_set_round_trip(tmp_path):
    scenes, emb = random_metric_fixture(np.random.default_rng(5))
    for d in list(emb.instances.values()) + list(emb.scenes.values()):
        for k in d:
            d[k] = d[k].astype(np.float32).astype(np.float64)
    emb.save(tmp_path)
    back = EmbeddingSet.load(tmp_path)
    assert back.instances.keys() == emb.instances.keys() and back.scenes.keys() == emb.scenes.keys()
    for key, d in emb.instances.items():
        for k, v in d.items():
            assert np.array_equal(back.instances[key][k], v)
