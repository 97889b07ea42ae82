from __future__ import annotations

import numpy as np
import pytest

from diffsearch.errors import ConfigError
from diffsearch.evaluation import (EvalReport, GalleryIndex, Query, ScenePredictions,
                                   detection_map50, evaluate, gallery_sweep,
                                   save_report, search_ap, select_query_embedding)


def _unit(*v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _scene_pred(boxes, scores, embeds):
    return ScenePredictions(boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                            scores=np.asarray(scores, dtype=np.float64),
                            embeds=np.asarray(embeds, dtype=np.float64))


BOX_A = [0.1, 0.1, 0.4, 0.9]
BOX_B = [0.6, 0.1, 0.9, 0.9]
FAR = [0.45, 0.45, 0.55, 0.55]


def test_select_query_embedding_picks_best_iou():
    preds = _scene_pred([BOX_A, FAR], [0.9, 0.9], [_unit(1, 0), _unit(0, 1)])
    emb = select_query_embedding(preds, np.array(BOX_A))
    assert np.array_equal(emb, _unit(1, 0))


def test_select_query_embedding_fails_below_half_iou():
    preds = _scene_pred([FAR], [0.9], [_unit(1, 0)])
    assert select_query_embedding(preds, np.array(BOX_A)) is None


def test_select_query_embedding_tie_takes_lowest_index():
    preds = _scene_pred([BOX_A, BOX_A], [0.5, 0.9], [_unit(1, 0), _unit(0, 1)])
    emb = select_query_embedding(preds, np.array(BOX_A))
    assert np.array_equal(emb, _unit(1, 0))


def _single_positive_gallery(positive_rank: int, n: int = 3):
    """Gallery with n proposals in one scene; exactly one overlaps the GT.

    positive_rank is the 1-based similarity rank of the positive proposal.
    """
    query_emb = _unit(1.0, 0.0)
    sims = np.linspace(0.9, 0.1, n)
    embeds, boxes = [], []
    for rank in range(n):
        s = sims[rank]
        embeds.append(np.array([s, np.sqrt(1 - s**2)]))
        boxes.append(BOX_A if rank == positive_rank - 1 else FAR)
    preds = {"g1": _scene_pred(boxes, np.full(n, 0.9), embeds)}
    anns = {"g1": (np.array([BOX_A]), np.array([7])),
            "q": (np.array([BOX_B]), np.array([7]))}
    preds["q"] = _scene_pred([BOX_B], [0.9], [query_emb])
    index = GalleryIndex(predictions=preds, annotations=anns)
    query = Query(scene_id="q", box=np.array(BOX_B), identity=7, embedding=query_emb)
    return query, index


def test_search_ap_single_positive_first():
    query, index = _single_positive_gallery(positive_rank=1)
    assert search_ap(query, index) == pytest.approx(1.0)


def test_search_ap_single_positive_second():
    query, index = _single_positive_gallery(positive_rank=2)
    assert search_ap(query, index) == pytest.approx(0.5)


def test_search_ap_two_instances_ranks_one_and_three():
    query_emb = _unit(1.0, 0.0)
    sims = [0.9, 0.6, 0.3]
    embeds = [np.array([s, np.sqrt(1 - s**2)]) for s in sims]
    # positives at ranks 1 and 3 live in different scenes
    preds = {
        "g1": _scene_pred([BOX_A, FAR], [0.9, 0.9], [embeds[0], embeds[1]]),
        "g2": _scene_pred([BOX_B], [0.9], [embeds[2]]),
        "q": _scene_pred([BOX_B], [0.9], [query_emb]),
    }
    anns = {
        "g1": (np.array([BOX_A]), np.array([7])),
        "g2": (np.array([BOX_B]), np.array([7])),
        "q": (np.array([BOX_A]), np.array([7])),
    }
    index = GalleryIndex(predictions=preds, annotations=anns)
    query = Query(scene_id="q", box=np.array(BOX_A), identity=7, embedding=query_emb)
    assert search_ap(query, index) == pytest.approx(5 / 6)


def test_search_ap_identity_absent_returns_none():
    query, index = _single_positive_gallery(positive_rank=1)
    query.identity = 99
    assert search_ap(query, index) is None


def test_each_gt_claimed_once():
    # two proposals hitting the same GT: only the higher-ranked one counts
    query_emb = _unit(1.0, 0.0)
    preds = {
        "g1": _scene_pred([BOX_A, BOX_A], [0.9, 0.9],
                          [_unit(0.9, 0.436), _unit(0.8, 0.6)]),
        "q": _scene_pred([BOX_B], [0.9], [query_emb]),
    }
    anns = {"g1": (np.array([BOX_A]), np.array([7])),
            "q": (np.array([BOX_B]), np.array([7]))}
    index = GalleryIndex(predictions=preds, annotations=anns)
    query = Query(scene_id="q", box=np.array(BOX_B), identity=7, embedding=query_emb)
    assert search_ap(query, index) == pytest.approx(1.0)  # 1 GT, hit at rank 1 only


def _perfect_oracle_setup(n_scenes=4, ids_per_scene=2):
    # identities wrap around scenes so each one appears ids_per_scene times
    rng = np.random.default_rng(0)
    id_emb = {k: _unit(*rng.normal(size=8)) for k in range(n_scenes)}
    preds, anns, scenes = {}, {}, []
    for s in range(n_scenes):
        idents = [(s + j) % n_scenes for j in range(ids_per_scene)]
        boxes = [[0.05 + 0.4 * j, 0.1, 0.35 + 0.4 * j, 0.9] for j in range(ids_per_scene)]
        sid = f"s{s}"
        anns[sid] = (np.array(boxes), np.array(idents))
        preds[sid] = _scene_pred(boxes, np.ones(ids_per_scene),
                                 [id_emb[i] for i in idents])
        scenes.append((sid, boxes, idents))
    index = GalleryIndex(predictions=preds, annotations=anns)
    queries = []
    for sid, boxes, idents in scenes:
        for box, ident in zip(boxes, idents):
            queries.append(Query(scene_id=sid, box=np.array(box), identity=ident,
                                 embedding=id_emb[ident]))
    return queries, index


def test_perfect_oracle_scores_one():
    queries, index = _perfect_oracle_setup()
    report = evaluate(queries, index, ks=(1, 5))
    assert report.map == pytest.approx(1.0)
    assert report.cmc[1] == pytest.approx(1.0)
    assert report.map50 == pytest.approx(1.0)
    assert report.num_skipped == 0 and report.num_failed == 0


def test_cmc_non_decreasing_in_k():
    rng = np.random.default_rng(1)
    queries, index = _perfect_oracle_setup()
    for q in queries:  # corrupt embeddings to get imperfect ranking
        q.embedding = _unit(*rng.normal(size=8))
    report = evaluate(queries, index, ks=(1, 2, 3, 5, 7))
    values = [report.cmc[k] for k in (1, 2, 3, 5, 7)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


def test_chance_level_cmc_with_random_embeddings():
    # G scenes, one distinct identity each, one proposal per scene:
    # chance CMC@1 over random rankings is ~ 1/G
    G = 10
    trials = 400
    rng = np.random.default_rng(2)
    hits = 0
    for _ in range(trials):
        preds, anns = {}, {}
        for g in range(G + 1):
            sid = f"s{g}"
            ident = g  # scene g holds identity g
            anns[sid] = (np.array([BOX_A]), np.array([ident if g > 0 else 0]))
            preds[sid] = _scene_pred([BOX_A], [1.0], [_unit(*rng.normal(size=16))])
        # query identity 0 lives in scene s0 (query) and also plant it in s1
        anns["s1"] = (np.array([BOX_A]), np.array([0]))
        index = GalleryIndex(predictions=preds, annotations=anns)
        query = Query(scene_id="s0", box=np.array(BOX_A), identity=0,
                      embedding=_unit(*rng.normal(size=16)))
        report = evaluate([query], index, ks=(1,))
        hits += report.cmc[1]
    rate = hits / trials
    p = 1 / G
    se = np.sqrt(p * (1 - p) / trials)
    assert abs(rate - p) < 3 * se + 1e-9


def test_map_invariant_to_scene_order():
    queries, index = _perfect_oracle_setup()
    rng = np.random.default_rng(3)
    for q in queries:
        q.embedding = _unit(*rng.normal(size=8))
    base = evaluate(queries, index, ks=(1,))
    relabeled = {f"z{k}": v for k, v in index.predictions.items()}
    relabeled_ann = {f"z{k}": v for k, v in index.annotations.items()}
    for q in queries:
        q.scene_id = f"z{q.scene_id}"
    shuffled = evaluate(queries, GalleryIndex(relabeled, relabeled_ann), ks=(1,))
    assert shuffled.map == pytest.approx(base.map)


def test_failed_query_counts_as_zero():
    query, index = _single_positive_gallery(positive_rank=1)
    query.embedding = None
    query.failed = True
    report = evaluate([query], index, ks=(1,))
    assert report.num_failed == 1
    assert report.map == 0.0 and report.cmc[1] == 0.0


def test_skipped_query_excluded():
    query, index = _single_positive_gallery(positive_rank=1)
    query.identity = 404
    with pytest.warns(UserWarning):
        report = evaluate([query], index, ks=(1,))
    assert report.num_skipped == 1 and report.num_queries == 0


def test_detection_map50_perfect_predictions():
    queries, index = _perfect_oracle_setup()
    assert detection_map50(index) == pytest.approx(1.0)


def test_detection_map50_half():
    # two GTs, one detected at high score, one FP at higher score than a TP
    preds = {"s0": _scene_pred([BOX_A, FAR], [0.9, 0.8], [_unit(1, 0), _unit(0, 1)])}
    anns = {"s0": (np.array([BOX_A, BOX_B]), np.array([1, 2]))}
    index = GalleryIndex(predictions=preds, annotations=anns)
    # recall reaches 1/2 with precision 1 at rank 1; AP = 0.5
    assert detection_map50(index) == pytest.approx(0.5)


def test_gallery_sweep_deterministic_and_monotone_structure():
    queries, index = _perfect_oracle_setup(n_scenes=6)
    a = gallery_sweep(queries, index, sizes=[2, 4], seed=5)
    b = gallery_sweep(queries, index, sizes=[2, 4], seed=5)
    assert a.keys() == b.keys()
    for size in a:
        assert a[size].map == b[size].map
    with pytest.raises(ConfigError):
        gallery_sweep(queries, index, sizes=[100], seed=0)


def test_save_report_emits_files(tmp_path):
    report = EvalReport(map=0.5, cmc={1: 0.4, 5: 0.6}, map50=0.7, num_queries=10,
                        per_step={1: {"map": 0.3, "map50": 0.5, "cmc1": 0.2},
                                  8: {"map": 0.5, "map50": 0.7, "cmc1": 0.4}})
    save_report(report, tmp_path)
    assert (tmp_path / "report.json").exists()
    assert (tmp_path / "report.csv").exists()
    assert (tmp_path / "report_vs_step.png").exists()
    loaded = (tmp_path / "report.json").read_text()
    assert '"map": 0.5' in loaded
