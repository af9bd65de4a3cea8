"""Analyses: taxonomy oracle, attention maps, alignment, infill tables."""

import numpy as np
import pytest

from objattn import analysis
from objattn.analysis import (TaxonomyReport, classify_counterfactual,
                              cls_object_attention, counterfactual_taxonomy,
                              fit_probe, word_object_attention)
from objattn.harness import TrainConfig, build_pool, generate_episodes, train
from objattn.model import (AttentionTrace, ModelConfig, assemble_inputs,
                           global_forward, init_model_params)
from objattn.numerics import Tensor


def collision_eps(n, seed=0, mix=None):
    over = {"render": "false", "num_frames": "6", "extra_frames": "4",
            "num_objects": "3", "n_slots": "3"}
    eps = generate_episodes("collision-qa", n, seed, over, render=False)
    return eps


def test_taxonomy_matches_generator_bookkeeping():
    eps = collision_eps(150)
    for ep in eps:
        if ep.category == "counterfactual":
            assert classify_counterfactual(ep) == ep.annotations["bucket"]


def test_taxonomy_report_partitions():
    eps = collision_eps(150)
    rep = counterfactual_taxonomy(eps)
    rep.validate()
    assert sum(rep.counts.values()) == rep.total
    assert abs(sum(rep.fractions.values()) - 1.0) < 1e-9


def test_taxonomy_per_bucket_accuracy():
    eps = [ep for ep in collision_eps(150) if ep.category == "counterfactual"]
    preds = [i % 2 == 0 for i in range(len(eps))]
    rep = counterfactual_taxonomy(eps, predictions=preds)
    assert set(rep.accuracy) <= {"disconnected", "descriptive", "hard"}
    with pytest.raises(ValueError):
        counterfactual_taxonomy(eps, predictions=[True])


def test_taxonomy_requires_annotations():
    eps = collision_eps(50)
    cf = next(ep for ep in eps if ep.category == "counterfactual")
    del cf.annotations["removed"]
    with pytest.raises(ValueError):
        classify_counterfactual(cf)


def _trace_for(weights, kinds, frames, slots, word_pos):
    return AttentionTrace(weights=[weights], positions=None, kinds=kinds,
                          frames=np.array(frames), slots=np.array(slots),
                          word_pos=np.array(word_pos))


def test_word_object_attention_tie_breaks_low_slot():
    # 2 objects (frame 0), 1 word, cls; uniform attention
    L = 4
    w = np.full((1, 1, L, L), 0.25)
    trace = _trace_for(w, ["object", "object", "word", "cls"],
                       [0, 0, -1, -1], [0, 1, -1, -1], [-1, -1, 0, -1])
    assert word_object_attention(trace) == {0: 0}


def test_word_object_attention_follows_weights():
    L = 4
    w = np.zeros((1, 1, L, L))
    w[0, 0, 1, 2] = 0.9   # object slot 1 attends to the word strongly
    w[0, 0, 0, 2] = 0.1
    trace = _trace_for(w, ["object", "object", "word", "cls"],
                       [0, 0, -1, -1], [0, 1, -1, -1], [-1, -1, 0, -1])
    assert word_object_attention(trace) == {0: 1}


def test_cls_object_attention_top_k():
    L = 5   # 2 frames x 2 slots + cls
    w = np.zeros((1, 1, L, L))
    w[0, 0, 4] = [0.1, 0.4, 0.3, 0.2, 0.0]
    trace = _trace_for(w, ["object"] * 4 + ["cls"],
                       [0, 0, 1, 1, -1], [0, 1, 0, 1, -1],
                       [-1] * 5)
    out = cls_object_attention(trace, k=2)
    assert out[0] == [(1, 0.4), (0, 0.1)]
    assert out[1] == [(0, 0.3), (1, 0.2)]
    # k larger than the slot count returns every slot
    assert len(cls_object_attention(trace, k=9)[0]) == 2


def test_attention_layer_head_bounds():
    trace = _trace_for(np.full((1, 1, 2, 2), 0.5), ["object", "cls"],
                       [0, -1], [0, -1], [-1, -1])
    with pytest.raises(ValueError):
        word_object_attention(trace, layer=3)
    with pytest.raises(ValueError):
        word_object_attention(trace, head=5)


def _tiny_run(task="blicket", **kw):
    base = dict(task=task, gen_count=60, steps=4, eval_every=4, log_every=4,
                batch_sup=4, batch_unsup=4,
                model=ModelConfig(n_layers=1, n_heads=2, d=16))
    base.update(kw)
    cfg = TrainConfig(**base)
    cfg.gen_overrides["render"] = "false"
    params, _, _ = train(cfg)
    return params, cfg


def test_alignment_identity_is_exactly_zero():
    params, cfg = _tiny_run()
    eps = generate_episodes("blicket", 5, 9, {"render": "false"},
                            render=False)
    rep = analysis.alignment_report(params, cfg, eps)
    assert rep["identity_delta"] == 0.0
    assert rep["max_delta"] < 1e-5
    assert rep["labels_agree"] == 1.0


def test_infill_report_offsets_and_probe():
    params, cfg = _tiny_run(task="snitch")
    eps = generate_episodes("snitch", 6, 3, {"render": "false"}, render=False)
    rep = analysis.infill_report(params, cfg, eps)
    assert set(rep["per_offset_l2"]) and min(rep["per_offset_l2"]) == 1
    assert all(v >= 0 for v in rep["per_offset_l2"].values())
    probe = analysis.infill_report(params, cfg, eps, use_probe=True)
    assert probe["probe"] is True


def test_fit_probe_recovers_affine_map():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(6, 3))
    b = rng.normal(size=3)
    X = rng.normal(size=(50, 6))
    Y = X @ W + b
    W2, b2 = fit_probe(X, Y)
    assert np.allclose(W2, W, atol=1e-8)
    assert np.allclose(b2, b, atol=1e-8)


def test_perfect_predictor_zero_infill():
    X = np.random.default_rng(0).normal(size=(20, 4))
    W, b = fit_probe(X, X @ np.eye(4))
    err = ((X @ W + b - X) ** 2).sum()
    assert err < 1e-16


def test_word_object_attention_total_over_words():
    params, cfg = _tiny_run()
    eps = generate_episodes("blicket", 1, 5, {"render": "false"},
                            render=False)
    pool = build_pool(eps, cfg)
    seq = assemble_inputs(Tensor(pool.mu[:1]), pool.words[:1], params,
                          cfg.model)
    _, _, trace = global_forward(seq, params, cfg.model, collect_trace=True)
    mapping = word_object_attention(trace)
    assert sorted(mapping) == list(range(pool.words.shape[1]))
    assert all(0 <= s < eps[0].n_slots for s in mapping.values())
