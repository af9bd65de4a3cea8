"""Transformer core: assembly, attention modes, heads, structural laws."""

import numpy as np
import pytest

from objattn import numerics as nm
from objattn import model as M
from objattn.model import (ModelConfig, assemble_inputs, binary_cross_entropy,
                           cross_entropy, global_forward, head_choice,
                           head_descriptive, head_grid, head_ternary,
                           hierarchical_forward, init_hierarchical_merge,
                           init_model_params, mlp_baseline_forward,
                           relative_encoding)
from objattn.numerics import Tensor, finite_diff_check


@pytest.fixture(autouse=True)
def _float64():
    with nm.use_dtype("float64"):
        yield


def tiny_cfg(**kw):
    base = dict(n_layers=1, n_heads=2, d=4, head_hidden=8,
                answer_vocab=8, vocab_size=16)
    base.update(kw)
    return ModelConfig(**base)


def make_inputs(cfg, B=2, F=3, N=2, W=2, seed=0):
    rng = np.random.default_rng(seed)
    mu = Tensor(rng.normal(size=(B, F, N, cfg.d)))
    wids = rng.integers(0, cfg.vocab_size, size=(B, W))
    return mu, wids


def test_width_is_heads_times_d():
    assert ModelConfig(n_heads=10, d=16).width == 160


def test_assemble_layout_and_tags():
    cfg = tiny_cfg()
    params = init_model_params(cfg, 0)
    mu, wids = make_inputs(cfg)
    seq = assemble_inputs(mu, wids, params, cfg)
    F, N, W = 3, 2, 2
    assert seq.vectors.shape == (2, F * N + W + 1, cfg.d + 2)
    assert seq.kinds == ["object"] * 6 + ["word"] * 2 + ["cls"]
    # modality tags: objects (1,0), words (0,1), cls (0,0)
    assert np.array_equal(seq.vectors.data[0, 0, -2:], [1.0, 0.0])
    assert np.array_equal(seq.vectors.data[0, 6, -2:], [0.0, 1.0])
    assert np.array_equal(seq.vectors.data[0, 8, -2:], [0.0, 0.0])
    # frame-granular positions: slots of a frame share one position
    assert seq.positions.tolist() == [0, 0, 1, 1, 2, 2, 3, 4, 5]


def test_assemble_rejects_bad_tokens():
    cfg = tiny_cfg()
    params = init_model_params(cfg, 0)
    mu, _ = make_inputs(cfg)
    with pytest.raises(ValueError):
        assemble_inputs(mu, np.array([[99, 0], [0, 0]]), params, cfg)


def test_relative_encoding_shape_and_parity():
    out = relative_encoding(np.array([-2, 0, 3]), 8)
    assert out.shape == (3, 8)
    assert np.allclose(out[1, 0::2], 0.0)   # sin(0)
    assert np.allclose(out[1, 1::2], 1.0)   # cos(0)


def test_attention_rows_sum_to_one():
    cfg = tiny_cfg(n_layers=2)
    params = init_model_params(cfg, 0)
    mu, wids = make_inputs(cfg)
    seq = assemble_inputs(mu, wids, params, cfg)
    _, _, trace = global_forward(seq, params, cfg, collect_trace=True)
    assert trace.n_layers == 2
    for w in trace.weights:
        assert np.all(w >= 0)
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_within_frame_slot_permutation_invariance():
    cfg = tiny_cfg()
    params = init_model_params(cfg, 0)
    mu, wids = make_inputs(cfg, B=1)
    rng = np.random.default_rng(7)
    perm = np.stack([rng.permutation(2) for _ in range(3)])
    mu_p = Tensor(np.stack([mu.data[0, t][perm[t]] for t in range(3)])[None])
    cls_a, mup_a, _ = global_forward(assemble_inputs(mu, wids, params, cfg),
                                     params, cfg)
    cls_b, mup_b, _ = global_forward(assemble_inputs(mu_p, wids, params, cfg),
                                     params, cfg)
    assert np.max(np.abs(cls_a.data - cls_b.data)) < 1e-10
    # mu' permutes exactly with the slots
    for t in range(3):
        assert np.allclose(mup_a.data[0, t][perm[t]], mup_b.data[0, t],
                           atol=1e-10)


def test_word_order_is_not_invariant():
    """Words get distinct positions, so swapping them changes the output."""
    cfg = tiny_cfg()
    params = init_model_params(cfg, 0)
    mu, _ = make_inputs(cfg)
    a = global_forward(assemble_inputs(mu, np.array([[1, 2], [1, 2]]),
                                       params, cfg), params, cfg)[0]
    b = global_forward(assemble_inputs(mu, np.array([[2, 1], [2, 1]]),
                                       params, cfg), params, cfg)[0]
    assert np.max(np.abs(a.data - b.data)) > 1e-8


def test_no_words_matches_object_only_assembly():
    cfg = tiny_cfg()
    params = init_model_params(cfg, 0)
    mu, _ = make_inputs(cfg)
    seq = assemble_inputs(mu, np.zeros((2, 0), dtype=np.int64), params, cfg)
    assert seq.num_words == 0
    cls_out, mup, _ = global_forward(seq, params, cfg)
    assert cls_out.shape == (2, cfg.width)


def test_full_tiny_model_gradients():
    cfg = tiny_cfg()
    params = init_model_params(cfg, 0)
    mu, wids = make_inputs(cfg, B=1)

    def f(binds):
        seq = assemble_inputs(mu, wids, binds, cfg)
        cls_out, mup, _ = global_forward(seq, binds, cfg)
        return (cls_out ** 2).sum() + 0.1 * (mup ** 2).sum()

    for leaf in ("layer0.attn.wr", "layer0.attn.wq", "layer0.ffn.fc1.w",
                 "embed.words", "embed.cls", "proj.w", "final_ln.g"):
        assert finite_diff_check(f, params, leaf) < 1e-4, leaf


def test_hierarchical_forward_shapes():
    cfg = tiny_cfg(n_layers=2, attention_mode="hierarchical")
    params = init_model_params(cfg, 0)
    init_hierarchical_merge(params, cfg, n_slots=2)
    mu, wids = make_inputs(cfg)
    seq = assemble_inputs(mu, wids, params, cfg)
    cls_out, trace = hierarchical_forward(seq, params, cfg,
                                          collect_trace=True)
    assert cls_out.shape == (2, cfg.width)
    # stage-2 sequence: F summaries + W words + CLS
    assert trace.weights[0].shape[-1] == 3 + 2 + 1


def test_mlp_baseline_fixed_length():
    cfg = tiny_cfg(attention_mode="mlp-baseline", mlp_max_len=9)
    params = init_model_params(cfg, 0)
    mu, wids = make_inputs(cfg)
    seq = assemble_inputs(mu, wids, params, cfg)
    out = mlp_baseline_forward(seq, params, cfg)
    assert out.shape == (2, cfg.width)
    short = assemble_inputs(mu, wids[:, :1], params, cfg)
    with pytest.raises(nm.ShapeError):
        mlp_baseline_forward(short, params, cfg)


def test_heads_shapes_and_normalization():
    cfg = tiny_cfg(grid=4)
    params = init_model_params(cfg, 0)
    rng = np.random.default_rng(0)
    cls_out = Tensor(rng.normal(size=(3, cfg.width)))
    assert np.allclose(head_descriptive(cls_out, params).data.sum(-1), 1.0)
    assert head_choice(cls_out, params).shape == (3,)
    assert np.allclose(head_ternary(cls_out, params).data.sum(-1), 1.0)
    dist, _ = head_grid(cls_out, params, 4)
    assert dist.shape == (3, 16)


def test_head_grid_expected_l1_uniform_corner():
    """Uniform distribution over a 4x4 grid, truth at a corner: the mean
    Manhattan distance is 3.0 (computable in closed form)."""
    cfg = tiny_cfg(grid=4)
    params = init_model_params(cfg, 0)
    # zero the head so the logits (bias 0) are uniform
    params["head.grid.fc2.w"].data[:] = 0.0
    cls_out = Tensor(np.zeros((1, cfg.width)))
    _, l1 = head_grid(cls_out, params, 4, truth_cell=np.array([0]))
    rows, cols = np.arange(16) // 4, np.arange(16) % 4
    expect = (np.abs(rows) + np.abs(cols)).mean()
    assert expect == 3.0
    assert np.allclose(l1.data, 3.0)


def test_cross_entropy_oracle():
    logits = Tensor(np.log(np.array([[0.5, 0.25, 0.25]])))
    assert np.allclose(cross_entropy(logits, [0]).data, np.log(2.0))


def test_binary_cross_entropy_oracle_and_gradient():
    assert np.allclose(binary_cross_entropy(Tensor(np.zeros(4)),
                                            [0, 1, 0, 1]).data, np.log(2.0))
    rng = np.random.default_rng(0)
    binds = {"z": nm.parameter(rng.normal(size=6), name="z")}
    err = finite_diff_check(
        lambda b: binary_cross_entropy(b["z"], [1, 0, 1, 0, 1, 1]), binds, "z")
    assert err < 1e-4


def test_zero_input_is_relu_of_bias():
    cfg = tiny_cfg()
    params = init_model_params(cfg, 0)
    zero = Tensor(np.zeros((1, 1, cfg.d + 2)))
    from objattn.model import InputSequence, project_inputs
    seq = InputSequence(vectors=zero, positions=np.zeros(1, np.int64),
                        modality=np.zeros((1, 2)), kinds=["cls"],
                        frames=-np.ones(1, np.int64),
                        slots=-np.ones(1, np.int64),
                        word_pos=-np.ones(1, np.int64))
    out = project_inputs(seq, params)
    assert np.allclose(out.data[0, 0], np.maximum(params["proj.b"].data, 0.0))
