"""Transformer core: input assembly, global/hierarchical attention, heads.

Object slots and question words share one sequence, distinguished by a
two-dimensional modality tag; a trainable CLS element is appended and its
transformed value feeds the answer heads. Attention uses relative
sinusoidal position encoding at every layer, with positions granular at
the frame level (all slots of a frame share a position) so that
within-frame slot permutations cannot affect the CLS output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .numerics import Tensor


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d: int = 16                    # slot/word embedding size
    head_hidden: int = 128
    attention_mode: str = "global"  # global | hierarchical | mlp-baseline
    dropout: float = 0.0
    vocab_size: int = 64
    answer_vocab: int = 64         # descriptive head output size
    grid: int = 4                  # grid head output is grid**2 cells
    mlp_width: int = 256
    mlp_max_len: int = 0           # fixed sequence length for the MLP baseline

    @property
    def width(self) -> int:
        return self.n_heads * self.d

    def validate(self) -> None:
        if self.width % self.n_heads:
            raise ValueError("model width must divide across heads")
        if self.head_hidden <= 0 or self.d <= 0:
            raise ValueError("sizes must be positive")


@dataclass
class InputSequence:
    """Assembled model input: tagged vectors plus per-element metadata."""

    vectors: Tensor                # [B, L, d+2]
    positions: np.ndarray          # [L] int, frame/word index line
    modality: np.ndarray           # [L, 2] one-hot tags
    kinds: list[str]               # object | word | cls per element
    frames: np.ndarray             # [L] frame index, -1 for words/CLS
    slots: np.ndarray              # [L] slot index, -1 for words/CLS
    word_pos: np.ndarray           # [L] word index, -1 otherwise
    num_frames: int = 0
    n_slots: int = 0
    num_words: int = 0


@dataclass
class AttentionTrace:
    """Per-layer, per-head attention weights with sequence metadata."""

    weights: list[np.ndarray] = field(default_factory=list)  # [B, H, L, L] each
    positions: np.ndarray = None
    kinds: list[str] = None
    frames: np.ndarray = None
    slots: np.ndarray = None
    word_pos: np.ndarray = None

    @property
    def n_layers(self) -> int:
        return len(self.weights)


# -- parameter construction -----------------------------------------------------

def _linear(p, rng, name, fan_in, fan_out, scale=None):
    s = scale if scale is not None else np.sqrt(1.0 / fan_in)
    p[f"{name}.w"] = nm.parameter(rng.normal(0, s, (fan_in, fan_out)),
                                  name=f"{name}.w")
    p[f"{name}.b"] = nm.parameter(np.zeros(fan_out), name=f"{name}.b")


def _layer_params(p, rng, prefix, D, H):
    dh = D // H
    for nm_ in ("wq", "wk", "wv", "wo", "wr"):
        p[f"{prefix}.attn.{nm_}"] = nm.parameter(
            rng.normal(0, np.sqrt(1.0 / D), (D, D)), name=f"{prefix}.attn.{nm_}")
    p[f"{prefix}.attn.u"] = nm.parameter(np.zeros((H, dh)), name=f"{prefix}.attn.u")
    p[f"{prefix}.attn.v"] = nm.parameter(np.zeros((H, dh)), name=f"{prefix}.attn.v")
    for ln in ("ln1", "ln2"):
        p[f"{prefix}.{ln}.g"] = nm.parameter(np.ones(D), name=f"{prefix}.{ln}.g")
        p[f"{prefix}.{ln}.b"] = nm.parameter(np.zeros(D), name=f"{prefix}.{ln}.b")
    _linear(p, rng, f"{prefix}.ffn.fc1", D, 4 * D)
    _linear(p, rng, f"{prefix}.ffn.fc2", 4 * D, D)


def init_model_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    cfg.validate()
    rng = np.random.default_rng([seed, 0x40DE])
    D = cfg.width
    p: dict[str, Tensor] = {}
    p["embed.words"] = nm.parameter(rng.normal(0, 0.5, (cfg.vocab_size, cfg.d)),
                                    name="embed.words")
    p["embed.cls"] = nm.parameter(rng.normal(0, 0.5, cfg.d), name="embed.cls")
    _linear(p, rng, "proj", cfg.d + 2, D)

    if cfg.attention_mode == "global":
        for i in range(cfg.n_layers):
            _layer_params(p, rng, f"layer{i}", D, cfg.n_heads)
    elif cfg.attention_mode == "hierarchical":
        n1 = cfg.n_layers // 2
        for i in range(n1):
            _layer_params(p, rng, f"h1.layer{i}", D, cfg.n_heads)
        for i in range(cfg.n_layers - n1):
            _layer_params(p, rng, f"h2.layer{i}", D, cfg.n_heads)
    elif cfg.attention_mode == "mlp-baseline":
        if cfg.mlp_max_len <= 0:
            raise ValueError("mlp-baseline requires mlp_max_len")
        fan = cfg.mlp_max_len * (cfg.d + 2)
        _linear(p, rng, "mlp.fc0", fan, cfg.mlp_width, scale=np.sqrt(2.0 / fan))
        for i in range(1, 4):
            _linear(p, rng, f"mlp.fc{i}", cfg.mlp_width, cfg.mlp_width,
                    scale=np.sqrt(2.0 / cfg.mlp_width))
        _linear(p, rng, "mlp.out", cfg.mlp_width, D)
    else:
        raise ValueError(f"unknown attention mode {cfg.attention_mode!r}")

    if cfg.attention_mode != "mlp-baseline":
        p["final_ln.g"] = nm.parameter(np.ones(D), name="final_ln.g")
        p["final_ln.b"] = nm.parameter(np.zeros(D), name="final_ln.b")

    _linear(p, rng, "head.desc.fc1", D, cfg.head_hidden)
    _linear(p, rng, "head.desc.fc2", cfg.head_hidden, cfg.answer_vocab)
    _linear(p, rng, "head.choice.fc1", D, cfg.head_hidden)
    _linear(p, rng, "head.choice.fc2", cfg.head_hidden, 1)
    _linear(p, rng, "head.grid.fc1", D, cfg.head_hidden)
    _linear(p, rng, "head.grid.fc2", cfg.head_hidden, cfg.grid ** 2)
    _linear(p, rng, "head.ternary.fc1", D, cfg.head_hidden)
    _linear(p, rng, "head.ternary.fc2", cfg.head_hidden, 3)
    # aux prediction map f: model width -> slot embedding size (linear)
    _linear(p, rng, "aux.f", D, cfg.d)
    return p


# -- input assembly --------------------------------------------------------------

def assemble_inputs(slots_mu: Tensor, word_ids: np.ndarray,
                    params: dict[str, Tensor], cfg: ModelConfig,
                    stop_word_gradients: bool = False) -> InputSequence:
    """Build the flat sequence: objects frame-major, then words, then CLS.

    ``slots_mu`` is [B, F, N, d]; ``word_ids`` is [B, W] (W may be 0).
    Objects are tagged (1,0), words (0,1) and CLS (0,0). With
    ``stop_word_gradients`` the word and CLS embeddings enter the sequence
    behind stop-gradient edges (the self-supervised path uses this).
    """
    B, F, N, d = slots_mu.shape
    if d != cfg.d:
        raise nm.ShapeError("assemble_inputs", f"slot width {d} != config d {cfg.d}")
    W = word_ids.shape[1] if word_ids.size else 0
    if W and int(word_ids.max()) >= cfg.vocab_size:
        raise ValueError("unknown token id")

    obj = slots_mu.reshape((B, F * N, d))
    obj = nm.pad_last(obj, 0, 2) + nm.Tensor(
        np.concatenate([np.zeros(d), [1.0, 0.0]]))

    parts = [obj]
    if W:
        wtab = params["embed.words"]
        if stop_word_gradients:
            wtab = nm.stop_gradient(wtab)
        wemb = wtab[word_ids]  # [B, W, d]
        wemb = nm.pad_last(wemb, 0, 2) + nm.Tensor(
            np.concatenate([np.zeros(d), [0.0, 1.0]]))
        parts.append(wemb)
    cls = params["embed.cls"]
    if stop_word_gradients:
        cls = nm.stop_gradient(cls)
    cls = nm.pad_last(cls.reshape((1, 1, d)), 0, 2)
    cls = nm.concat([cls] * B, axis=0) if B > 1 else cls
    parts.append(cls)
    vectors = nm.concat(parts, axis=1)

    L = F * N + W + 1
    positions = np.concatenate([np.repeat(np.arange(F), N),
                                F + np.arange(W), [F + W]]).astype(np.int64)
    modality = np.concatenate([np.tile([1.0, 0.0], (F * N, 1)),
                               np.tile([0.0, 1.0], (W, 1)),
                               [[0.0, 0.0]]])
    kinds = ["object"] * (F * N) + ["word"] * W + ["cls"]
    frames = np.concatenate([np.repeat(np.arange(F), N),
                             -np.ones(W + 1)]).astype(np.int64)
    slots = np.concatenate([np.tile(np.arange(N), F),
                            -np.ones(W + 1)]).astype(np.int64)
    word_pos = np.concatenate([-np.ones(F * N), np.arange(W), [-1]]).astype(np.int64)
    return InputSequence(vectors=vectors, positions=positions,
                         modality=modality, kinds=kinds, frames=frames,
                         slots=slots, word_pos=word_pos,
                         num_frames=F, n_slots=N, num_words=W)


def project_inputs(seq: InputSequence, params: dict[str, Tensor]) -> Tensor:
    """Shared affine map into model width, then ReLU."""
    return nm.relu(seq.vectors @ params["proj.w"] + params["proj.b"])


def relative_encoding(offsets: np.ndarray, D: int) -> np.ndarray:
    """Sinusoidal embedding of relative offsets; shape offsets.shape + (D,)."""
    off = np.asarray(offsets, dtype=np.float64)[..., None]
    k = np.arange(D // 2, dtype=np.float64)
    inv = 1.0 / (10000.0 ** (2.0 * k / D))
    ang = off * inv
    out = np.empty(off.shape[:-1] + (D,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out.astype(nm.get_default_dtype())


# -- transformer layers -----------------------------------------------------------

def _attention_layer(x: Tensor, positions: np.ndarray, params, prefix: str,
                     cfg: ModelConfig, trace: Optional[AttentionTrace],
                     rng) -> Tensor:
    B, L, D = x.shape
    H, dh = cfg.n_heads, cfg.width // cfg.n_heads
    h = nm.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])

    def heads(t):
        return nm.transpose(t.reshape((B, L, H, dh)), (0, 2, 1, 3))

    q = heads(h @ params[f"{prefix}.attn.wq"])
    k = heads(h @ params[f"{prefix}.attn.wk"])
    v = heads(h @ params[f"{prefix}.attn.wv"])

    # relative bias: sinusoids for the unique offsets only, then a gather
    rel = positions[:, None] - positions[None, :]            # [L, L]
    offsets, inverse = np.unique(rel, return_inverse=True)
    idx = inverse.reshape(L, L)                              # [L, L] -> offset row
    R = Tensor(relative_encoding(offsets, D))                # [O, D]
    r = (R @ params[f"{prefix}.attn.wr"]).reshape((len(offsets), H, dh))
    r = nm.transpose(r, (1, 2, 0))                           # [H, dh, O]

    u = params[f"{prefix}.attn.u"].reshape((H, 1, dh))
    vbias = params[f"{prefix}.attn.v"].reshape((H, 1, dh))
    content = (q + u) @ nm.swapaxes(k, -1, -2)               # [B, H, L, L]
    per_offset = (q + vbias) @ r                             # [B, H, L, O]
    position = per_offset[:, :, np.arange(L)[:, None], idx]  # [B, H, L, L]
    logits = (content + position) * (1.0 / np.sqrt(dh))
    att = nm.softmax(logits, axis=-1)
    if trace is not None:
        trace.weights.append(att.data.copy())
    att = nm.dropout(att, cfg.dropout, rng)
    out = att @ v                                            # [B, H, L, dh]
    out = nm.transpose(out, (0, 2, 1, 3)).reshape((B, L, D))
    x = x + out @ params[f"{prefix}.attn.wo"]

    h2 = nm.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    ff = nm.gelu(h2 @ params[f"{prefix}.ffn.fc1.w"] + params[f"{prefix}.ffn.fc1.b"])
    ff = nm.dropout(ff, cfg.dropout, rng)
    return x + ff @ params[f"{prefix}.ffn.fc2.w"] + params[f"{prefix}.ffn.fc2.b"]


def global_forward(seq: InputSequence, params: dict[str, Tensor],
                   cfg: ModelConfig, collect_trace: bool = False,
                   rng: np.random.Generator | None = None):
    """Full-sequence self-attention; returns (cls_out, mu_prime, trace)."""
    x = project_inputs(seq, params)
    trace = AttentionTrace(positions=seq.positions, kinds=seq.kinds,
                           frames=seq.frames, slots=seq.slots,
                           word_pos=seq.word_pos) if collect_trace else None
    for i in range(cfg.n_layers):
        x = _attention_layer(x, seq.positions, params, f"layer{i}", cfg,
                             trace, rng)
    if cfg.n_layers > 0:
        x = nm.layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    B, L, D = x.shape
    F, N = seq.num_frames, seq.n_slots
    mu_prime = x[:, :F * N].reshape((B, F, N, D))
    cls_out = x[:, L - 1]
    return cls_out, mu_prime, trace


def hierarchical_forward(seq: InputSequence, params: dict[str, Tensor],
                         cfg: ModelConfig, collect_trace: bool = False,
                         rng: np.random.Generator | None = None):
    """Within-frame attention, then cross-frame attention over summaries.

    Stage one attends among the slots of each frame independently; the
    per-frame slot outputs are concatenated, mapped back to model width,
    and joined by the words and CLS for stage two.
    """
    B, F, N = seq.vectors.shape[0], seq.num_frames, seq.n_slots
    W = seq.num_words
    D = cfg.width
    x = project_inputs(seq, params)
    obj = x[:, :F * N].reshape((B * F, N, D))
    zero_pos = np.zeros(N, dtype=np.int64)  # all slots share one position
    n1 = cfg.n_layers // 2
    trace = AttentionTrace(positions=seq.positions, kinds=seq.kinds,
                           frames=seq.frames, slots=seq.slots,
                           word_pos=seq.word_pos) if collect_trace else None
    for i in range(n1):
        obj = _attention_layer(obj, zero_pos, params, f"h1.layer{i}", cfg,
                               None, rng)
    summaries = obj.reshape((B, F, N * D)) @ params["h1.merge.w"] \
        + params["h1.merge.b"]
    rest = x[:, F * N:]                       # words + CLS at model width
    x2 = nm.concat([summaries, rest], axis=1)
    pos2 = np.concatenate([np.arange(F), F + np.arange(W), [F + W]]).astype(np.int64)
    for i in range(cfg.n_layers - n1):
        x2 = _attention_layer(x2, pos2, params, f"h2.layer{i}", cfg, trace, rng)
    x2 = nm.layer_norm(x2, params["final_ln.g"], params["final_ln.b"])
    cls_out = x2[:, F + W]
    return cls_out, trace


def init_hierarchical_merge(params: dict[str, Tensor], cfg: ModelConfig,
                            n_slots: int, seed: int = 0) -> None:
    """The stage-1 merge map depends on the slot count, so it is created
    once the dataset's N_o is known."""
    if "h1.merge.w" in params:
        return
    rng = np.random.default_rng([seed, 0x4143])
    D = cfg.width
    params["h1.merge.w"] = nm.parameter(
        rng.normal(0, np.sqrt(1.0 / (n_slots * D)), (n_slots * D, D)),
        name="h1.merge.w")
    params["h1.merge.b"] = nm.parameter(np.zeros(D), name="h1.merge.b")


def mlp_baseline_forward(seq: InputSequence, params: dict[str, Tensor],
                         cfg: ModelConfig) -> Tensor:
    """Flattened sequence through four fully connected ReLU layers."""
    B, L, dw = seq.vectors.shape
    if L != cfg.mlp_max_len:
        raise nm.ShapeError("mlp_baseline",
                            f"sequence length {L} != fixed {cfg.mlp_max_len}"
                            " (pad to max)")
    h = seq.vectors.reshape((B, L * dw))
    for i in range(4):
        h = nm.relu(h @ params[f"mlp.fc{i}.w"] + params[f"mlp.fc{i}.b"])
    return h @ params["mlp.out.w"] + params["mlp.out.b"]


# -- answer heads ------------------------------------------------------------------

def _head(cls_out: Tensor, params, name: str) -> Tensor:
    h = nm.relu(cls_out @ params[f"head.{name}.fc1.w"] + params[f"head.{name}.fc1.b"])
    return h @ params[f"head.{name}.fc2.w"] + params[f"head.{name}.fc2.b"]


def head_descriptive(cls_out: Tensor, params) -> Tensor:
    """Distribution over the answer vocabulary."""
    return nm.softmax(_head(cls_out, params, "desc"), axis=-1)


def head_descriptive_logits(cls_out: Tensor, params) -> Tensor:
    return _head(cls_out, params, "desc")


def head_choice(cls_out: Tensor, params) -> Tensor:
    """Probability that the included choice is true."""
    return nm.sigmoid(_head(cls_out, params, "choice").reshape((-1,)))


def head_choice_logits(cls_out: Tensor, params) -> Tensor:
    return _head(cls_out, params, "choice").reshape((-1,))


def head_grid_logits(cls_out: Tensor, params) -> Tensor:
    return _head(cls_out, params, "grid")


def head_grid(cls_out: Tensor, params, G: int,
              truth_cell: np.ndarray | None = None):
    """Distribution over the G*G cells and, given truth cells, the
    probability-weighted Manhattan distance (a differentiable L1 surrogate)."""
    dist = nm.softmax(_head(cls_out, params, "grid"), axis=-1)
    if truth_cell is None:
        return dist, None
    cells = np.arange(G * G)
    rows, cols = cells // G, cells % G
    tr, tc = truth_cell // G, truth_cell % G
    l1 = (np.abs(rows[None, :] - tr[:, None])
          + np.abs(cols[None, :] - tc[:, None])).astype(nm.get_default_dtype())
    expected = (dist * Tensor(l1)).sum(axis=-1)
    return dist, expected


def head_ternary(cls_out: Tensor, params) -> Tensor:
    """Distribution over {yes, no, undetermined}."""
    return nm.softmax(_head(cls_out, params, "ternary"), axis=-1)


def head_ternary_logits(cls_out: Tensor, params) -> Tensor:
    return _head(cls_out, params, "ternary")


# -- losses -------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean NLL of integer labels under softmax(logits)."""
    logp = nm.log_softmax(logits, axis=-1)
    rows = np.arange(len(labels))
    return -logp[rows, np.asarray(labels)].mean()


def binary_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean BCE from logits; labels in {0, 1}."""
    y = np.asarray(labels, dtype=nm.get_default_dtype())
    # softplus(z) - z*y, with softplus(z) = max(z,0) + log(1 + exp(-|z|))
    absz = nm.relu(logits) + nm.relu(-logits)
    sp = nm.relu(logits) + nm.log(1.0 + nm.exp(-absz))
    return (sp - logits * Tensor(y)).mean()
