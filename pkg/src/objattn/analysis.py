"""Attention-trace analyses, counterfactual taxonomy, alignment and infill
reports.

All analyses are read-only over a trained run: they re-run forward passes
with trace collection enabled, or re-derive labels from the generator's
causal annotations, and report JSON-friendly structures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import selfsup
from .encoder import oracle_encode
from .harness import (TASK_WORD_LEN, TrainConfig, build_pool, forward_cls,
                      episode_label)
from .model import (AttentionTrace, head_choice_logits,
                    head_descriptive_logits, head_grid_logits,
                    head_ternary_logits)
from .numerics import Tensor
from .scenes import Episode


@dataclass
class TaxonomyReport:
    """Counterfactual questions split into disjoint difficulty buckets."""

    counts: dict = field(default_factory=dict)
    fractions: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)   # per bucket, if preds given
    total: int = 0

    def validate(self) -> None:
        if self.total:
            if sum(self.counts.values()) != self.total:
                raise ValueError("bucket counts must partition the questions")
            if abs(sum(self.fractions.values()) - 1.0) > 1e-9:
                raise ValueError("bucket fractions must sum to 1")


BUCKETS = ("disconnected", "descriptive", "hard")


def classify_counterfactual(ep: Episode) -> str:
    """Re-derive the difficulty bucket from the causal annotations alone.

    Disconnected: the removed object collides with nothing in the factual
    run, so removal cannot change any event. Descriptive: every choice's
    counterfactual truth equals its factual truth, so answering "as if
    descriptive" suffices. Hard: the rest.
    """
    ann = ep.annotations
    if ep.category != "counterfactual":
        raise ValueError("episode is not a counterfactual question")
    for key in ("removed", "events", "factual_choice_answers"):
        if key not in ann:
            raise ValueError(f"missing causal annotation {key!r}")
    removed = ann["removed"]
    connected = any(removed in (i, j) for _, i, j in ann["events"])
    if not connected:
        return "disconnected"
    if list(ep.answer) == [bool(v) for v in ann["factual_choice_answers"]]:
        return "descriptive"
    return "hard"


def counterfactual_taxonomy(episodes: list[Episode],
                            predictions: list[bool] | None = None
                            ) -> TaxonomyReport:
    """Bucket all counterfactual questions; optionally add model accuracy.

    ``predictions`` aligns with the counterfactual subset of ``episodes``
    (one bool per question: all choices answered correctly).
    """
    cf = [ep for ep in episodes if ep.category == "counterfactual"]
    report = TaxonomyReport(total=len(cf))
    buckets = [classify_counterfactual(ep) for ep in cf]
    for name in BUCKETS:
        report.counts[name] = sum(b == name for b in buckets)
        report.fractions[name] = (report.counts[name] / len(cf)) if cf else 0.0
    if predictions is not None:
        if len(predictions) != len(cf):
            raise ValueError("one prediction per counterfactual question")
        for name in BUCKETS:
            hits = [p for p, b in zip(predictions, buckets) if b == name]
            if hits:
                report.accuracy[name] = float(np.mean(hits))
    report.validate()
    return report


# -- attention analyses -------------------------------------------------------------

def _head_weights(trace: AttentionTrace, layer: int, head: int) -> np.ndarray:
    if not trace.weights:
        raise ValueError("trace holds no attention weights")
    n_layers = trace.n_layers
    if not -n_layers <= layer < n_layers:
        raise ValueError(f"layer {layer} out of range for {n_layers} layers")
    w = trace.weights[layer]
    if not 0 <= head < w.shape[1]:
        raise ValueError(f"head {head} out of range")
    return w[0, head]   # analyses run on single-episode batches


def word_object_attention(trace: AttentionTrace, layer: int = -1,
                          head: int = 0) -> dict[int, int]:
    """For each word, the object slot that attends to it most strongly.

    Scans object-row attention onto each word column at the chosen
    layer/head, maximizing over all object elements (any frame); ties go
    to the lowest slot index because argmax takes the first maximum and
    elements are laid out frame-major with slots ascending.
    """
    att = _head_weights(trace, layer, head)
    obj_rows = np.flatnonzero(np.array(trace.slots) >= 0)
    word_cols = np.flatnonzero(np.array(trace.word_pos) >= 0)
    out: dict[int, int] = {}
    for col in word_cols:
        weights = att[obj_rows, col]
        best = obj_rows[int(np.argmax(weights))]
        out[int(trace.word_pos[col])] = int(trace.slots[best])
    return out


def cls_object_attention(trace: AttentionTrace, layer: int = -1,
                         head: int = 0, k: int = 2
                         ) -> dict[int, list[tuple[int, float]]]:
    """Per frame, the k object slots the CLS row attends to most.

    Returns frame -> [(slot, weight), ...] with weights nonincreasing;
    fewer than k entries only when the frame has fewer slots.
    """
    att = _head_weights(trace, layer, head)
    kinds = list(trace.kinds)
    cls_row = kinds.index("cls")
    out: dict[int, list[tuple[int, float]]] = {}
    frames = np.array(trace.frames)
    slots = np.array(trace.slots)
    for f in sorted({int(t) for t in frames if t >= 0}):
        cols = np.flatnonzero(frames == f)
        weights = att[cls_row, cols]
        order = np.argsort(-weights, kind="stable")[:k]
        out[f] = [(int(slots[cols[i]]), float(weights[i])) for i in order]
    return out


# -- alignment (slot-permutation robustness) -----------------------------------------

def predict_label(params, cfg: TrainConfig, mu: Tensor,
                  word_ids: np.ndarray) -> int:
    """Episode-level predicted label index for the run's task head."""
    cls_out, _, _ = forward_cls(mu, word_ids, params, cfg.model)
    head = {"snitch": head_grid_logits, "blicket": head_ternary_logits,
            "collision-qa": head_descriptive_logits}[cfg.task]
    return int(head(cls_out, params).data.argmax(axis=-1)[0])


def alignment_report(params, cfg: TrainConfig, episodes: list[Episode],
                     seed: int = 0) -> dict:
    """Forward-pass invariance to per-frame slot shuffles (oracle encoder).

    Compares cls_out and the predicted label between identity-slot and
    shuffled-slot encodings of the same episodes; the identity comparison
    is exact by construction and reported as a sanity row.
    """
    width = TASK_WORD_LEN[cfg.task]
    deltas, agree = [], []
    for i, ep in enumerate(episodes):
        words = np.array([ep.question + [0] * (width - len(ep.question))],
                         dtype=np.int64)
        base = oracle_encode(ep, cfg.model.d).mu
        base = Tensor(base.data[None])
        shuf = oracle_encode(ep, cfg.model.d, shuffle=True,
                             seed=seed * 1_000_003 + i).mu
        shuf = Tensor(shuf.data[None])
        cls_a, _, _ = forward_cls(base, words, params, cfg.model)
        cls_b, _, _ = forward_cls(shuf, words, params, cfg.model)
        deltas.append(float(np.max(np.abs(cls_a.data - cls_b.data))))
        agree.append(predict_label(params, cfg, base, words)
                     == predict_label(params, cfg, shuf, words))
    cls_i, _, _ = forward_cls(base, words, params, cfg.model)
    identity_delta = float(np.max(np.abs(cls_a.data - cls_i.data)))
    return {"episodes": len(episodes),
            "max_delta": max(deltas),
            "mean_delta": float(np.mean(deltas)),
            "labels_agree": float(np.mean(agree)),
            "identity_delta": identity_delta}


# -- infill quality -----------------------------------------------------------------

def fit_probe(mu_prime_rows: np.ndarray, mu_rows: np.ndarray):
    """Least-squares affine map mu' -> mu (the post-hoc probe for models
    trained without the auxiliary loss)."""
    X = np.concatenate([mu_prime_rows,
                        np.ones((len(mu_prime_rows), 1))], axis=1)
    sol, *_ = np.linalg.lstsq(X, mu_rows, rcond=None)
    return sol[:-1], sol[-1]   # (W [D, d], b [d])


def infill_report(params, cfg: TrainConfig, episodes: list[Episode],
                  seed: int = 0, use_probe: bool = False) -> dict:
    """Mean squared infill error per target-frame offset, scheme-d masking.

    Offset 1 is the first frame after the hidden buffer. With
    ``use_probe`` the learned map f is replaced by a least-squares probe
    fitted on the same data (for models trained with aux weight 0).
    """
    pool = build_pool(episodes, cfg)
    rng = np.random.default_rng([seed, 0x1F11])
    rows_mu_prime, rows_mu, rows_offset = [], [], []
    for i in range(len(pool)):
        mu = Tensor(pool.mu[i][None])
        _, F, N, _ = mu.shape
        plan = selfsup.sample_mask_plan("d", F, N, rng, buffer=cfg.buffer)
        masked = selfsup.apply_mask(mu, selfsup.stack_plans([plan]))
        _, mu_prime, _ = forward_cls(masked, pool.words[i:i + 1], params,
                                     cfg.model, stop_words=True)
        start = plan.cutoff + plan.buffer
        for t in range(start, F):
            for s in range(N):
                if plan.tau[t, s]:
                    rows_mu_prime.append(mu_prime.data[0, t, s])
                    rows_mu.append(pool.mu[i][t, s])
                    rows_offset.append(t - start + 1)
    mu_prime_rows = np.stack(rows_mu_prime)
    mu_rows = np.stack(rows_mu)
    offsets = np.array(rows_offset)
    if use_probe:
        W, b = fit_probe(mu_prime_rows, mu_rows)
    else:
        W, b = params["aux.f.w"].data, params["aux.f.b"].data
    err = ((mu_prime_rows @ W + b - mu_rows) ** 2).sum(axis=1)
    table = {int(o): float(err[offsets == o].mean())
             for o in sorted(set(offsets.tolist()))}
    return {"per_offset_l2": table, "targets": len(err),
            "probe": bool(use_probe)}
