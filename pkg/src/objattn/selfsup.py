"""Masking schemes and auxiliary losses for self-supervised training.

A mask plan pairs keep-indicators m (0 hides a slot's embedding from the
model) with target-indicators tau (1 marks a slot the model must predict).
Targets are always hidden; the buffered schemes additionally hide a
contiguous block of frames that is neither context nor target.

Schemes:
  a  exactly one slot hidden (and targeted) per frame
  b  each slot hidden independently with probability p; all hidden slots
     are targets
  c  prediction, single-slot targets: context before a hidden buffer,
     targets are one random slot in each frame after the buffer
  d  prediction, whole-scene targets: as c but every slot after the
     buffer is a target
  e  infilling, single-slot targets: context surrounds the hidden block
  f  infilling, whole-scene targets
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .numerics import Tensor

SCHEMES = ("a", "b", "c", "d", "e", "f")
DEFAULT_HIDE_PROB = 0.15
DEFAULT_BUFFER = 3


@dataclass
class MaskPlan:
    m: np.ndarray       # [F, N_o] {0,1}, 0 hides the slot from the model
    tau: np.ndarray     # [F, N_o] {0,1}, 1 marks a prediction target
    scheme: str
    cutoff: Optional[int] = None
    buffer: Optional[int] = None

    def to_json(self) -> dict:
        return {"scheme": self.scheme, "cutoff": self.cutoff,
                "buffer": self.buffer,
                "m": self.m.astype(int).tolist(),
                "tau": self.tau.astype(int).tolist()}


@dataclass
class AuxLossConfig:
    kind: str = "l2"                 # l2 | contrastive
    negatives: str = "all-frames"    # all-frames | same-frame
    temperature: float = 1.0
    similarity: str = "dot"          # dot | cosine
    weight: float = 0.01

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.weight < 0:
            raise ValueError("loss weight must be nonnegative")


def sample_mask_plan(scheme: str, F: int, N_o: int,
                     rng: np.random.Generator,
                     hide_prob: float = DEFAULT_HIDE_PROB,
                     buffer: int = DEFAULT_BUFFER,
                     target_frames: int = 2) -> MaskPlan:
    """Draw a mask plan for one episode of F frames and N_o slots."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    m = np.ones((F, N_o), dtype=np.int8)
    tau = np.zeros((F, N_o), dtype=np.int8)

    if scheme == "a":
        hit = rng.integers(0, N_o, size=F)
        m[np.arange(F), hit] = 0
        tau[np.arange(F), hit] = 1
        return MaskPlan(m, tau, scheme)

    if scheme == "b":
        hidden = rng.random((F, N_o)) < hide_prob
        m[hidden] = 0
        tau[hidden] = 1
        return MaskPlan(m, tau, scheme)

    # buffered schemes: one hidden buffer of `buffer` frames with no targets
    if scheme in ("c", "d"):
        if F < buffer + 2:
            raise ValueError("need at least one context and one target frame")
        T = int(rng.integers(1, F - buffer))        # context frames are t < T
        m[T:] = 0
        target_lo, target_hi = T + buffer, F
    else:  # e, f: context surrounds the hidden block
        K = target_frames
        if F < buffer + K + 2:
            raise ValueError("need context frames on both sides of the block")
        T = int(rng.integers(1, F - buffer - K))
        m[T:T + buffer + K] = 0
        target_lo, target_hi = T + buffer, T + buffer + K

    if scheme in ("c", "e"):
        for t in range(target_lo, target_hi):
            tau[t, rng.integers(0, N_o)] = 1
    else:
        tau[target_lo:target_hi] = 1
    return MaskPlan(m, tau, scheme, cutoff=T, buffer=buffer)


def apply_mask(mu: Tensor, plan: MaskPlan) -> Tensor:
    """mu_ti <- m_ti * mu_ti; hidden entries become exact zeros.

    ``mu`` may be [F, N, d] or batched [B, F, N, d] with one plan per
    batch element stacked into plan arrays of matching shape.
    """
    m = plan.m.astype(mu.dtype)
    if mu.ndim == m.ndim + 1:
        m = m[..., None]
    else:
        raise nm.ShapeError("apply_mask", f"plan {plan.m.shape} vs mu {mu.shape}")
    return mu * Tensor(m)


def stack_plans(plans: list[MaskPlan]) -> MaskPlan:
    """Batch per-episode plans into arrays of shape [B, F, N_o]."""
    return MaskPlan(m=np.stack([p.m for p in plans]),
                    tau=np.stack([p.tau for p in plans]),
                    scheme=plans[0].scheme)


def predict_targets(mu_prime: Tensor, params: dict[str, Tensor]) -> Tensor:
    """The learned linear map f from transformed slots back to slot space."""
    return mu_prime @ params["aux.f.w"] + params["aux.f.b"]


def aux_loss_l2(mu_prime: Tensor, mu: Tensor, plan: MaskPlan,
                params: dict[str, Tensor]) -> Tensor:
    """Mean squared distance between f(mu') and the true mu over targets."""
    n_targets = int(plan.tau.sum())
    if n_targets == 0:
        return Tensor(np.zeros((), dtype=nm.get_default_dtype()))
    pred = predict_targets(mu_prime, params)
    diff = pred - nm.stop_gradient(mu)
    tau = Tensor(plan.tau.astype(pred.dtype)[..., None])
    sq = ((diff * tau) ** 2).sum()
    return sq * (1.0 / n_targets)


def aux_loss_contrastive(mu_prime: Tensor, mu: Tensor, plan: MaskPlan,
                         params: dict[str, Tensor],
                         cfg: AuxLossConfig) -> Tensor:
    """InfoNCE-style loss: identify the true slot among candidate slots.

    Candidates are all slots of the episode, or only the slots of the
    target's frame, per ``cfg.negatives``. Works on [B, F, N, d] inputs;
    candidate sets never cross batch elements.
    """
    cfg.validate()
    n_targets = int(plan.tau.sum())
    if n_targets == 0:
        return Tensor(np.zeros((), dtype=nm.get_default_dtype()))
    if mu_prime.ndim == 3:
        mu_prime = mu_prime.reshape((1,) + mu_prime.shape)
        mu = mu.reshape((1,) + mu.shape)
        plan = MaskPlan(plan.m[None], plan.tau[None], plan.scheme)
    B, F, N, _ = mu.shape
    pred = predict_targets(mu_prime, params)       # [B, F, N, d]
    cand = nm.stop_gradient(mu)

    if cfg.similarity == "cosine":
        def normalize(t):
            norm = nm.sqrt((t ** 2).sum(axis=-1, keepdims=True) + 1e-12)
            return t / norm
        pred = normalize(pred)
        cand = normalize(cand)
    elif cfg.similarity != "dot":
        raise ValueError(f"unknown similarity {cfg.similarity!r}")

    inv_t = 1.0 / cfg.temperature
    if cfg.negatives == "all-frames":
        # scores[b, t, i, s, j] = pred_ti . mu_sj
        scores = nm.einsum("btid,bsjd->btisj", pred, cand) * inv_t
        flat = scores.reshape((B, F, N, F * N))
        logp = nm.log_softmax(flat, axis=-1)
        pos_idx = (np.arange(F) * N)[:, None] + np.arange(N)[None, :]
        pos = logp[:, np.arange(F)[:, None], np.arange(N)[None, :], pos_idx]
    elif cfg.negatives == "same-frame":
        scores = nm.einsum("btid,btjd->btij", pred, cand) * inv_t
        logp = nm.log_softmax(scores, axis=-1)
        pos = logp[:, :, np.arange(N), np.arange(N)]
    else:
        raise ValueError(f"unknown negatives scope {cfg.negatives!r}")

    tau = Tensor(plan.tau.astype(pred.dtype))
    return -(pos * tau).sum() * (1.0 / n_targets)


def aux_loss(mu_prime: Tensor, mu: Tensor, plan: MaskPlan,
             params: dict[str, Tensor], cfg: AuxLossConfig) -> Tensor:
    if cfg.kind == "l2":
        return aux_loss_l2(mu_prime, mu, plan, params)
    if cfg.kind == "contrastive":
        return aux_loss_contrastive(mu_prime, mu, plan, params, cfg)
    raise ValueError(f"unknown aux loss kind {cfg.kind!r}")


def combine_losses(task_loss: Tensor, aux: Tensor, weight: float) -> Tensor:
    """total = task + weight * aux; both minimized jointly, no pretraining.

    The aux forward pass is built with stop-gradient edges on the word and
    CLS embeddings (see assemble_inputs), so the aux term contributes
    exactly zero gradient to them.
    """
    if weight == 0.0:
        return task_loss
    return task_loss + weight * aux
