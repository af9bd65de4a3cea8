"""Training loop, evaluation metrics, ablation runner and config parsing.

Each training step draws an independent supervised batch from the labeled
pool (split into descriptive and multiple-choice sub-batches for the
collision task) and an independent unsupervised batch from the full
training pool; the task loss and the masked-embedding auxiliary loss are
combined into one LAMB step. Runs are pure functions of (config, seed):
two identical runs emit byte-identical metrics logs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nm
from . import selfsup
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import (hyperpixel_encode, init_hyperpixel_params,
                      init_masked_image_params, masked_image_encode,
                      oracle_encode)
from .model import (ModelConfig, assemble_inputs, binary_cross_entropy,
                    cross_entropy, global_forward, head_choice_logits,
                    head_descriptive_logits, head_grid_logits,
                    head_ternary_logits, hierarchical_forward,
                    init_hierarchical_merge, init_model_params,
                    mlp_baseline_forward)
from .numerics import Tensor
from .optim import NumericFailure, OptState, Schedule, lamb_step, lr_at
from .scenes import (BlicketConfig, CollisionConfig, Episode, SnitchConfig,
                     TOKEN_ID, gen_blicket_episode, gen_collision_episode,
                     gen_snitch_episode, load_dataset, make_splits)
from .selfsup import AuxLossConfig

TERNARY_ANSWERS = ("yes", "no", "undetermined")
SEP_ID = TOKEN_ID["<sep>"]
PAD_ID = TOKEN_ID["<pad>"]

# fixed word-sequence width per task (question [+ sep + choice], padded)
TASK_WORD_LEN = {"collision-qa": 19, "snitch": 5, "blicket": 6}


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass
class TrainConfig:
    task: str = "blicket"
    dataset: str = ""              # episodes.jsonl dir; empty -> generate
    out_dir: str = ""              # empty -> nothing written to disk
    encoder: str = "oracle"        # oracle | masked-image | hyperpixel
    shuffle_slots: bool = False    # oracle backend: permute slots per frame
    gen_count: int = 512           # generated-dataset size when no path given
    gen_seed: int = 0
    gen_overrides: dict = field(default_factory=dict)  # task-config fields

    model: ModelConfig = field(default_factory=ModelConfig)
    aux: AuxLossConfig = field(default_factory=AuxLossConfig)
    scheme: str = "b"              # masking scheme for the unsupervised batch
    hide_prob: float = selfsup.DEFAULT_HIDE_PROB
    buffer: int = selfsup.DEFAULT_BUFFER
    target_frames: int = 2

    schedule: Schedule = field(default_factory=Schedule)
    weight_decay: float = 0.01

    batch_sup: int = 32
    batch_unsup: int = 32
    steps: int = 1000
    seed: int = 0
    labeled_fraction: float = 1.0
    split_kind: str = "iid"
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    eval_every: int = 200
    eval_max: int = 256            # cap on evaluated episodes per record
    ckpt_every: int = 0            # 0 -> final checkpoint only
    log_every: int = 50

    def validate(self) -> None:
        if self.task not in TASK_WORD_LEN:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.batch_sup <= 0 or self.batch_unsup <= 0:
            raise ConfigError("batch sizes must be positive")
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must be in (0, 1]")
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        if self.encoder not in ("oracle", "masked-image", "hyperpixel"):
            raise ConfigError(f"unknown encoder backend {self.encoder!r}")
        if self.scheme not in selfsup.SCHEMES:
            raise ConfigError(f"unknown masking scheme {self.scheme!r}")
        self.model.validate()
        self.aux.validate()
        self.schedule.validate()


@dataclass
class MetricsRecord:
    step: int
    split: str = "val"
    losses: dict = field(default_factory=dict)
    accuracy: Optional[float] = None           # headline per-question accuracy
    per_category: dict = field(default_factory=dict)
    per_question: Optional[float] = None
    per_option: Optional[float] = None
    top1: Optional[float] = None
    top5: Optional[float] = None
    mean_l1: Optional[float] = None
    by_reasoning: dict = field(default_factory=dict)

    def validate(self) -> None:
        accs = [self.accuracy, self.per_question, self.per_option,
                self.top1, self.top5,
                *self.per_category.values(), *self.by_reasoning.values()]
        for a in accs:
            if a is not None and not 0.0 <= a <= 1.0:
                raise ValueError(f"accuracy out of range: {a}")
        if self.top1 is not None and self.top5 is not None \
                and self.top5 < self.top1:
            raise ValueError("top5 must be >= top1")

    def to_json(self) -> dict:
        out = {"kind": "eval", "step": self.step, "split": self.split,
               "losses": self.losses}
        for name in ("accuracy", "per_question", "per_option",
                     "top1", "top5", "mean_l1"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        if self.per_category:
            out["per_category"] = self.per_category
        if self.by_reasoning:
            out["by_reasoning"] = self.by_reasoning
        return out


# -- flat key=value configuration --------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _coerce(value: str, to_type):
    if to_type is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"bad boolean {value!r}")
    try:
        return to_type(value)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def build_train_config(flat: dict[str, str]) -> TrainConfig:
    """Typed TrainConfig from a flat dict; dotted keys address sub-configs."""
    cfg = TrainConfig()
    subs = {"model": cfg.model, "aux": cfg.aux, "sched": cfg.schedule}
    top = {f.name: f.type for f in fields(TrainConfig)}
    for key, val in flat.items():
        if "." in key:
            group, name = key.split(".", 1)
            if group == "gen":
                cfg.gen_overrides[name] = val
                continue
            target = subs.get(group)
            if target is None:
                raise ConfigError(f"unknown config group {group!r}")
            if not hasattr(target, name):
                raise ConfigError(f"unknown key {key!r}")
            setattr(target, name, _coerce(val, type(getattr(target, name))))
        else:
            if key not in top or key in ("model", "aux", "schedule",
                                         "gen_overrides"):
                raise ConfigError(f"unknown key {key!r}")
            setattr(cfg, key, _coerce(val, type(getattr(cfg, key))))
    cfg.validate()
    return cfg


def config_to_flat(cfg: TrainConfig) -> dict:
    """Flatten back to the dotted-key form (stored in checkpoints)."""
    out = {}
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "gen_overrides":
            for k, gv in v.items():
                out[f"gen.{k}"] = gv
        elif f.name in ("model", "aux", "schedule"):
            group = {"model": "model", "aux": "aux", "schedule": "sched"}[f.name]
            for sf in fields(v):
                out[f"{group}.{sf.name}"] = getattr(v, sf.name)
        else:
            out[f.name] = v
    return out


# -- dataset acquisition ------------------------------------------------------------

_GENERATORS = {
    "collision-qa": (CollisionConfig, gen_collision_episode),
    "snitch": (SnitchConfig, gen_snitch_episode),
    "blicket": (BlicketConfig, gen_blicket_episode),
}


def generate_episodes(task: str, count: int, seed: int,
                      overrides: dict | None = None,
                      render: bool = True) -> list[Episode]:
    cfg_cls, gen = _GENERATORS[task]
    cfg = cfg_cls()
    cfg.render = render
    for key, val in (overrides or {}).items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown {task} generator key {key!r}")
        setattr(cfg, key, _coerce(str(val), type(getattr(cfg, key))))
    return [gen(cfg, seed * 1_000_003 + i) for i in range(count)]


def acquire_episodes(cfg: TrainConfig) -> list[Episode]:
    if cfg.dataset:
        eps = load_dataset(cfg.dataset)
        if any(ep.task != cfg.task for ep in eps):
            raise ConfigError(f"dataset task mismatch: expected {cfg.task}")
        if not eps:
            raise ConfigError("dataset is empty")
        return eps
    render = cfg.encoder != "oracle"
    return generate_episodes(cfg.task, cfg.gen_count, cfg.gen_seed,
                             cfg.gen_overrides, render=render)


# -- encoding pools -----------------------------------------------------------------

@dataclass
class Pool:
    """Episodes of one split, pre-encoded where the backend allows."""

    episodes: list[Episode]
    mu: Optional[np.ndarray]       # [E, F, N, d] for the oracle backend
    words: np.ndarray              # [E, W] padded question tokens
    task: str
    # multiple-choice rows (collision): one row per (episode, choice)
    mc_episode: np.ndarray = None  # [R] int
    mc_words: np.ndarray = None    # [R, W]
    mc_labels: np.ndarray = None   # [R] {0,1}
    desc_idx: np.ndarray = None    # descriptive episode indices
    desc_labels: np.ndarray = None

    def __len__(self) -> int:
        return len(self.episodes)


def _padded_words(ids: list[int], width: int) -> list[int]:
    if len(ids) > width:
        raise ConfigError(f"question too long: {len(ids)} > {width}")
    return ids + [PAD_ID] * (width - len(ids))


def episode_label(ep: Episode):
    """Integer training label for single-head tasks."""
    if ep.task == "snitch":
        return int(ep.answer)
    if ep.task == "blicket":
        return TERNARY_ANSWERS.index(ep.answer)
    raise ValueError(f"no single label for task {ep.task!r}")


def build_pool(episodes: list[Episode], cfg: TrainConfig,
               shuffle_seed: int | None = None) -> Pool:
    task = cfg.task
    width = TASK_WORD_LEN[task]
    words = np.array([_padded_words(ep.question, width) for ep in episodes],
                     dtype=np.int64).reshape(len(episodes), width)
    mu = None
    if cfg.encoder == "oracle":
        mus = []
        for i, ep in enumerate(episodes):
            shuffle = cfg.shuffle_slots
            seed = (shuffle_seed or 0) * 1_000_003 + i
            mus.append(oracle_encode(ep, cfg.model.d, shuffle=shuffle,
                                     seed=seed).mu.data)
        mu = (np.stack(mus).astype(nm.get_default_dtype()) if mus
              else np.zeros((0, 0, 0, cfg.model.d)))

    pool = Pool(episodes=episodes, mu=mu, words=words, task=task)
    if task == "collision-qa":
        mc_e, mc_w, mc_y, d_i, d_y = [], [], [], [], []
        for i, ep in enumerate(episodes):
            if ep.choices is None:
                d_i.append(i)
                d_y.append(int(ep.answer))
                continue
            for choice, label in zip(ep.choices, ep.answer):
                row = ep.question + [SEP_ID] + choice
                mc_e.append(i)
                mc_w.append(_padded_words(row, width))
                mc_y.append(int(label))
        pool.mc_episode = np.array(mc_e, dtype=np.int64)
        pool.mc_words = np.array(mc_w, dtype=np.int64).reshape(len(mc_e), width)
        pool.mc_labels = np.array(mc_y, dtype=np.int64)
        pool.desc_idx = np.array(d_i, dtype=np.int64)
        pool.desc_labels = np.array(d_y, dtype=np.int64)
    return pool


def _encode_in_graph(episodes: list[Episode], idx: np.ndarray,
                     params, cfg: TrainConfig) -> Tensor:
    """Learned-backend slots for a batch, differentiable into the encoder."""
    mus = []
    for i in idx:
        ep = episodes[int(i)]
        if cfg.encoder == "masked-image":
            mus.append(masked_image_encode(ep, params).mu)
        else:
            mus.append(hyperpixel_encode(ep, params))
    return nm.stack(mus)


def batch_slots(pool: Pool, idx: np.ndarray, params,
                cfg: TrainConfig) -> Tensor:
    if pool.mu is not None:
        return Tensor(pool.mu[idx])
    return _encode_in_graph(pool.episodes, idx, params, cfg)


# -- forward dispatch ---------------------------------------------------------------

def forward_cls(mu: Tensor, word_ids: np.ndarray, params,
                mcfg: ModelConfig, stop_words: bool = False,
                collect_trace: bool = False, rng=None):
    """(cls_out, mu_prime or None, trace or None) for any attention mode.

    ``rng`` enables dropout (training); evaluation passes None so the
    forward pass stays deterministic.
    """
    seq = assemble_inputs(mu, word_ids, params, mcfg,
                          stop_word_gradients=stop_words)
    if mcfg.attention_mode == "global":
        return global_forward(seq, params, mcfg, collect_trace=collect_trace,
                              rng=rng)
    if mcfg.attention_mode == "hierarchical":
        cls_out, trace = hierarchical_forward(seq, params, mcfg,
                                              collect_trace=collect_trace,
                                              rng=rng)
        return cls_out, None, trace
    return mlp_baseline_forward(seq, params, mcfg), None, None


def _task_loss_and_correct(pool: Pool, idx: np.ndarray, params,
                           cfg: TrainConfig, rng=None):
    """Supervised loss plus the count of correct episode-level predictions."""
    mcfg = cfg.model
    if pool.task in ("snitch", "blicket"):
        mu = batch_slots(pool, idx, params, cfg)
        cls_out, _, _ = forward_cls(mu, pool.words[idx], params, mcfg,
                                    rng=rng)
        labels = np.array([episode_label(pool.episodes[int(i)]) for i in idx])
        if pool.task == "snitch":
            logits = head_grid_logits(cls_out, params)
        else:
            logits = head_ternary_logits(cls_out, params)
        loss = cross_entropy(logits, labels)
        correct = int((logits.data.argmax(axis=-1) == labels).sum())
        return loss, correct, len(idx)

    # collision: the batch rows are pre-split desc / multiple-choice rows
    raise ValueError("collision uses _collision_losses")


def _collision_losses(pool: Pool, desc_rows: np.ndarray, mc_rows: np.ndarray,
                      params, cfg: TrainConfig, rng=None):
    """Descriptive and multiple-choice sub-batch losses (either may be empty)."""
    mcfg = cfg.model
    losses = []
    if desc_rows.size:
        eidx = pool.desc_idx[desc_rows]
        mu = batch_slots(pool, eidx, params, cfg)
        cls_out, _, _ = forward_cls(mu, pool.words[eidx], params, mcfg,
                                    rng=rng)
        logits = head_descriptive_logits(cls_out, params)
        losses.append(cross_entropy(logits, pool.desc_labels[desc_rows]))
    if mc_rows.size:
        eidx = pool.mc_episode[mc_rows]
        mu = batch_slots(pool, eidx, params, cfg)
        cls_out, _, _ = forward_cls(mu, pool.mc_words[mc_rows], params, mcfg,
                                    rng=rng)
        logits = head_choice_logits(cls_out, params)
        losses.append(binary_cross_entropy(logits, pool.mc_labels[mc_rows]))
    if not losses:
        raise ValueError("empty supervised batch")
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total


def _aux_loss(pool: Pool, idx: np.ndarray, params, cfg: TrainConfig,
              rng: np.random.Generator, drop_rng=None):
    """Masked-embedding auxiliary loss on an unsupervised batch."""
    mu = batch_slots(pool, idx, params, cfg)
    B, F, N, _ = mu.shape
    plans = [selfsup.sample_mask_plan(cfg.scheme, F, N, rng,
                                      hide_prob=cfg.hide_prob,
                                      buffer=cfg.buffer,
                                      target_frames=cfg.target_frames)
             for _ in range(B)]
    plan = selfsup.stack_plans(plans)
    masked = selfsup.apply_mask(mu, plan)
    _, mu_prime, _ = forward_cls(masked, pool.words[idx], params, cfg.model,
                                 stop_words=True, rng=drop_rng)
    return selfsup.aux_loss(mu_prime, mu, plan, params, cfg.aux)


# -- evaluation ---------------------------------------------------------------------

def _batched(n: int, size: int):
    for lo in range(0, n, size):
        yield np.arange(lo, min(lo + size, n))


def evaluate(params, pool: Pool, cfg: TrainConfig, step: int = 0,
             split: str = "val", batch: int = 64) -> MetricsRecord:
    """Task metrics over one split; multiple-choice questions count as
    correct only when every choice is classified correctly (0.5 threshold)."""
    if len(pool) == 0:
        raise ValueError(f"split {split!r} is empty")
    mcfg = cfg.model
    rec = MetricsRecord(step=step, split=split)

    if pool.task in ("snitch", "blicket"):
        labels = np.array([episode_label(ep) for ep in pool.episodes])
        logit_rows = []
        for idx in _batched(len(pool), batch):
            mu = batch_slots(pool, idx, params, cfg)
            cls_out, _, _ = forward_cls(mu, pool.words[idx], params, mcfg)
            head = head_grid_logits if pool.task == "snitch" \
                else head_ternary_logits
            logit_rows.append(head(cls_out, params).data)
        logits = np.concatenate(logit_rows)
        pred = logits.argmax(axis=-1)
        correct = pred == labels
        rec.accuracy = rec.per_question = float(correct.mean())
        if pool.task == "snitch":
            G = cfg.model.grid
            order = np.argsort(-logits, axis=-1)
            rec.top1 = float((order[:, 0] == labels).mean())
            rec.top5 = float((order[:, :5] == labels[:, None]).any(1).mean())
            l1 = (np.abs(pred // G - labels // G)
                  + np.abs(pred % G - labels % G))
            rec.mean_l1 = float(l1.mean())
        else:
            tags = [ep.annotations["reasoning_type"] for ep in pool.episodes]
            for tag in sorted(set(tags)):
                sel = np.array([t == tag for t in tags])
                rec.by_reasoning[tag] = float(correct[sel].mean())
        rec.validate()
        return rec

    # collision-qa: option-level then question-level aggregation
    q_correct = {}   # episode index -> all options so far correct
    n_options = n_opt_correct = 0
    for rows in _batched(len(pool.desc_idx), batch):
        eidx = pool.desc_idx[rows]
        mu = batch_slots(pool, eidx, params, cfg)
        cls_out, _, _ = forward_cls(mu, pool.words[eidx], params, mcfg)
        pred = head_descriptive_logits(cls_out, params).data.argmax(axis=-1)
        for e, ok in zip(eidx, pred == pool.desc_labels[rows]):
            q_correct[int(e)] = bool(ok)
    for rows in _batched(len(pool.mc_episode), batch):
        eidx = pool.mc_episode[rows]
        mu = batch_slots(pool, eidx, params, cfg)
        cls_out, _, _ = forward_cls(mu, pool.mc_words[rows], params, mcfg)
        prob = head_choice_logits(cls_out, params).data
        ok = (prob > 0.0) == pool.mc_labels[rows].astype(bool)
        n_options += len(rows)
        n_opt_correct += int(ok.sum())
        for e, o in zip(eidx, ok):
            q_correct[int(e)] = q_correct.get(int(e), True) and bool(o)

    cats = [ep.category for ep in pool.episodes]
    flags = np.array([q_correct[i] for i in range(len(pool))])
    rec.accuracy = rec.per_question = float(flags.mean())
    rec.per_option = float(n_opt_correct / n_options) if n_options else None
    for cat in sorted(set(cats)):
        sel = np.array([c == cat for c in cats])
        rec.per_category[cat] = float(flags[sel].mean())
    rec.validate()
    return rec


# -- training -----------------------------------------------------------------------

def init_run_params(cfg: TrainConfig, n_slots: int, seq_len: int):
    mcfg = cfg.model
    if mcfg.attention_mode == "mlp-baseline" and mcfg.mlp_max_len == 0:
        mcfg.mlp_max_len = seq_len
    params = init_model_params(mcfg, cfg.seed)
    if mcfg.attention_mode == "hierarchical":
        init_hierarchical_merge(params, mcfg, n_slots, cfg.seed)
    if cfg.encoder == "masked-image":
        params.update(init_masked_image_params(mcfg.d, seed=cfg.seed))
    elif cfg.encoder == "hyperpixel":
        params.update(init_hyperpixel_params(mcfg.d, seed=cfg.seed))
    return params


def train(cfg: TrainConfig, episodes: list[Episode] | None = None,
          log_fn=None):
    """Run the training loop; returns (params, opt_state, records).

    ``records`` is the in-memory metrics log (train-loss dicts and
    MetricsRecord.to_json dicts in emission order). With ``out_dir`` set,
    the same records stream to metrics.jsonl and checkpoints are written.
    """
    cfg.validate()
    if episodes is None:
        episodes = acquire_episodes(cfg)
    splits = make_splits(episodes, cfg.labeled_fraction, cfg.split_kind,
                         cfg.val_fraction, cfg.test_fraction, cfg.seed)
    if not splits.labeled or not splits.val:
        raise ConfigError("splits too small: empty labeled or val pool")

    labeled = build_pool(splits.labeled, cfg, shuffle_seed=cfg.seed)
    unlabeled = build_pool(splits.unlabeled, cfg, shuffle_seed=cfg.seed + 1)
    val = build_pool(splits.val, cfg, shuffle_seed=cfg.seed + 2)
    if cfg.eval_max and len(val) > cfg.eval_max:
        val = build_pool(splits.val[:cfg.eval_max], cfg,
                         shuffle_seed=cfg.seed + 2)

    ep0 = episodes[0]
    F, N = ep0.num_frames, ep0.n_slots
    seq_len = F * N + TASK_WORD_LEN[cfg.task] + 1
    params = init_run_params(cfg, N, seq_len)
    state = OptState(weight_decay=cfg.weight_decay)

    rng_sup = np.random.default_rng([cfg.seed, 0x50B1])
    rng_unsup = np.random.default_rng([cfg.seed, 0x50B2])
    rng_mask = np.random.default_rng([cfg.seed, 0x50B3])
    # dropout noise; separate streams keep the word/CLS-gradient
    # comparison between aux weights exact (see combine_losses)
    rng_drop = np.random.default_rng([cfg.seed, 0x50B4]) \
        if cfg.model.dropout > 0 else None
    rng_drop_aux = np.random.default_rng([cfg.seed, 0x50B5]) \
        if cfg.model.dropout > 0 else None

    out = Path(cfg.out_dir) if cfg.out_dir else None
    metrics_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
    records: list[dict] = []

    def emit(record: dict):
        records.append(record)
        line = json.dumps(record, sort_keys=True)
        if metrics_fh:
            metrics_fh.write(line + "\n")
        if log_fn:
            log_fn(line)

    use_aux = (cfg.aux.weight > 0.0
               and cfg.model.attention_mode == "global")

    try:
        for step in range(1, cfg.steps + 1):
            # supervised batch (independent draw from the labeled pool)
            if cfg.task == "collision-qa":
                half = cfg.batch_sup // 2
                n_desc = len(labeled.desc_idx)
                n_mc = len(labeled.mc_episode)
                desc_rows = (rng_sup.integers(0, n_desc, size=half)
                             if n_desc else np.array([], dtype=np.int64))
                mc_rows = (rng_sup.integers(0, n_mc,
                                            size=cfg.batch_sup - half)
                           if n_mc else np.array([], dtype=np.int64))
                task_loss = _collision_losses(labeled, desc_rows, mc_rows,
                                              params, cfg, rng=rng_drop)
            else:
                idx = rng_sup.integers(0, len(labeled), size=cfg.batch_sup)
                task_loss, _, _ = _task_loss_and_correct(labeled, idx,
                                                         params, cfg,
                                                         rng=rng_drop)

            # unsupervised batch (independent draw from the full train pool)
            aux_val = 0.0
            if use_aux:
                uidx = rng_unsup.integers(0, len(unlabeled),
                                          size=cfg.batch_unsup)
                aux = _aux_loss(unlabeled, uidx, params, cfg, rng_mask,
                                drop_rng=rng_drop_aux)
                total = selfsup.combine_losses(task_loss, aux,
                                               cfg.aux.weight)
                aux_val = float(aux.data)
            else:
                total = task_loss

            grads = nm.backward(total, params)
            lr = lr_at(cfg.schedule, step)
            lamb_step(params, grads, state, lr)

            if step % cfg.log_every == 0 or step == cfg.steps:
                emit({"kind": "train", "step": step, "lr": lr,
                      "task_loss": float(task_loss.data),
                      "aux_loss": aux_val, "total_loss": float(total.data)})
            if step % cfg.eval_every == 0 or step == cfg.steps:
                rec = evaluate(params, val, cfg, step=step, split="val")
                emit(rec.to_json())
            if out and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                save_checkpoint(out / f"ckpt_{step:07d}.bin", params,
                                _ckpt_config(cfg), state)
    finally:
        if metrics_fh:
            metrics_fh.close()

    if out:
        save_checkpoint(out / "ckpt_final.bin", params, _ckpt_config(cfg),
                        state)
    return params, state, records


def _ckpt_config(cfg: TrainConfig) -> dict:
    flat = config_to_flat(cfg)
    return {k: v for k, v in flat.items() if not isinstance(v, dict)}


def load_run(ckpt_path: str | Path):
    """(params, TrainConfig, OptState) from a checkpoint written by train."""
    params, flat, state = load_checkpoint(ckpt_path)
    cfg = build_train_config({k: str(v) for k, v in flat.items()})
    return params, cfg, state


# -- ablation suite -----------------------------------------------------------------

ARCH_VARIANTS = ("global", "hierarchical", "mlp-baseline", "hyperpixel")


def _variant_config(base: TrainConfig, name: str) -> TrainConfig:
    cfg = replace(base, model=replace(base.model), aux=replace(base.aux),
                  schedule=replace(base.schedule),
                  gen_overrides=dict(base.gen_overrides))
    cfg.out_dir = ""
    if name == "hyperpixel":
        cfg.encoder = "hyperpixel"
        cfg.aux.weight = 0.0
    else:
        cfg.model.attention_mode = name
        if name != "global":
            cfg.aux.weight = 0.0   # no per-slot outputs to self-supervise
    return cfg


def run_ablation_suite(base: TrainConfig, episodes: list[Episode],
                       seeds: tuple[int, ...] = (0, 1, 2),
                       scheme_labeled_fraction: float = 0.5,
                       include_schemes: bool = True,
                       log_fn=None) -> list[dict]:
    """Architecture ablations plus the masking-scheme x loss grid.

    Returns one row per (variant, seed) with the final validation record;
    rows share seeds across variants so comparisons are paired.
    """
    rows = []

    def run(name: str, cfg: TrainConfig):
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            _, _, records = train(run_cfg, episodes=episodes)
            final = [r for r in records if r.get("kind") == "eval"][-1]
            row = {"variant": name, "seed": seed, "metrics": final}
            rows.append(row)
            if log_fn:
                log_fn(json.dumps(row, sort_keys=True))

    for name in ARCH_VARIANTS:
        run(f"arch/{name}", _variant_config(base, name))
    if include_schemes:
        for scheme in selfsup.SCHEMES:
            for kind in ("l2", "contrastive"):
                cfg = _variant_config(base, "global")
                cfg.labeled_fraction = scheme_labeled_fraction
                cfg.scheme = scheme
                cfg.aux = replace(base.aux, kind=kind)
                if cfg.aux.weight == 0.0:
                    cfg.aux.weight = 0.01
                run(f"scheme/{scheme}/{kind}", cfg)
    return rows


def ablation_table(rows: list[dict], metric: str = "accuracy") -> str:
    """Mean-over-seeds text table of one metric per variant."""
    by_variant: dict[str, list[float]] = {}
    for row in rows:
        v = row["metrics"].get(metric)
        if v is not None:
            by_variant.setdefault(row["variant"], []).append(v)
    width = max(len(v) for v in by_variant) if by_variant else 8
    lines = [f"{'variant':<{width}}  n  mean {metric}"]
    for name in sorted(by_variant):
        vals = by_variant[name]
        lines.append(f"{name:<{width}}  {len(vals)}  {np.mean(vals):.4f}")
    return "\n".join(lines)
