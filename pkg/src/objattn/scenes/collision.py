"""Collision question-answering episodes: bouncing discs on a 2-D arena.

Objects move ballistically and collide elastically (equal masses, hard
walls). Questions cover four categories; explanatory / predictive /
counterfactual answers are derived by re-running the simulator, which
doubles as the self-consistency oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .common import COLORS, Episode, SceneObject, render_episode, tokens

QUESTION_LEN = 10
CHOICE_LEN = 8


@dataclass
class CollisionConfig:
    num_frames: int = 12          # observed frames, <= 20
    extra_frames: int = 6         # simulated past the video for predictive labels
    num_objects: int = 4          # <= 6
    arena_size: float = 8.0
    image_hw: int = 32
    radius: float = 0.5
    max_speed: float = 0.35       # arena units per frame
    substeps: int = 4
    question_mix: dict = field(default_factory=lambda: {
        "descriptive": 0.25, "explanatory": 0.25,
        "predictive": 0.25, "counterfactual": 0.25})
    disconnected_fraction: float = 0.47
    n_slots: int = 6
    render: bool = True

    def validate(self) -> None:
        if self.num_frames > 20 or self.num_objects > 6:
            raise ValueError("desk-scale limits: F <= 20, objects <= 6")
        if self.num_objects > self.n_slots:
            raise ValueError("more objects than slots")
        if self.num_objects * (2 * self.radius) ** 2 * 4 > self.arena_size ** 2:
            raise ValueError("too many objects for arena")


def _simulate(pos0: np.ndarray, vel0: np.ndarray, alive: np.ndarray,
              cfg: CollisionConfig, total_frames: int):
    """Run the disc simulation; returns (positions [T,n,2], events).

    Events are (frame, i, j) with i < j, recorded once per contact
    (a pair must separate before it can collide again).
    """
    n = pos0.shape[0]
    pos = pos0.copy()
    vel = vel0.copy()
    out = np.zeros((total_frames, n, 2))
    events: list[tuple[int, int, int]] = []
    touching = np.zeros((n, n), dtype=bool)
    dt = 1.0 / cfg.substeps
    r = cfg.radius
    for t in range(total_frames):
        for _ in range(cfg.substeps):
            pos += vel * dt
            # wall reflection
            for ax in range(2):
                low = pos[:, ax] < r
                high = pos[:, ax] > cfg.arena_size - r
                vel[low, ax] = np.abs(vel[low, ax])
                vel[high, ax] = -np.abs(vel[high, ax])
                pos[low, ax] = np.maximum(pos[low, ax], r)
                pos[high, ax] = np.minimum(pos[high, ax], cfg.arena_size - r)
            for i in range(n):
                if not alive[i]:
                    continue
                for j in range(i + 1, n):
                    if not alive[j]:
                        continue
                    d = pos[j] - pos[i]
                    dist = float(np.hypot(d[0], d[1]))
                    if dist < 2 * r:
                        if not touching[i, j]:
                            events.append((t, i, j))
                            touching[i, j] = True
                        if dist > 1e-9:
                            normal = d / dist
                            rel = float((vel[i] - vel[j]) @ normal)
                            if rel > 0:  # approaching: swap normal components
                                vel[i] -= rel * normal
                                vel[j] += rel * normal
                        overlap = 2 * r - dist
                        if dist > 1e-9:
                            pos[i] -= 0.5 * overlap * normal
                            pos[j] += 0.5 * overlap * normal
                    else:
                        touching[i, j] = False
        out[t] = pos
    return out, events


def _pair_set(events) -> set[tuple[int, int]]:
    return {(i, j) for _, i, j in events}


def _sample_scene(cfg: CollisionConfig, rng: np.random.Generator):
    n = cfg.num_objects
    r = cfg.radius
    while True:
        pos = rng.uniform(2 * r, cfg.arena_size - 2 * r, size=(n, 2))
        ok = all(np.hypot(*(pos[i] - pos[j])) > 3 * r
                 for i in range(n) for j in range(i + 1, n))
        if ok:
            break
    speed = rng.uniform(0.3, 1.0, size=n) * cfg.max_speed
    angle = rng.uniform(0, 2 * np.pi, size=n)
    vel = np.stack([speed * np.cos(angle), speed * np.sin(angle)], axis=1)
    return pos, vel


def _event_choice(i: int, j: int, colors: np.ndarray) -> list[int]:
    return tokens(["the", COLORS[colors[i]], "object", "collides",
                   "with", "the", COLORS[colors[j]], "object"], CHOICE_LEN)


def gen_collision_episode(cfg: CollisionConfig, seed: int) -> Episode:
    """Generate one collision-QA episode deterministically from (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0x0C01])
    n = cfg.num_objects
    total = cfg.num_frames + cfg.extra_frames

    cats = sorted(cfg.question_mix)
    weights = np.array([cfg.question_mix[c] for c in cats], dtype=float)
    category = str(rng.choice(cats, p=weights / weights.sum()))
    want_disconnected = (category == "counterfactual"
                         and rng.random() < cfg.disconnected_fraction)

    # resample scenes until the drawn question category is realizable
    for _ in range(200):
        pos0, vel0 = _sample_scene(cfg, rng)
        alive = np.ones(n, dtype=bool)
        traj, events = _simulate(pos0, vel0, alive, cfg, total)
        obs_events = [e for e in events if e[0] < cfg.num_frames]
        fut_events = [e for e in events if e[0] >= cfg.num_frames]
        collided = np.zeros(n, dtype=bool)
        for _, i, j in events:
            collided[i] = collided[j] = True
        if category == "explanatory" and not obs_events:
            continue
        if category == "predictive" and not fut_events:
            continue
        if category == "counterfactual":
            if want_disconnected and collided.all():
                continue
            if not want_disconnected and not collided.any():
                continue
        break
    else:
        raise RuntimeError("could not realize question category; relax config")

    colors = rng.permutation(len(COLORS))[:n]
    shapes = rng.integers(0, 3, size=n)

    def resim(remove: int):
        keep = np.ones(n, dtype=bool)
        keep[remove] = False
        return _simulate(pos0, vel0, keep, cfg, total)

    ann: dict = {"category": category,
                 "events": [list(e) for e in events],
                 "observed_events": [list(e) for e in obs_events]}
    choices = None

    if category == "descriptive":
        if rng.random() < 0.5:
            count = min(len(obs_events), 9)
            question = tokens(["how", "many", "collision", "happen"], QUESTION_LEN)
            answer_word = str(count)
        else:
            k = int(rng.integers(0, n))
            question = tokens(["does", "the", COLORS[colors[k]], "object",
                               "collide"], QUESTION_LEN)
            answer_word = "yes" if any(k in (i, j) for _, i, j in obs_events) else "no"
        answer: object = tokens([answer_word])[0]

    elif category == "explanatory":
        t0, a, b = obs_events[int(rng.integers(0, len(obs_events)))]
        question = tokens(["which", "is", "responsible", "for", "collision",
                           "between", COLORS[colors[a]], "object",
                           COLORS[colors[b]], "object"], QUESTION_LEN)
        others = [k for k in range(n) if k not in (a, b)]
        choices, labels = [], []
        for k in others:
            _, cf_events = resim(k)
            still = any((i, j) == (a, b) and t < cfg.num_frames
                        for t, i, j in cf_events)
            choices.append(tokens(["presence", "of", "the",
                                   COLORS[colors[k]], "object"], CHOICE_LEN))
            labels.append(not still)  # responsible: collision vanishes without it
        answer = labels
        ann["explained_pair"] = [int(a), int(b)]

    elif category == "predictive":
        question = tokens(["what", "will", "happen", "next"], QUESTION_LEN)
        fut_pairs = _pair_set(fut_events)
        true_pair = fut_events[0][1], fut_events[0][2]
        non_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)
                     if (i, j) not in fut_pairs]
        choices, labels = [_event_choice(*true_pair, colors)], [True]
        if non_pairs:
            false_pair = non_pairs[int(rng.integers(0, len(non_pairs)))]
            choices.append(_event_choice(*false_pair, colors))
            labels.append(False)
        answer = labels

    else:  # counterfactual
        if want_disconnected:
            cand = [k for k in range(n) if not collided[k]]
        else:
            cand = [k for k in range(n) if collided[k]]
        removed = int(cand[int(rng.integers(0, len(cand)))])
        _, cf_events = resim(removed)
        question = tokens(["if", "the", COLORS[colors[removed]], "object", "is",
                           "removed", "which", "event", "will", "happen"],
                          QUESTION_LEN)
        cf_pairs = _pair_set(cf_events)
        all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)
                     if removed not in (i, j)]
        order = rng.permutation(len(all_pairs))
        picked = [all_pairs[k] for k in order[:3]]
        choices = [_event_choice(i, j, colors) for i, j in picked]
        labels = [(i, j) in cf_pairs for i, j in picked]
        factual = [(i, j) in _pair_set(events) for i, j in picked]
        connected = bool(collided[removed])
        ann.update({
            "removed": removed,
            "causally_connected": connected,
            "counterfactual_events": [list(e) for e in cf_events],
            "factual_choice_answers": factual,
            "descriptively_answerable": labels == factual,
            "bucket": ("disconnected" if not connected else
                       "descriptive" if labels == factual else "hard"),
        })
        answer = labels

    objects = []
    for k in range(n):
        objects.append(SceneObject(
            oid=k, shape=int(shapes[k]), color=int(colors[k]), size=cfg.radius,
            positions=traj[:cfg.num_frames, k].copy(),
            visible=np.ones(cfg.num_frames, dtype=bool)))

    if cfg.render:
        frames, masks = render_episode(objects, cfg.num_frames, cfg.n_slots,
                                       cfg.image_hw, cfg.arena_size)
    else:
        frames, masks = [], []

    return Episode(task="collision-qa", frames=frames, masks=masks,
                   objects=objects, question=question, choices=choices,
                   answer=answer, annotations=ann,
                   n_slots=cfg.n_slots, num_frames=cfg.num_frames)
