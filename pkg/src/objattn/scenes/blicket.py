"""Causal-induction episodes: six context panels plus one query panel.

Certain object types are secretly "blickets"; a machine lights up iff at
least one blicket stands on it. The answer for the query panel is derived
by brute-force enumeration of every blicket assignment consistent with
the context: yes if all light the machine, no if none do, undetermined
otherwise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .common import COLORS, PANEL_STATES, Episode, SceneObject, \
    render_frame, tokens

QUESTION_LEN = 6
NUM_CONTEXT = 6


@dataclass
class BlicketConfig:
    num_types: int = 6            # object types (shape, color pairs) per problem
    max_per_panel: int = 3
    blicket_prob: float = 0.4
    image_hw: int = 32
    n_slots: int = 4              # max_per_panel object slots + machine slot
    direct_only: bool = False     # query copies a context panel verbatim
    render: bool = True

    def validate(self) -> None:
        if self.max_per_panel + 1 > self.n_slots:
            raise ValueError("need a slot per panel object plus the machine")
        if self.num_types > 3 * len(COLORS):
            raise ValueError("type pool exceeds shape/color combinations")


def consistent_assignments(panels: list[list[int]], lit: list[bool],
                           num_types: int) -> list[tuple[int, ...]]:
    """All blicket assignments (0/1 per type) that reproduce the context."""
    out = []
    for assign in itertools.product((0, 1), repeat=num_types):
        if all(any(assign[o] for o in objs) == is_lit
               for objs, is_lit in zip(panels, lit)):
            out.append(assign)
    return out


def derive_answer(panels, lit, query, num_types) -> tuple[str, list]:
    assigns = consistent_assignments(panels, lit, num_types)
    outcomes = {any(a[o] for o in query) for a in assigns}
    if outcomes == {True}:
        return "yes", assigns
    if outcomes == {False}:
        return "no", assigns
    return "undetermined", assigns


def _reasoning_tag(panels, lit, query, answer, assigns, num_types) -> str:
    """Classify the inference pattern; priority direct > screen-off >
    backward-blocking > indirect."""
    qset = sorted(query)
    if any(sorted(p) == qset for p in panels):
        return "direct"
    known_blicket = [o for o in range(num_types) if all(a[o] for a in assigns)]
    if answer == "yes" and any(o in known_blicket for o in query):
        return "screen-off"
    if answer == "undetermined":
        undet = [o for o in query
                 if len({a[o] for a in assigns}) == 2]
        # blocked: every lit panel showing the object also shows a known blicket
        for o in undet:
            panels_with = [p for p, l in zip(panels, lit) if o in p and l]
            if panels_with and all(any(b in p for b in known_blicket if b != o)
                                   for p in panels_with):
                return "backward-blocking"
    return "indirect"


def gen_blicket_episode(cfg: BlicketConfig, seed: int) -> Episode:
    """Generate one causal-induction episode deterministically from (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0xB11C])
    T = cfg.num_types

    # type k -> (shape, color); combinations are unique within a problem
    combos = [(s, c) for s in range(3) for c in range(len(COLORS))]
    idx = rng.permutation(len(combos))[:T]
    type_shape = [combos[i][0] for i in idx]
    type_color = [combos[i][1] for i in idx]

    blickets = rng.random(T) < cfg.blicket_prob

    panels: list[list[int]] = []
    for _ in range(NUM_CONTEXT):
        k = int(rng.integers(1, cfg.max_per_panel + 1))
        panels.append(sorted(rng.permutation(T)[:k].tolist()))
    lit = [bool(any(blickets[o] for o in p)) for p in panels]

    if cfg.direct_only:
        query = list(panels[int(rng.integers(0, NUM_CONTEXT))])
    else:
        k = int(rng.integers(1, cfg.max_per_panel + 1))
        query = sorted(rng.permutation(T)[:k].tolist())

    answer, assigns = derive_answer(panels, lit, query, T)
    tag = _reasoning_tag(panels, lit, query, answer, assigns, T)

    # Lay panels out as 7 frames: objects along the top row, machine below.
    F = NUM_CONTEXT + 1
    all_panels = panels + [query]
    states = lit + [None]
    arena = 8.0
    objects: list[SceneObject] = []
    for t, objs in enumerate(all_panels):
        for slot, o in enumerate(objs):
            pos = np.zeros((F, 2))
            vis = np.zeros(F, dtype=bool)
            pos[t] = (1.5 + 2.0 * slot, 2.5)
            vis[t] = True
            objects.append(SceneObject(oid=slot, shape=type_shape[o],
                                       color=type_color[o], size=0.8,
                                       positions=pos, visible=vis))
    machine_pos = np.tile(np.array([arena / 2, 6.5]), (F, 1))
    machine_state = np.array(
        [PANEL_STATES.index("lit" if s else "unlit") if s is not None
         else PANEL_STATES.index("query") for s in states], dtype=np.int64)
    # machine color tracks its state so the pixels carry the evidence
    objects.append(SceneObject(oid=cfg.n_slots - 1, shape=1, color=3, size=1.2,
                               positions=machine_pos,
                               visible=np.ones(F, dtype=bool),
                               state=machine_state))

    if cfg.render:
        machine = objects[-1]
        frames, masks = [], []
        for t in range(F):
            # recolor the machine per panel before painting
            machine.color = {0: 3, 1: 2, 2: 4}[int(machine_state[t])]
            img, msk = render_frame(objects, t, cfg.n_slots, cfg.image_hw, arena)
            frames.append(img)
            masks.append(msk)
        machine.color = 3
    else:
        frames, masks = [], []

    ann = {
        "category": "causal",
        "blickets": blickets.astype(int).tolist(),
        "panels": panels, "lit": [int(v) for v in lit], "query": query,
        "reasoning_type": tag,
        "context_lit_count": int(sum(lit)),
        "type_shape": type_shape, "type_color": type_color,
    }
    question = tokens(["does", "the", "machine", "light", "up"], QUESTION_LEN)
    return Episode(task="blicket", frames=frames, masks=masks, objects=objects,
                   question=question, choices=None, answer=answer,
                   annotations=ann, n_slots=cfg.n_slots, num_frames=F)
