"""Grid-tracking episodes: predict the final cell of a target object.

Objects hop between cells of a G x G grid. Cones (the "special" shape)
can cover the target when they land on its cell, after which the hidden
target travels with the cone until released. The label is the target's
final cell in row-major order from the top-left.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .common import Episode, SceneObject, render_episode, tokens

QUESTION_LEN = 5


@dataclass
class SnitchConfig:
    grid: int = 4
    num_frames: int = 10          # <= 20
    num_cones: int = 1
    num_distractors: int = 1
    move_prob: float = 0.7
    containment_prob: float = 0.8  # cone covers the target on a shared cell
    release_prob: float = 0.15     # covered target released per step
    allow_containment: bool = True
    image_hw: int = 32
    n_slots: int = 4
    render: bool = True

    def validate(self) -> None:
        if self.num_frames > 20:
            raise ValueError("desk-scale limit: F <= 20")
        total = 1 + self.num_cones + self.num_distractors
        if total > self.n_slots:
            raise ValueError("more objects than slots")
        if total > self.grid * self.grid:
            raise ValueError("too many objects for grid")


def cell_index(row: int, col: int, grid: int) -> int:
    """Row-major cell index from the top-left."""
    return row * grid + col


def gen_snitch_episode(cfg: SnitchConfig, seed: int) -> Episode:
    """Generate one tracking episode deterministically from (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0x5417])
    G, F = cfg.grid, cfg.num_frames
    n = 1 + cfg.num_cones + cfg.num_distractors  # object 0 is the target

    start = rng.permutation(G * G)[:n]
    cells = np.stack([start // G, start % G], axis=1)  # (row, col)
    contained_by = -1  # cone id currently covering the target, or -1

    pos_hist = np.zeros((F, n, 2))
    vis_hist = np.ones((F, n), dtype=bool)
    cont_hist = np.full((F, n), -1, dtype=np.int64)
    events: list[dict] = []

    cone_ids = list(range(1, 1 + cfg.num_cones))
    for t in range(F):
        if t > 0:
            for k in range(n):
                if k == 0 and contained_by >= 0:
                    continue  # carried by the cone
                if rng.random() < cfg.move_prob:
                    deltas = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    rng.shuffle(deltas)
                    for dr, dc in deltas:
                        r2, c2 = cells[k, 0] + dr, cells[k, 1] + dc
                        if 0 <= r2 < G and 0 <= c2 < G:
                            cells[k] = (r2, c2)
                            break
            if contained_by >= 0:
                cells[0] = cells[contained_by]
                if rng.random() < cfg.release_prob:
                    events.append({"kind": "release", "frame": t,
                                   "cone": contained_by})
                    contained_by = -1
        if cfg.allow_containment and contained_by < 0:
            for c in cone_ids:
                if (cells[c] == cells[0]).all() and rng.random() < cfg.containment_prob:
                    contained_by = c
                    events.append({"kind": "cover", "frame": t, "cone": c})
                    break
        pos_hist[t] = cells[:, ::-1] + 0.5  # cell centers as (x, y) grid units
        vis_hist[t, 0] = contained_by < 0
        cont_hist[t, 0] = contained_by

    final_cell = cell_index(int(cells[0, 0]), int(cells[0, 1]), G)

    colors = rng.permutation(6)[:n]
    objects = []
    for k in range(n):
        shape = 0 if k == 0 else (3 if k in cone_ids else 1)
        objects.append(SceneObject(
            oid=k, shape=shape, color=int(colors[k]),
            size=0.30 if k == 0 else 0.42,
            positions=pos_hist[:, k].copy(), visible=vis_hist[:, k].copy(),
            container=cont_hist[:, k].copy()))

    if cfg.render:
        frames, masks = render_episode(objects, F, cfg.n_slots,
                                       cfg.image_hw, float(G))
    else:
        frames, masks = [], []

    ann = {"category": "descriptive", "events": events,
           "visible_final": bool(vis_hist[-1, 0]), "grid": G,
           "final_cell": final_cell}
    return Episode(task="snitch", frames=frames, masks=masks, objects=objects,
                   question=tokens(["where", "does", "the", "snitch", "end"],
                                   QUESTION_LEN),
                   choices=None, answer=final_cell, annotations=ann,
                   n_slots=cfg.n_slots, num_frames=F)
