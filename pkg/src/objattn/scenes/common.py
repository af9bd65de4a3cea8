"""Shared scene machinery: object state, episodes, token vocabulary, rendering.

Episodes are desk-scale synthetic "videos": small flat-shaded frames with
exact per-object masks, a tokenized question, a label, and enough causal
annotation to re-derive the label independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Category codes shared by all tasks. Shape code 3 ("special") is the
# cone/container shape in the tracking task.
SHAPES = ("circle", "square", "triangle", "special")
COLORS = ("red", "green", "blue", "yellow", "purple", "cyan")
COLOR_RGB = {
    "red": (220, 50, 50),
    "green": (60, 180, 75),
    "blue": (50, 90, 220),
    "yellow": (230, 220, 60),
    "purple": (150, 60, 200),
    "cyan": (70, 200, 210),
}
BACKGROUND_RGB = (24, 24, 24)

# Machine / panel state codes used by the causal-induction task.
PANEL_STATES = ("lit", "unlit", "query")

# Token vocabulary (shared across tasks, <= 64 entries). Questions and
# choices are emitted directly as token-id sequences from templates.
VOCAB = (
    ["<pad>", "<sep>", "yes", "no", "undetermined",
     "what", "which", "how", "many", "does", "will", "happen", "happens",
     "next", "if", "removed", "is", "the", "object", "with", "collides",
     "collide", "event", "not", "responsible", "for", "collision", "between",
     "presence", "of", "machine", "light", "up", "where", "end", "snitch",
     "0", "1", "2", "3", "4", "5", "6", "7", "8", "9"]
    + list(COLORS)
    + list(SHAPES)
)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID = TOKEN_ID["<pad>"]

assert len(VOCAB) <= 64, "vocabulary budget exceeded"


def tokens(words: list[str], length: Optional[int] = None) -> list[int]:
    """Map words to token ids, optionally right-padding to a fixed length."""
    ids = [TOKEN_ID[w] for w in words]
    if length is not None:
        if len(ids) > length:
            raise ValueError(f"token sequence too long: {len(ids)} > {length}")
        ids = ids + [PAD_ID] * (length - len(ids))
    return ids


@dataclass
class SceneObject:
    """One object's category codes and per-frame state."""

    oid: int
    shape: int
    color: int
    size: float
    # per-frame (x, y) in arena/grid units and visibility flags
    positions: np.ndarray  # [F, 2] float
    visible: np.ndarray    # [F] bool
    # per-frame container object id, -1 when free
    container: np.ndarray = None  # [F] int
    # per-frame panel-state code (index into PANEL_STATES), -1 for none;
    # only the machine object of the causal-induction task uses this
    state: np.ndarray = None  # [F] int

    def __post_init__(self):
        if self.container is None:
            self.container = np.full(len(self.visible), -1, dtype=np.int64)
        if self.state is None:
            self.state = np.full(len(self.visible), -1, dtype=np.int64)


@dataclass
class Episode:
    """One synthetic video plus question, label and causal annotations."""

    task: str                      # collision-qa | snitch | blicket
    frames: list[np.ndarray]       # F arrays [H, W, 3] uint8 (may be empty)
    masks: list[np.ndarray]        # F arrays [N_o, H, W] uint8 {0,1}
    objects: list[SceneObject]
    question: list[int]
    choices: Optional[list[list[int]]]
    answer: object                 # vocab id | list[bool] | int cell | str
    annotations: dict = field(default_factory=dict)
    n_slots: int = 0
    num_frames: int = 0

    @property
    def category(self) -> str:
        return self.annotations.get("category", "descriptive")


def render_frame(objects: list[SceneObject], frame: int, n_slots: int,
                 image_hw: int, arena_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize one frame; returns (image [H,W,3] uint8, masks [N_o,H,W] uint8).

    Flat-shaded shapes on a uniform background, painted back-to-front in
    object-id order so overlap pixels belong to the later (nearer) object.
    Masks record exactly the pixels each object owns after painting.
    """
    H = W = image_hw
    image = np.empty((H, W, 3), dtype=np.uint8)
    image[:] = BACKGROUND_RGB
    owner = np.full((H, W), -1, dtype=np.int64)

    yy, xx = np.mgrid[0:H, 0:W]
    scale = H / arena_size
    for obj in objects:
        if not obj.visible[frame]:
            continue
        cx, cy = obj.positions[frame]
        px = cx * scale
        py = cy * scale
        r = obj.size * scale
        dx = xx + 0.5 - px
        dy = yy + 0.5 - py
        shape = SHAPES[obj.shape]
        if shape == "circle":
            hit = dx ** 2 + dy ** 2 <= r ** 2
        elif shape == "square":
            hit = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        elif shape == "triangle":
            hit = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
        else:  # "special": cone, drawn as a narrow upward triangle
            hit = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 3.0)
        if hit.any():
            image[hit] = COLOR_RGB[COLORS[obj.color]]
            owner[hit] = obj.oid

    masks = np.zeros((n_slots, H, W), dtype=np.uint8)
    for oid in range(n_slots):
        masks[oid] = (owner == oid).astype(np.uint8)
    return image, masks


def render_episode(objects: list[SceneObject], num_frames: int, n_slots: int,
                   image_hw: int, arena_size: float):
    frames, masks = [], []
    for t in range(num_frames):
        img, msk = render_frame(objects, t, n_slots, image_hw, arena_size)
        frames.append(img)
        masks.append(msk)
    return frames, masks
