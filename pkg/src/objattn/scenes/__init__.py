from .common import (COLORS, PAD_ID, PANEL_STATES, SHAPES, TOKEN_ID, VOCAB,
                     Episode, SceneObject, render_episode, render_frame, tokens)
from .collision import CollisionConfig, gen_collision_episode
from .snitch import SnitchConfig, cell_index, gen_snitch_episode
from .blicket import (BlicketConfig, consistent_assignments, derive_answer,
                      gen_blicket_episode)
from .splits import Splits, make_splits
from .io import episode_from_dict, episode_to_dict, load_dataset, save_dataset

__all__ = [
    "COLORS", "PAD_ID", "PANEL_STATES", "SHAPES", "TOKEN_ID", "VOCAB",
    "Episode", "SceneObject", "render_episode", "render_frame", "tokens",
    "CollisionConfig", "gen_collision_episode",
    "SnitchConfig", "cell_index", "gen_snitch_episode",
    "BlicketConfig", "consistent_assignments", "derive_answer",
    "gen_blicket_episode",
    "Splits", "make_splits",
    "episode_from_dict", "episode_to_dict", "load_dataset", "save_dataset",
]
