"""Train/val/test partitioning and the low-data labeling protocol."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .common import Episode


@dataclass
class Splits:
    train: list[Episode]
    val: list[Episode]
    test: list[Episode]
    labeled: list[Episode]        # supervised pool, subset of train
    unlabeled: list[Episode]      # unsupervised pool = all of train


def make_splits(episodes: list[Episode], labeled_fraction: float,
                split_kind: str = "iid", val_fraction: float = 0.15,
                test_fraction: float = 0.15, seed: int = 0) -> Splits:
    """Partition episodes and carve out the labeled supervised pool.

    The unsupervised pool always covers every training episode, labeled or
    not. ``split_kind`` selects the holdout for causal-induction episodes:
    "compositional" holds out object types, "systematic" holds out
    context-activation counts; "iid" shuffles.
    """
    if not 0 < labeled_fraction <= 1:
        raise ValueError("labeled_fraction must be in (0, 1]")
    rng = np.random.default_rng([seed, 0x5911])
    n = len(episodes)
    order = rng.permutation(n)

    if split_kind == "iid":
        n_test = int(round(n * test_fraction))
        n_val = int(round(n * val_fraction))
        test = [episodes[i] for i in order[:n_test]]
        val = [episodes[i] for i in order[n_test:n_test + n_val]]
        train = [episodes[i] for i in order[n_test + n_val:]]
    elif split_kind in ("compositional", "systematic"):
        def key(ep: Episode):
            if split_kind == "systematic":
                return ep.annotations["context_lit_count"]
            # compositional: bucket by the visual features of the query set
            return tuple(sorted((ep.annotations["type_shape"][o],
                                 ep.annotations["type_color"][o])
                                for o in ep.annotations["query"]))

        keys = sorted({key(ep) for ep in episodes}, key=repr)
        n_hold = max(1, int(round(len(keys) * test_fraction)))
        held = set(keys[i] for i in rng.permutation(len(keys))[:n_hold])
        holdout = [ep for ep in episodes if key(ep) in held]
        rest = [ep for ep in episodes if key(ep) not in held]
        half = len(holdout) // 2
        val, test = holdout[:half], holdout[half:]
        train = rest
    else:
        raise ValueError(f"unknown split kind {split_kind!r}")

    n_lab = int(round(len(train) * labeled_fraction))
    lab_idx = rng.permutation(len(train))[:n_lab]
    labeled = [train[i] for i in sorted(lab_idx)]
    return Splits(train=train, val=val, test=test,
                  labeled=labeled, unlabeled=list(train))
