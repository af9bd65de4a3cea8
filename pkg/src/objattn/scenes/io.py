"""Dataset persistence: JSON-lines episodes plus a sidecar manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .common import Episode, SceneObject


def episode_to_dict(ep: Episode) -> dict:
    return {
        "task": ep.task,
        "n_slots": ep.n_slots,
        "num_frames": ep.num_frames,
        "frames": [f.tolist() for f in ep.frames],
        "masks": [m.tolist() for m in ep.masks],
        "objects": [{
            "oid": o.oid, "shape": o.shape, "color": o.color, "size": o.size,
            "positions": o.positions.tolist(),
            "visible": o.visible.astype(int).tolist(),
            "container": o.container.tolist(),
            "state": o.state.tolist(),
        } for o in ep.objects],
        "question": ep.question,
        "choices": ep.choices,
        "answer": ep.answer,
        "annotations": ep.annotations,
    }


def episode_from_dict(d: dict) -> Episode:
    objects = [SceneObject(
        oid=o["oid"], shape=o["shape"], color=o["color"], size=o["size"],
        positions=np.array(o["positions"], dtype=float),
        visible=np.array(o["visible"], dtype=bool),
        container=np.array(o["container"], dtype=np.int64),
        state=np.array(o["state"], dtype=np.int64),
    ) for o in d["objects"]]
    return Episode(
        task=d["task"],
        frames=[np.array(f, dtype=np.uint8) for f in d["frames"]],
        masks=[np.array(m, dtype=np.uint8) for m in d["masks"]],
        objects=objects, question=d["question"], choices=d["choices"],
        answer=d["answer"], annotations=d["annotations"],
        n_slots=d["n_slots"], num_frames=d["num_frames"])


def save_dataset(episodes: list[Episode], out_dir: str | Path,
                 manifest_extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.jsonl", "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_dict(ep), sort_keys=True) + "\n")
    manifest = {"count": len(episodes),
                "tasks": sorted({ep.task for ep in episodes})}
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(path: str | Path) -> list[Episode]:
    path = Path(path)
    if path.is_dir():
        path = path / "episodes.jsonl"
    episodes = []
    with open(path) as fh:
        for line in fh:
            episodes.append(episode_from_dict(json.loads(line)))
    return episodes
