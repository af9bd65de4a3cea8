"""Per-frame object embeddings from episodes, via three backends.

The oracle backend embeds ground-truth object state directly; the
masked-image backend runs a small learned residual convnet over each
mask-times-image crop; the hyperpixel backend is the object-free ablation
that flattens a convnet feature map into region vectors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .scenes.common import Episode

ORACLE_FEATURES = 16  # shape(4) + color(6) + state(3) + position(2) + visible(1)


@dataclass
class SlotTensor:
    """Object embeddings [F x N_o x d] plus the slot permutation applied."""

    mu: Tensor
    applied_permutations: np.ndarray  # [F, N_o] int, slot -> source slot
    source: str                       # oracle | masked-image | hyperpixel

    @property
    def num_frames(self) -> int:
        return self.mu.shape[0]

    @property
    def n_slots(self) -> int:
        return self.mu.shape[1]


def oracle_features(episode: Episode) -> np.ndarray:
    """Ground-truth per-slot features [F, N_o, ORACLE_FEATURES].

    Empty and invisible slots are exact zero vectors (an occluded object
    is as unobservable as an absent one).
    """
    F, N = episode.num_frames, episode.n_slots
    arena = max(float(np.max(o.positions)) for o in episode.objects) + 0.5
    feats = np.zeros((F, N, ORACLE_FEATURES))
    for obj in episode.objects:
        for t in range(F):
            if not obj.visible[t]:
                continue
            v = np.zeros(ORACLE_FEATURES)
            v[obj.shape] = 1.0
            v[4 + obj.color] = 1.0
            if obj.state[t] >= 0:
                v[10 + obj.state[t]] = 1.0
            v[13] = obj.positions[t, 0] / arena
            v[14] = obj.positions[t, 1] / arena
            v[15] = 1.0
            feats[t, obj.oid] = v
    return feats


def oracle_encode(episode: Episode, d: int, shuffle: bool = False,
                  seed: int = 0) -> SlotTensor:
    """Embed ground-truth object state into R^d, zero-padded.

    With ``shuffle`` an independent random slot permutation is applied per
    frame, reproducing the slot-switching behaviour of learned segmenters.
    """
    if len({o.oid for o in episode.objects}) > episode.n_slots:
        raise ValueError("episode has more objects than slots")
    if d < ORACLE_FEATURES:
        raise ValueError(f"d must be >= {ORACLE_FEATURES} for oracle features")
    feats = oracle_features(episode)
    F, N = feats.shape[:2]
    out = np.zeros((F, N, d))
    out[:, :, :ORACLE_FEATURES] = feats
    perms = np.tile(np.arange(N), (F, 1))
    if shuffle:
        rng = np.random.default_rng([seed, 0x0E0C])
        for t in range(F):
            perms[t] = rng.permutation(N)
            out[t] = out[t][perms[t]]
    return SlotTensor(mu=Tensor(out), applied_permutations=perms,
                      source="oracle")


# -- masked-image backend -------------------------------------------------------

def init_masked_image_params(d: int, channels: int = 8, seed: int = 0,
                             prefix: str = "imgenc") -> dict[str, Tensor]:
    """Residual convnet: a stem conv then 3 blocks of 2 convs each."""
    rng = np.random.default_rng([seed, 0x1E0C])
    p: dict[str, Tensor] = {}

    def conv(name, cin, cout, k=3):
        scale = np.sqrt(2.0 / (cin * k * k))
        p[f"{prefix}.{name}.w"] = nm.parameter(
            rng.normal(0, scale, (cout, cin, k, k)), name=f"{prefix}.{name}.w")
        p[f"{prefix}.{name}.b"] = nm.parameter(
            np.zeros(cout), name=f"{prefix}.{name}.b")

    conv("stem", 3, channels)
    for blk in range(3):
        conv(f"block{blk}.conv0", channels, channels)
        conv(f"block{blk}.conv1", channels, channels)
    p[f"{prefix}.out.w"] = nm.parameter(
        rng.normal(0, np.sqrt(1.0 / channels), (channels, d)),
        name=f"{prefix}.out.w")
    p[f"{prefix}.out.b"] = nm.parameter(np.zeros(d), name=f"{prefix}.out.b")
    return p


def _resnet_forward(x: Tensor, params: dict[str, Tensor],
                    prefix: str = "imgenc") -> Tensor:
    h = nm.relu(nm.conv2d(x, params[f"{prefix}.stem.w"],
                          params[f"{prefix}.stem.b"], stride=2))
    for blk in range(3):
        r = nm.relu(nm.conv2d(h, params[f"{prefix}.block{blk}.conv0.w"],
                              params[f"{prefix}.block{blk}.conv0.b"]))
        r = nm.conv2d(r, params[f"{prefix}.block{blk}.conv1.w"],
                      params[f"{prefix}.block{blk}.conv1.b"])
        h = nm.relu(h + r)
    pooled = h.mean(axis=(2, 3))  # [B, C]
    return pooled @ params[f"{prefix}.out.w"] + params[f"{prefix}.out.b"]


def masked_image_encode(episode: Episode, params: dict[str, Tensor],
                        prefix: str = "imgenc") -> SlotTensor:
    """v_ti = convnet(mask_ti * image_t), differentiable end to end."""
    if not episode.frames:
        raise ValueError("episode has no rendered frames")
    F, N = episode.num_frames, episode.n_slots
    imgs = np.stack(episode.frames).astype(nm.get_default_dtype()) / 255.0
    masks = np.stack(episode.masks).astype(nm.get_default_dtype())
    # [F, N, 3, H, W]: each slot sees the image with its mask applied
    masked = masks[:, :, None] * imgs.transpose(0, 3, 1, 2)[:, None]
    flat = Tensor(masked.reshape(F * N, 3, *imgs.shape[1:3]))
    enc = _resnet_forward(flat, params, prefix)
    mu = enc.reshape((F, N, enc.shape[-1]))
    return SlotTensor(mu=mu,
                      applied_permutations=np.tile(np.arange(N), (F, 1)),
                      source="masked-image")


# -- hyperpixel ablation backend -----------------------------------------------

def init_hyperpixel_params(d: int, channels: int = 8, seed: int = 0,
                           prefix: str = "hyper") -> dict[str, Tensor]:
    if d < 3:
        raise ValueError("d too small for hyperpixel features plus coordinates")
    rng = np.random.default_rng([seed, 0x4EAD])
    p: dict[str, Tensor] = {}
    cins = [3, channels, channels]
    for i, cin in enumerate(cins):
        scale = np.sqrt(2.0 / (cin * 9))
        p[f"{prefix}.conv{i}.w"] = nm.parameter(
            rng.normal(0, scale, (channels, cin, 3, 3)),
            name=f"{prefix}.conv{i}.w")
        p[f"{prefix}.conv{i}.b"] = nm.parameter(
            np.zeros(channels), name=f"{prefix}.conv{i}.b")
    p[f"{prefix}.out.w"] = nm.parameter(
        rng.normal(0, np.sqrt(1.0 / channels), (channels, d - 2)),
        name=f"{prefix}.out.w")
    p[f"{prefix}.out.b"] = nm.parameter(np.zeros(d - 2), name=f"{prefix}.out.b")
    return p


def hyperpixel_encode(episode: Episode, params: dict[str, Tensor],
                      prefix: str = "hyper") -> Tensor:
    """Flatten a stride-8 feature map into region vectors [F, R, d].

    The last two feature dimensions carry each region's normalized
    (row, col) so the transformer keeps 2-D positional identity.
    """
    if not episode.frames:
        raise ValueError("episode has no rendered frames")
    imgs = np.stack(episode.frames).astype(nm.get_default_dtype()) / 255.0
    h = Tensor(imgs.transpose(0, 3, 1, 2))
    for i in range(3):
        h = nm.relu(nm.conv2d(h, params[f"{prefix}.conv{i}.w"],
                              params[f"{prefix}.conv{i}.b"], stride=2))
    F, C, GH, GW = h.shape
    feat = nm.transpose(h.reshape((F, C, GH * GW)), (0, 2, 1))  # [F, R, C]
    feat = feat @ params[f"{prefix}.out.w"] + params[f"{prefix}.out.b"]
    rows, cols = np.mgrid[0:GH, 0:GW]
    coords = np.stack([rows / max(GH - 1, 1), cols / max(GW - 1, 1)],
                      axis=-1).reshape(1, GH * GW, 2)
    coords = Tensor(np.broadcast_to(coords, (F, GH * GW, 2)).copy())
    return nm.concat([feat, coords], axis=2)


# -- optional on-disk cache ------------------------------------------------------

def cache_key(backend: str, params: dict[str, Tensor] | None,
              extra: str = "") -> str:
    h = hashlib.sha256(backend.encode())
    if params:
        for name in sorted(params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(params[name].data).tobytes())
    h.update(extra.encode())
    return h.hexdigest()[:16]


def cached_encode(cache_dir: str | Path, index: int, key: str, encode_fn):
    """Encode via ``encode_fn`` with an .npz cache keyed by (backend, params)."""
    path = Path(cache_dir) / f"slots_{key}_{index}.npz"
    if path.exists():
        with np.load(path) as z:
            return SlotTensor(mu=Tensor(z["mu"]),
                              applied_permutations=z["perms"],
                              source=str(z["source"]))
    st = encode_fn()
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, mu=st.mu.data, perms=st.applied_permutations,
             source=st.source)
    return st
