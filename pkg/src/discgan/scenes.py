"""Procedural clean scenes with paired depth maps, and dataset splitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import stream

MIN_RESOLUTION = 16


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    resolution: int = 64
    primitives: int = 6
    octaves: int = 4
    near: float = 1.0
    far: float = 8.0


@dataclass
class Sample:
    id: str
    scene_seed: int
    image: np.ndarray
    depth: np.ndarray
    flipped: bool = False


def _value_noise(rng: np.random.Generator, res: int, octaves: int) -> np.ndarray:
    total = np.zeros((res, res, 3))
    weight = 0.0
    for o in range(max(octaves, 1)):
        g = 2 ** (o + 1) + 1
        grid = rng.random((g, g, 3))
        u = np.linspace(0.0, g - 1, res)
        i0 = np.minimum(np.floor(u).astype(int), g - 2)
        f = (u - i0)[:, None]
        # separable bilinear: rows then columns
        rows = grid[i0] * (1 - f)[..., None] + grid[i0 + 1] * f[..., None]
        f = (u - i0)[None, :, None]
        layer = rows[:, i0] * (1 - f) + rows[:, i0 + 1] * f
        amp = 0.5 ** o
        total += amp * layer
        weight += amp
    return total / weight


def _primitive_mask(rng, kind: str, res: int, yy, xx):
    size = rng.uniform(0.15, 0.4) * res
    cy, cx = rng.uniform(0.1, 0.9, 2) * res
    if kind == "circle":
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = r2 <= (size / 2) ** 2
        # sphere-like falloff from the center
        shade = np.sqrt(np.clip(1 - r2 / (size / 2) ** 2, 0, 1))
        return mask, 0.45 + 0.55 * shade
    h, w = size * rng.uniform(0.5, 1.5), size * rng.uniform(0.5, 1.5)
    mask = (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
    if kind == "rect":
        return mask, np.full_like(yy, rng.uniform(0.75, 1.0))
    # gradient ramp along a random axis
    t = (xx - (cx - w / 2)) / w if rng.random() < 0.5 else (yy - (cy - h / 2)) / h
    return mask, 0.25 + 0.75 * np.clip(t, 0, 1)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Clean RGB image (H, W, 3) in [0, 1] and float32 depth (H, W) for ``spec``.

    Every primitive gets its own depth in ``[near, far)`` and stays at least
    partly visible; the background sits at ``far``. Each channel is stretched
    to span [0.05, 0.95].
    """
    res = spec.resolution
    if res < MIN_RESOLUTION:
        raise ValueError(f"resolution must be >= {MIN_RESOLUTION}, got {res}")
    if spec.primitives < 0:
        raise ValueError("primitive count must be >= 0")
    if not 0 <= spec.near < spec.far:
        raise ValueError(f"need 0 <= near < far, got {spec.near}, {spec.far}")
    rng = np.random.default_rng(spec.seed)
    tint = rng.uniform(0.4, 1.0, 3)
    image = _value_noise(rng, res, spec.octaves) * tint
    depth = np.full((res, res), spec.far, dtype=np.float64)

    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    depths = np.sort(rng.uniform(spec.near, spec.far, spec.primitives))[::-1]
    kinds = rng.choice(["rect", "circle", "ramp"], spec.primitives)
    albedos = rng.uniform(0.1, 1.0, (spec.primitives, 3))
    owner = np.full((res, res), -1)
    layers = []
    for i in range(spec.primitives):
        layers.append(_primitive_mask(rng, kinds[i], res, yy, xx))
    for attempt in range(50):
        owner[:] = -1
        for i, (mask, _) in enumerate(layers):
            owner[mask] = i
        hidden = [i for i in range(spec.primitives) if not np.any(owner == i)]
        if not hidden:
            break
        for i in hidden:
            layers[i] = _primitive_mask(rng, kinds[i], res, yy, xx)
    else:
        raise RuntimeError(f"could not place {spec.primitives} visible primitives at {res}px")

    for i, (mask, shade) in enumerate(layers):
        vis = owner == i
        image[vis] = albedos[i] * shade[vis][:, None]
        depth[vis] = depths[i]

    lo = image.min(axis=(0, 1))
    span = np.maximum(image.max(axis=(0, 1)) - lo, 1e-12)
    image = 0.05 + 0.9 * (image - lo) / span
    return np.clip(image, 0.0, 1.0), depth.astype(np.float32)


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def split_sizes(n: int, split: float) -> tuple[int, int]:
    if n < 2:
        raise ValueError(f"need at least 2 scenes, got {n}")
    if not 0 < split < 1:
        raise ValueError(f"split must be in (0, 1), got {split}")
    n_train = min(max(int(n * split + 1e-9), 1), n - 1)
    return n_train, n - n_train


def build_dataset(n: int, split: float = 0.8, seed: int = 0, *, resolution: int = 64,
                  primitives: int = 6, octaves: int = 4, near: float = 1.0, far: float = 8.0,
                  augment: bool = True) -> tuple[list[Sample], list[Sample]]:
    """Generate ``n`` scenes, shuffle deterministically and split into train/val.

    With ``augment`` each training scene is followed by its horizontal flip.
    """
    n_train, _ = split_sizes(n, split)
    rng = stream(seed, "dataset")
    seeds = rng.choice(2 ** 31, size=n, replace=False)
    order = rng.permutation(n)
    train: list[Sample] = []
    val: list[Sample] = []
    for rank, idx in enumerate(order):
        scene_seed = int(seeds[idx])
        img, depth = generate_scene(SceneSpec(scene_seed, resolution, primitives, octaves, near, far))
        sid = f"s{idx:04d}"
        sample = Sample(sid, scene_seed, img, depth)
        if rank < n_train:
            train.append(sample)
            if augment:
                train.append(Sample(sid + "f", scene_seed, flip_horizontal(img),
                                    flip_horizontal(depth), flipped=True))
        else:
            val.append(sample)
    return train, val
