"""Content encoder, frozen style bank, AdaIN decoder and patch discriminator.

Parameters live in plain ordered ``dict[str, Tensor]`` maps so they can be
serialized in a fixed order. Images enter the networks as NCHW batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .seeding import stream
from .tensor import Tensor

Params = dict[str, Tensor]

SLOPE = 0.2
ENC_WIDTHS = (16, 32, 32)  # content code has ENC_WIDTHS[-1] channels at H/4
BANK_WIDTHS = (8, 24, 32)  # scales at H, H/2, H/4
DISC_WIDTHS = (16, 32)


def to_batch(images, dtype=np.float32) -> Tensor:
    """(H, W, 3) image or list of them -> NCHW tensor; tensors pass through."""
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) images, got {arr.shape}")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_images(x: Tensor) -> np.ndarray:
    return np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).astype(np.float64)


def _he(rng, shape, fan_in, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _conv_param(p: Params, rng, name, c_out, c_in, k, dtype, transpose=False):
    if transpose:
        # fan-in of a stride-2 transposed conv output pixel is about c_in * k * k / 4
        p[f"{name}.w"] = Tensor(_he(rng, (c_in, c_out, k, k), c_in * k * k / 4, dtype), True, f"{name}.w")
    else:
        p[f"{name}.w"] = Tensor(_he(rng, (c_out, c_in, k, k), c_in * k * k, dtype), True, f"{name}.w")
    p[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), True, f"{name}.b")


# -- generator ---------------------------------------------------------------


def init_generator(rng: np.random.Generator, dtype=np.float32) -> Params:
    c1, c2, cz = ENC_WIDTHS
    p: Params = {}
    _conv_param(p, rng, "enc1", c1, 3, 3, dtype)
    _conv_param(p, rng, "enc2", c2, c1, 4, dtype)
    _conv_param(p, rng, "enc3", cz, c2, 4, dtype)
    for blk in ("res1", "res2"):
        _conv_param(p, rng, f"{blk}.conv1", cz, cz, 3, dtype)
        _conv_param(p, rng, f"{blk}.conv2", cz, cz, 3, dtype)
        # start each residual branch near identity
        p[f"{blk}.conv2.w"].data *= 0.1
    _conv_param(p, rng, "up1", c2, cz, 4, dtype, transpose=True)
    _conv_param(p, rng, "up2", c1, c2, 4, dtype, transpose=True)
    _conv_param(p, rng, "out", 3, c1, 3, dtype)
    return p


GENERATOR_LAYERS = ("enc1", "enc2", "enc3", "res1.conv1", "res1.conv2", "res2.conv1", "res2.conv2",
                    "up1", "up2", "out")


def encode_content(images, params: Params) -> Tensor:
    """Content code at 1/4 resolution: one stride-1 and two stride-2 conv blocks."""
    x = to_batch(images, params["enc1.w"].dtype)
    h, w = x.shape[2:]
    if h % 4 or w % 4:
        raise ValueError(f"image size {h}x{w} must be divisible by 4")
    x = T.leaky_relu(T.conv2d(x, params["enc1.w"], params["enc1.b"], 1, 1), SLOPE)
    x = T.leaky_relu(T.conv2d(x, params["enc2.w"], params["enc2.b"], 2, 1), SLOPE)
    return T.leaky_relu(T.conv2d(x, params["enc3.w"], params["enc3.b"], 2, 1), SLOPE)


@dataclass
class StyleCode:
    means: list[np.ndarray]  # per scale, (N, C)
    stds: list[np.ndarray]
    grams: list[np.ndarray]  # per scale, (N, C, C)

    def injection_targets(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(mean, std) for the two AdaIN points: deepest scale, then the two shallow scales joined."""
        return [
            (self.means[2], self.stds[2]),
            (np.concatenate(self.means[:2], axis=1), np.concatenate(self.stds[:2], axis=1)),
        ]


def gram_matrix(feat: np.ndarray) -> np.ndarray:
    """(F F^T) / (H W C) per sample for NCHW features."""
    n, c, h, w = feat.shape
    f = feat.reshape(n, c, h * w).astype(np.float64)
    return f @ f.transpose(0, 2, 1) / (h * w * c)


class StyleBank:
    """Frozen, seed-initialized three-scale conv stack used as the style encoder."""

    def __init__(self, seed: int = 0, dtype=np.float32) -> None:
        self.seed = seed
        rng = stream(seed, "bank")
        self.weights: list[tuple[np.ndarray, np.ndarray, int]] = []
        c_in = 3
        for i, c_out in enumerate(BANK_WIDTHS):
            w = _he(rng, (c_out, c_in, 3, 3), c_in * 9, dtype)
            b = (0.1 * rng.standard_normal(c_out)).astype(dtype)
            self.weights.append((w, b, 1 if i == 0 else 2))
            c_in = c_out

    @property
    def channels(self) -> tuple[int, ...]:
        return BANK_WIDTHS

    def features(self, images) -> list[np.ndarray]:
        x = to_batch(images, self.weights[0][0].dtype).data
        feats = []
        for w, b, stride in self.weights:
            # edge padding keeps a constant image constant at every scale
            x = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
            x = np.maximum(T._conv_fwd(x, w, stride, 0) + b[None, :, None, None], 0.0)
            feats.append(x)
        return feats

    def pooled(self, images: Sequence[np.ndarray]) -> np.ndarray:
        """Global-average-pooled features of every scale, (N, sum(channels)), float64."""
        feats = self.features(images)
        return np.concatenate([f.mean(axis=(2, 3), dtype=np.float64) for f in feats], axis=1)


def encode_style(images, bank: StyleBank, with_gram: bool = True) -> StyleCode:
    means, stds, grams = [], [], []
    for f in bank.features(images):
        m, s = T.instance_stats(Tensor(f))
        means.append(m.data)
        stds.append(s.data)
        if with_gram:
            grams.append(gram_matrix(f))
    return StyleCode(means, stds, grams)


def _resblock(x: Tensor, params: Params, name: str, mean, std, taps) -> Tensor:
    a = T.adain(x, mean, std)
    if taps is not None:
        taps.append(a)
    h = T.leaky_relu(T.conv2d(a, params[f"{name}.conv1.w"], params[f"{name}.conv1.b"], 1, 1), SLOPE)
    h = T.conv2d(h, params[f"{name}.conv2.w"], params[f"{name}.conv2.b"], 1, 1)
    # the skip bypasses AdaIN so the next injection sees content-scale variance
    return x + h


def generate(z_c: Tensor, z_s: StyleCode, params: Params, taps: list | None = None) -> Tensor:
    """Decode a content code restyled by ``z_s`` into an NCHW image in (0, 1).

    Post-AdaIN activations are appended to ``taps`` when it is given.
    """
    targets = z_s.injection_targets()
    for i, (m, _) in enumerate(targets):
        if m.shape[-1] != z_c.shape[1]:
            raise ValueError(f"style code injection {i} has {m.shape[-1]} channels, content code has {z_c.shape[1]}")
    x = z_c
    for blk, (m, s) in zip(("res1", "res2"), targets):
        x = _resblock(x, params, blk, m.astype(z_c.dtype), s.astype(z_c.dtype), taps)
    x = T.leaky_relu(T.conv2d_transpose(x, params["up1.w"], params["up1.b"], 2, 1), SLOPE)
    x = T.leaky_relu(T.conv2d_transpose(x, params["up2.w"], params["up2.b"], 2, 1), SLOPE)
    return T.sigmoid(T.conv2d(x, params["out.w"], params["out.b"], 1, 1))


# -- discriminator -----------------------------------------------------------


DISC_LAYERS = (("d1", 4, 2, 1), ("d2", 4, 2, 1), ("d3", 4, 1, 1))  # name, kernel, stride, padding


def init_discriminator(rng: np.random.Generator, dtype=np.float32) -> Params:
    c1, c2 = DISC_WIDTHS
    p: Params = {}
    _conv_param(p, rng, "d1", c1, 3, 4, dtype)
    _conv_param(p, rng, "d2", c2, c1, 4, dtype)
    _conv_param(p, rng, "d3", 1, c2, 4, dtype)
    return p


def receptive_field() -> int:
    r = 1
    for _, k, s, _ in reversed(DISC_LAYERS):
        r = (r - 1) * s + k
    return r


def score_map_size(size: int) -> int:
    for _, k, s, p in DISC_LAYERS:
        size = T.conv_output_size(size, k, s, p)
    return size


def discriminate(images, params: Params) -> Tensor:
    """Patch scores (N, 1, h, w): one unbounded realism score per receptive-field patch."""
    x = to_batch(images, params["d1.w"].dtype)
    for i, (name, _, stride, pad) in enumerate(DISC_LAYERS):
        x = T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride, pad)
        if i < len(DISC_LAYERS) - 1:
            x = T.leaky_relu(x, SLOPE)
    return x
