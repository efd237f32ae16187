"""Per-cluster adversarial training, checkpoints and inference."""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .formats import write_csv
from .network import (
    Params,
    StyleBank,
    discriminate,
    encode_content,
    encode_style,
    generate,
    init_discriminator,
    init_generator,
    to_batch,
    to_images,
)
from .seeding import stream
from .tensor import AdamState, GradTape, Tensor, adam_step, backward

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "loss_g", "loss_g_l1", "loss_g_adv", "loss_d", "val_l1")
CHECKPOINT_FORMAT = "discgan-checkpoint-v1"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Path | None) -> None:
        super().__init__(f"{message}; last good checkpoint: {last_good}")
        self.last_good = last_good


class CheckpointError(FileNotFoundError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 4
    lambda_rec: float = 100.0
    lambda_adv: float = 1.0
    seed: int = 0
    resolution: int = 64
    cluster: int = 0

    def __post_init__(self) -> None:
        if self.lambda_rec < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_rec == 0 and self.lambda_adv == 0:
            raise ValueError("lambda_rec and lambda_adv cannot both be zero")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1 and lr > 0")


@dataclass
class Pair:
    """Clean content image and its rendered underwater target."""

    id: str
    content: np.ndarray
    target: np.ndarray


@dataclass
class ClusterData:
    train: list[Pair]
    val: list[Pair] = field(default_factory=list)
    style_pool: list[np.ndarray] | None = None

    def pool(self) -> list[np.ndarray]:
        return self.style_pool if self.style_pool is not None else [p.target for p in self.train]


# -- losses ------------------------------------------------------------------


def generator_loss(fake: Tensor, target, d_params: Params, lambda_rec: float = 100.0,
                   lambda_adv: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """``lambda_rec * L1(fake, target) + lambda_adv * mean((D(fake) - 1)^2)``.

    Returns (total, l1 term, adversarial term), the last two unweighted.
    """
    l1 = T.l1_loss(fake, T.as_tensor(target))
    scores = discriminate(fake, d_params)
    adv = T.mse_loss(scores, np.ones_like(scores.data))
    return l1 * lambda_rec + adv * lambda_adv, l1, adv


def discriminator_loss(real, fake, d_params: Params) -> Tensor:
    """Least-squares objective: real patches toward 1, fake patches toward 0."""
    d_real = discriminate(real, d_params)
    d_fake = discriminate(fake, d_params)
    return (T.mse_loss(d_real, np.ones_like(d_real.data))
            + T.mse_loss(d_fake, np.zeros_like(d_fake.data)))


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, gen: Params, disc: Params, *, epoch: int, seed: int, cluster,
                    hyperparameters: dict, bank_seed: int) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 blob per tensor.

    The directory is written beside the target and swapped in, so a crash
    never leaves a half-written checkpoint behind.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    tensors = []
    named = [(f"G.{k}", v) for k, v in gen.items()] + [(f"D.{k}", v) for k, v in disc.items()]
    for i, (name, t) in enumerate(named):
        fname = f"{i:03d}_{name}.f32"
        (tmp / fname).write_bytes(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        tensors.append({"name": name, "shape": list(t.shape), "file": fname})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "cluster": str(cluster),
        "epoch": epoch,
        "seed": seed,
        "bank_seed": bank_seed,
        "hyperparameters": hyperparameters,
        "tensors": tensors,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path) -> tuple[Params, Params, dict]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
    gen: Params = {}
    disc: Params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        raw = (path / entry["file"]).read_bytes()
        if len(raw) != 4 * int(np.prod(shape)):
            raise CheckpointError(f"{entry['file']}: size does not match shape {shape}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        group, name = entry["name"].split(".", 1)
        (gen if group == "G" else disc)[name] = Tensor(arr, requires_grad=True, name=name)
    return gen, disc, manifest


# -- training ----------------------------------------------------------------


def _stack(images: Sequence[np.ndarray]) -> Tensor:
    return to_batch(np.stack(images), np.float32)


def reconstruction_l1(gen: Params, pairs: Sequence[Pair], pool: Sequence[np.ndarray], bank: StyleBank,
                      rng: np.random.Generator, batch_size: int = 16) -> float:
    """Mean L1 between generated and target images, styles drawn from ``pool`` by ``rng``."""
    if not pairs:
        return float("nan")
    picks = rng.integers(len(pool), size=len(pairs))
    total = 0.0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        zs = encode_style([pool[i] for i in picks[start:start + len(chunk)]], bank, with_gram=False)
        fake = generate(encode_content(_stack([p.content for p in chunk]), gen), zs, gen)
        target = _stack([p.target for p in chunk]).data
        total += float(np.abs(fake.data.astype(np.float64) - target).mean()) * len(chunk)
    return total / len(pairs)


def init_params(seed: int, cluster) -> tuple[Params, Params]:
    rng = stream(seed, "init", str(cluster))
    return init_generator(rng), init_discriminator(rng)


def train_cluster(cluster, data: ClusterData, config: TrainConfig, ckpt_dir=None,
                  bank: StyleBank | None = None) -> tuple[Params, list[dict]]:
    """Alternating least-squares GAN training of one cluster's generator.

    Each batch takes one discriminator step on (target, detached fake) and
    one generator step on the composite loss. A checkpoint is written to
    ``ckpt_dir/latest`` after every epoch and the log to
    ``ckpt_dir/train_log.csv``. Nothing outside ``ckpt_dir`` is touched.
    """
    if len(data.train) < 2:
        raise ValueError(f"cluster {cluster} has {len(data.train)} training pairs; need >= 2")
    bank = bank or StyleBank(config.seed)
    pool = data.pool()
    if not pool:
        raise ValueError(f"cluster {cluster} has an empty style pool")
    gen, disc = init_params(config.seed, cluster)
    g_state = AdamState(config.lr, config.beta1, config.beta2)
    d_state = AdamState(config.lr, config.beta1, config.beta2)
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    hyper = asdict(config)
    last_good: Path | None = None

    def checkpoint(epoch: int) -> None:
        nonlocal last_good
        if ckpt_dir is not None:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            last_good = save_checkpoint(ckpt_dir / "latest", gen, disc, epoch=epoch, seed=config.seed,
                                        cluster=cluster, hyperparameters=hyper, bank_seed=bank.seed)

    log: list[dict] = []
    checkpoint(0)
    n = len(data.train)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = stream(config.seed, "shuffle", str(cluster), epoch).permutation(n)
        picks = stream(config.seed, "style-pick", str(cluster), epoch).integers(len(pool), size=n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            content = _stack([data.train[i].content for i in idx])
            target = _stack([data.train[i].target for i in idx])
            zs = encode_style([pool[picks[i]] for i in idx], bank, with_gram=False)

            fake = generate(encode_content(content, gen), zs, gen).detach()
            with GradTape():
                loss_d = discriminator_loss(target, fake, disc)
            adam_step(disc, backward(loss_d), d_state)

            with GradTape():
                fake = generate(encode_content(content, gen), zs, gen)
                loss_g, l1, adv = generator_loss(fake, target, disc, config.lambda_rec, config.lambda_adv)
            adam_step(gen, backward(loss_g), g_state)

            values = (loss_g.item(), l1.item(), adv.item(), loss_d.item())
            if not all(math.isfinite(v) for v in values) or not T.parameters_finite(gen.values()):
                raise TrainingDiverged(f"cluster {cluster}: non-finite loss at epoch {epoch}", last_good)
            sums += values
            batches += 1
            step += 1
        val_l1 = reconstruction_l1(gen, data.val, pool, bank, stream(config.seed, "val-style", str(cluster)))
        means = sums / batches
        log.append({"epoch": epoch, "step": step, "loss_g": means[0], "loss_g_l1": means[1],
                    "loss_g_adv": means[2], "loss_d": means[3], "val_l1": val_l1})
        logger.info("cluster %s epoch %d: L_G %.4f (l1 %.4f) L_D %.4f val_l1 %.4f",
                    cluster, epoch, means[0], means[1], means[3], val_l1)
        checkpoint(epoch)
    if ckpt_dir is not None:
        write_log(ckpt_dir / "train_log.csv", log)
    return gen, log


def write_log(path, log: list[dict]) -> None:
    write_csv(path, LOG_COLUMNS, ([row[c] for c in LOG_COLUMNS] for row in log))


# -- inference ---------------------------------------------------------------


def pick_style(pool_size: int, cluster, seed: int) -> int:
    if pool_size < 1:
        raise ValueError("style pool is empty")
    return int(stream(seed, "style-pick", "inference", str(cluster)).integers(pool_size))


def synthesize(content: np.ndarray, cluster, style_pool: Sequence[np.ndarray], params: Params | None,
               seed: int, bank: StyleBank | None = None) -> np.ndarray:
    """Restyle one clean (H, W, 3) image with a seeded random style from the cluster pool."""
    if params is None:
        raise CheckpointError(f"no trained parameters for cluster {cluster}")
    bank = bank or StyleBank(seed)
    style = style_pool[pick_style(len(style_pool), cluster, seed)]
    out = generate(encode_content(content, params), encode_style(style, bank, with_gram=False), params)
    return to_images(out)[0]
