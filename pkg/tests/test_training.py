import builtins
import json
import math
from pathlib import Path

import numpy as np
import pytest

from discgan.network import (
    GENERATOR_LAYERS,
    StyleBank,
    discriminate,
    encode_content,
    encode_style,
    generate,
    init_discriminator,
)
from discgan.physics import load_water_types, render_underwater
from discgan.scenes import build_dataset
from discgan.tensor import GradTape, Tensor, backward
from discgan.training import (
    CheckpointError,
    ClusterData,
    Pair,
    TrainConfig,
    TrainingDiverged,
    discriminator_loss,
    generator_loss,
    init_params,
    load_checkpoint,
    pick_style,
    synthesize,
    train_cluster,
)


def make_data(water_index=0, n=4, res=16, seed=0):
    train, val = build_dataset(n, 0.75, seed=seed, resolution=res, primitives=2)
    water = load_water_types()[water_index]
    pair = lambda s: Pair(s.id, s.image, render_underwater(s.image, s.depth, water))
    return ClusterData([pair(s) for s in train], [pair(s) for s in val])


def constant_disc(value):
    d = init_discriminator(np.random.default_rng(0))
    return {k: Tensor(np.full_like(v.data, value) if k == "d3.b" else np.zeros_like(v.data))
            for k, v in d.items()}


def batch(seed, shape=(2, 3, 16, 16)):
    return Tensor(np.random.default_rng(seed).random(shape).astype(np.float32))


# -- losses ------------------------------------------------------------------


def test_perfect_fake_zero_loss():
    x = batch(0)
    total, l1, adv = generator_loss(x, x.data, constant_disc(1.0))
    assert total.item() == 0.0 and l1.item() == 0.0 and adv.item() == 0.0


def test_no_adversarial_weight_is_pure_l1():
    fake, target = batch(1), batch(2)
    total, l1, _ = generator_loss(fake, target.data, init_discriminator(np.random.default_rng(0)), 100.0, 0.0)
    assert total.item() == pytest.approx(100 * np.abs(fake.data - target.data).mean(), rel=1e-6)


def test_hand_composite_loss():
    target = np.full((1, 3, 16, 16), 0.5)
    fake = Tensor(target + 0.02)
    total, l1, adv = generator_loss(fake, target, constant_disc(0.5), 100.0, 1.0)
    assert l1.item() == pytest.approx(0.02, abs=1e-12)
    assert adv.item() == 0.25
    assert total.item() == pytest.approx(2.25, abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_loss_decomposition(seed):
    fake, target = batch(seed), batch(seed + 10)
    d = init_discriminator(np.random.default_rng(seed))
    lam_rec, lam_adv = 37.0, 2.5
    total, _, _ = generator_loss(fake, target.data, d, lam_rec, lam_adv)
    scores = discriminate(fake, d).data.astype(np.float64)
    l1 = np.abs(fake.data.astype(np.float64) - target.data).mean()
    adv = ((scores - 1) ** 2).mean()
    assert abs(total.item() - (lam_rec * l1 + lam_adv * adv)) < 1e-6 * max(1.0, total.item())


def test_discriminator_loss_targets():
    real, fake = batch(3), batch(4)
    assert discriminator_loss(real, fake, constant_disc(1.0)).item() == 1.0
    assert discriminator_loss(real, fake, constant_disc(0.0)).item() == 1.0
    assert discriminator_loss(real, fake, constant_disc(0.5)).item() == 0.5


def test_config_validation():
    with pytest.raises(ValueError, match="both be zero"):
        TrainConfig(lambda_rec=0, lambda_adv=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda_adv=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# -- training ----------------------------------------------------------------


def test_gradient_reaches_every_generator_layer():
    data = make_data()
    gen, disc = init_params(0, 0)
    bank = StyleBank(0)
    content = Tensor(np.stack([p.content for p in data.train[:2]]).transpose(0, 3, 1, 2).astype(np.float32))
    target = np.stack([p.target for p in data.train[:2]]).transpose(0, 3, 1, 2)
    code = encode_style([p.target for p in data.train[2:4]], bank, with_gram=False)
    with GradTape():
        fake = generate(encode_content(content, gen), code, gen)
        loss, _, _ = generator_loss(fake, target, disc)
    assert loss.item() > 0
    grads = backward(loss)
    for layer in GENERATOR_LAYERS:
        norms = [np.linalg.norm(grads.get(p, 0.0)) for k, p in gen.items() if k.startswith(layer + ".")]
        assert max(norms) > 0, layer


def test_zero_epochs_returns_initialization(tmp_path):
    data = make_data()
    gen, log = train_cluster(0, data, TrainConfig(epochs=0, seed=3), tmp_path / "c0")
    init_gen, init_disc = init_params(3, 0)
    assert log == []
    for k in init_gen:
        assert np.array_equal(gen[k].data, init_gen[k].data)
    g2, d2, manifest = load_checkpoint(tmp_path / "c0" / "latest")
    assert manifest["epoch"] == 0
    for k in init_gen:
        assert np.array_equal(g2[k].data, init_gen[k].data)
    for k in init_disc:
        assert np.array_equal(d2[k].data, init_disc[k].data)


def test_training_is_bit_reproducible(tmp_path):
    data = make_data()
    cfg = TrainConfig(epochs=2, seed=5, batch_size=2)
    g1, log1 = train_cluster(1, data, cfg, tmp_path / "a")
    g2, log2 = train_cluster(1, data, cfg, tmp_path / "b")
    assert log1 == log2
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    for k in g1:
        assert np.array_equal(g1[k].data, g2[k].data)
    assert [row["epoch"] for row in log1] == [1, 2]
    assert log1[-1]["step"] == 2 * math.ceil(len(data.train) / 2)
    assert all(math.isfinite(v) for row in log1 for v in row.values())


def test_seed_changes_training(tmp_path):
    data = make_data()
    _, a = train_cluster(0, data, TrainConfig(epochs=1, seed=1))
    _, b = train_cluster(0, data, TrainConfig(epochs=1, seed=2))
    assert a != b


def test_cluster_isolation(tmp_path, monkeypatch):
    data = make_data()
    train_cluster(0, data, TrainConfig(epochs=1), tmp_path / "0")
    before = {p: p.read_bytes() for p in (tmp_path / "0").rglob("*") if p.is_file()}
    touched = []
    real_open = builtins.open

    def spy(file, *args, **kwargs):
        touched.append(Path(file).resolve())
        return real_open(file, *args, **kwargs)

    monkeypatch.setattr(builtins, "open", spy)
    monkeypatch.setattr(Path, "open", lambda self, *a, **k: spy(self, *a, **k))
    train_cluster(1, make_data(1), TrainConfig(epochs=1), tmp_path / "1")
    monkeypatch.undo()
    a_root = (tmp_path / "0").resolve()
    assert touched and not [p for p in touched if a_root in p.parents]
    assert before == {p: p.read_bytes() for p in (tmp_path / "0").rglob("*") if p.is_file()}


def test_divergence_reports_last_checkpoint(tmp_path):
    data = make_data()
    data.train[0].content = np.full_like(data.train[0].content, np.nan)
    with pytest.raises(TrainingDiverged) as info:
        train_cluster(0, data, TrainConfig(epochs=2, batch_size=8), tmp_path / "c")
    assert info.value.last_good == tmp_path / "c" / "latest"
    assert json.loads((tmp_path / "c" / "latest" / "manifest.json").read_text())["epoch"] == 0


def test_needs_two_pairs():
    data = make_data()
    with pytest.raises(ValueError, match="need >= 2"):
        train_cluster(0, ClusterData(data.train[:1]), TrainConfig(epochs=1))


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_layout(tmp_path):
    gen, _ = train_cluster(2, make_data(), TrainConfig(epochs=1), tmp_path)
    ckpt = tmp_path / "latest"
    manifest = json.loads((ckpt / "manifest.json").read_text())
    assert manifest["cluster"] == "2" and manifest["epoch"] == 1
    assert manifest["hyperparameters"]["lambda_rec"] == 100.0
    names = [t["name"] for t in manifest["tensors"]]
    assert names[: len(gen)] == [f"G.{k}" for k in gen]
    assert all(n.startswith("D.") for n in names[len(gen):])
    for i, entry in enumerate(manifest["tensors"]):
        raw = (ckpt / entry["file"]).read_bytes()
        assert entry["file"].startswith(f"{i:03d}_")
        assert len(raw) == 4 * int(np.prod(entry["shape"]))
    first = manifest["tensors"][0]
    key = first["name"].split(".", 1)[1]
    assert np.array_equal(np.frombuffer((ckpt / first["file"]).read_bytes(), "<f4").reshape(first["shape"]),
                          gen[key].data)
    assert not (tmp_path / "latest.tmp").exists()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


# -- inference ---------------------------------------------------------------


def test_single_style_pool_ignores_seed():
    assert {pick_style(1, 0, seed) for seed in range(20)} == {0}
    assert len({pick_style(10, 0, seed) for seed in range(20)}) > 1


def test_synthesize_deterministic():
    data = make_data()
    gen, _ = init_params(0, 0)
    pool = [p.target for p in data.train]
    a = synthesize(data.val[0].content, 0, pool, gen, seed=4)
    b = synthesize(data.val[0].content, 0, pool, gen, seed=4)
    assert a.shape == data.val[0].content.shape
    assert np.array_equal(a, b)
    with pytest.raises(CheckpointError):
        synthesize(data.val[0].content, 0, pool, None, seed=4)


def test_clusters_give_different_chroma():
    content = make_data().val[0].content
    outputs = []
    for c in range(4):
        data = make_data(c)
        gen, _ = train_cluster(c, data, TrainConfig(epochs=2, batch_size=2))
        outputs.append(synthesize(content, c, [p.target for p in data.train], gen, seed=0))
    hists = [np.stack([np.histogram(o[..., ch], 16, (0, 1))[0] for ch in range(3)]) / o[..., 0].size
             for o in outputs]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(hists[i] - hists[j]).sum() > 0
