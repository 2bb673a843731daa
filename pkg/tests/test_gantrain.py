import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mttgan._rng import derive_rng
from oracles import fd_check as _fd_check, toy_pair as _toy_pair
from mttgan.dataset import DatasetManifest, ImageRecord, Label, Origin, Source
from mttgan.gantrain import (
    EMAState, GanTrainConfig, TrainingDiverged, Variant, checkpoint_name, d_loss, d_step, ema_update, finetune,
    g_loss, g_step, generate_dataset, init_state, noise_batch, pretrain, read_log, train,
)
from mttgan.nets import WeightSet, forward, init_weights


def scalar_ws(value: float, name="toy") -> WeightSet:
    return WeightSet(name, {"w": {"kernel": torch.tensor([value], dtype=torch.float64)}})


def toy_pool(n=40, res=8, seed=0, label=Label.COVID) -> DatasetManifest:
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        img = np.clip(0.5 + 0.2 * rng.standard_normal((res, res)), 0, 1).astype(np.float32)
        recs.append(ImageRecord(f"toy/{seed}/{i}", label, Origin.REAL, Source.COVID_REPO, data=img))
    return DatasetManifest(tuple(recs), "toy")


TOY = dict(resolution=8, gen_filters=4, disc_filters=2, pretrain_epochs=2, finetune_epochs=2, lr=1e-3)


def test_loss_identities():
    assert abs(d_loss([0.5], [0.5]) - 2 * math.log(2)) < 1e-5
    assert abs(g_loss([0.5]) - math.log(2)) < 1e-5
    t = d_loss(torch.tensor([0.9, 0.8]), torch.tensor([0.1]))
    assert isinstance(t, torch.Tensor)
    assert abs(float(t) - (-(math.log(0.9 + 1e-7) + math.log(0.8 + 1e-7)) / 2 - math.log(0.9 + 1e-7))) < 1e-6


def test_losses_finite_at_saturation():
    assert math.isfinite(d_loss([0.0], [1.0]))
    assert math.isfinite(g_loss([0.0]))


def test_ema_identities():
    s, t = scalar_ws(4.0), scalar_ws(2.0)
    assert float(ema_update(EMAState(s, t, 0.5)).teacher.entries["w"]["kernel"]) == 3.0
    assert ema_update(EMAState(s, t, 1.0)).teacher.equal(t)
    assert ema_update(EMAState(s, t, 0.0)).teacher.equal(s)
    st_ = ema_update(EMAState(s, t, 0.5))
    assert st_.step == 1 and st_.student is s
    # input teacher untouched
    assert float(t.entries["w"]["kernel"]) == 2.0


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 1), st.integers(0, 60))
@settings(max_examples=200, deadline=None)
def test_ema_telescopes(theta, theta0, alpha, k):
    state = EMAState(scalar_ws(theta), scalar_ws(theta0), alpha)
    for _ in range(k):
        state = ema_update(state)
    got = float(state.teacher.entries["w"]["kernel"])
    assert abs(got - (theta + alpha ** k * (theta0 - theta))) <= 1e-10 * max(1.0, abs(theta), abs(theta0))
    assert min(theta, theta0) - 1e-12 <= got <= max(theta, theta0) + 1e-12


def test_ema_shape_mismatch():
    a = WeightSet("x", {"w": {"kernel": torch.zeros(2)}})
    b = WeightSet("x", {"w": {"kernel": torch.zeros(3)}})
    with pytest.raises(ValueError):
        ema_update(EMAState(a, b, 0.9))


def test_noise_policies():
    rng = derive_rng(0, "noise-test")
    z = noise_batch(2000, "clipped_gaussian", rng)
    assert z.shape == (2000, 100) and z.dtype == torch.float32
    assert float(z.min()) >= 0 and float(z.max()) <= 1
    assert abs(float(z.mean()) - 0.5) < 0.01
    u = noise_batch(2000, "uniform01", rng)
    assert abs(float(u.std()) - (1 / 12) ** 0.5) < 0.01
    with pytest.raises(ValueError):
        noise_batch(0, "uniform01", rng)


def test_gradient_check_discriminator_loss():
    g_spec, d_spec, gw, dw = _toy_pair()
    z = torch.rand(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    real = torch.rand(4, 4, 4, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def loss():
        with torch.no_grad():
            fake = forward(gw, g_spec, z, "infer")
        probs = forward(dw, d_spec, torch.cat([real, fake]), "train", rng=torch.Generator().manual_seed(3))
        return d_loss(probs[:4], probs[4:])

    _fd_check(loss, dw.trainable())


def test_gradient_check_generator_loss():
    g_spec, d_spec, gw, dw = _toy_pair()
    z = torch.rand(6, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))

    def loss():
        fake = forward(gw, g_spec, z, "train")
        return g_loss(forward(dw, d_spec, fake, "train", rng=torch.Generator().manual_seed(4)))

    _fd_check(loss, gw.trainable())


def test_d_step_does_not_touch_generator_and_g_step_freezes_d():
    cfg = GanTrainConfig(**TOY)
    state = init_state(cfg, "finetune", ema=True)
    g0, d0 = state.generator.weights.clone(), state.discriminator.weights.clone()
    real = toy_pool(16).stack()
    _, info = d_step(state, real, cfg)
    assert state.generator.weights.equal(g0)
    assert not state.discriminator.weights.equal(d0)
    assert set(info) == {"d_loss", "d_real_mean", "d_fake_mean"}
    d1 = state.discriminator.weights.clone()
    g_step(state, cfg)
    assert state.discriminator.weights.equal(d1)
    assert not state.generator.weights.equal(g0)
    assert state.generator.ema.step == 1 and state.discriminator.ema.step == 1


def test_teacher_starts_as_copy_and_gets_no_gradients():
    cfg = GanTrainConfig(**TOY)
    state = init_state(cfg, "finetune", ema=True)
    assert state.generator.ema.teacher.equal(state.generator.weights)
    assert all(not t.requires_grad for _, t in state.generator.ema.teacher.arrays())


def test_transfer_and_mtt_students_identical():
    kag, cov = toy_pool(32, seed=1, label=Label.NORMAL), toy_pool(32, seed=2)
    pre = pretrain(GanTrainConfig(variant="transfer", **TOY), kag)
    tr = finetune(GanTrainConfig(variant="transfer", **TOY), cov, pre)
    mt = finetune(GanTrainConfig(variant="mtt", **TOY), cov, pre)
    assert tr.state.generator.weights.equal(mt.state.generator.weights)
    assert tr.state.discriminator.weights.equal(mt.state.discriminator.weights)
    # the mtt result is the teacher, which differs from the student
    assert mt.generator is mt.state.generator.ema.teacher
    assert not mt.generator.equal(mt.state.generator.weights)
    assert [r.d_loss for r in tr.logs] == [r.d_loss for r in mt.logs]


def test_baseline_ignores_kaggle_and_training_is_deterministic(tmp_path):
    cov = toy_pool(32, seed=2)
    cfg = GanTrainConfig(variant="baseline", **TOY)
    a = train(cfg, None, cov, checkpoint_dir=tmp_path / "a", log_path=tmp_path / "a.csv")
    b = train(cfg, toy_pool(8, seed=9), cov)
    assert a.generator.equal(b.generator) and a.discriminator.equal(b.discriminator)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert checkpoint_name("baseline", "finetune", 1, "student_G") in names
    assert checkpoint_name("baseline", "finetune", "final", "student_D") in names
    logs = read_log(tmp_path / "a.csv")
    assert len(logs) == cfg.finetune_epochs * (32 // 16)
    assert [r.d_loss for r in logs] == [r.d_loss for r in a.logs]


def test_mtt_checkpoints_include_teachers(tmp_path):
    cfg = GanTrainConfig(variant="mtt", **TOY)
    train(cfg, toy_pool(16, seed=1, label=Label.NORMAL), toy_pool(16, seed=2), checkpoint_dir=tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert checkpoint_name("mtt", "finetune", 2, "teacher_G") in names
    assert checkpoint_name("mtt", "pretrain", 2, "student_G") in names
    assert checkpoint_name("mtt", "pretrain", 2, "teacher_G") not in names


def test_divergence_raises_with_checkpoint(tmp_path):
    pool = toy_pool(16)
    bad = pool.stack().copy()
    bad[:] = np.nan
    cfg = GanTrainConfig(**TOY)
    state = init_state(cfg, "finetune")
    with pytest.raises(TrainingDiverged):
        d_step(state, bad, cfg)


def test_generate_dataset_is_seeded():
    cfg = GanTrainConfig(**TOY)
    gw = init_weights(cfg.generator_spec(), 0)
    a = generate_dataset(gw, 5, cfg, seed=3)
    b = generate_dataset(gw, 5, cfg, seed=3)
    c = generate_dataset(gw, 5, cfg, seed=4)
    assert [r.id for r in a] == [f"synthetic/gen/{i:05d}" for i in range(5)]
    assert all(r.origin is Origin.SYNTHETIC and r.label is Label.COVID for r in a)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
    assert not np.array_equal(a.records[0].pixels, c.records[0].pixels)


def test_config_validation():
    with pytest.raises(ValueError):
        GanTrainConfig(batch_size=31)
    with pytest.raises(ValueError):
        GanTrainConfig(ema_alpha=1.5)
    with pytest.raises(ValueError):
        GanTrainConfig(variant="cyclegan")
    assert GanTrainConfig().variant is Variant.MTT
