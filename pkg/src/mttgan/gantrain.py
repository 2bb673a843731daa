"""Adversarial training: baseline, transfer and mean-teacher (EMA) variants.

The students play the usual minibatch game: a discriminator step on half a
batch of real images (label 1) and half a batch of generated images (label
0), then a generator step through a frozen discriminator on a full batch of
noise vectors with target label 1. In the ``mtt`` variant each student step
is followed by an EMA update of the matching teacher; teachers never receive
gradients and never feed back into the students' game.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ._rng import derive_rng, derive_torch_generator
from .dataset import DatasetError, DatasetManifest, ImageRecord, Label, Origin, Source, quantize
from .nets import (
    LATENT_DIM, NetworkSpec, WeightSet, apply_stats, discriminator_spec, forward,
    generator_spec, init_weights, save_weights,
)

log = logging.getLogger(__name__)


class Variant(str, Enum):
    BASELINE = "baseline"
    TRANSFER = "transfer"
    MTT = "mtt"


class NoisePolicy(str, Enum):
    UNIFORM01 = "uniform01"
    CLIPPED_GAUSSIAN = "clipped_gaussian"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class GanTrainConfig:
    variant: Variant = Variant.MTT
    batch_size: int = 32
    lr: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_epochs: int = 100
    finetune_epochs: int = 100
    ema_alpha: float = 0.999
    noise_policy: NoisePolicy = NoisePolicy.CLIPPED_GAUSSIAN
    seed: int = 0
    log_eps: float = 1e-7
    resolution: int = 128
    gen_filters: int = 128
    disc_filters: int = 64

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "noise_policy", NoisePolicy(self.noise_policy))
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even (half real, half fake)")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")

    def generator_spec(self) -> NetworkSpec:
        return generator_spec(self.resolution, filters=self.gen_filters)

    def discriminator_spec(self) -> NetworkSpec:
        return discriminator_spec(self.resolution, base_filters=self.disc_filters)


@dataclass(frozen=True)
class TrainLogRecord:
    epoch: int
    step: int
    d_loss: float
    g_loss: float
    d_real_mean: float
    d_fake_mean: float
    wallclock: float
    phase: str = ""


@dataclass
class EMAState:
    student: WeightSet
    teacher: WeightSet
    alpha: float
    step: int = 0

    def __post_init__(self):
        if self.student.spec_name != self.teacher.spec_name:
            raise ValueError("student and teacher must share a spec")


@dataclass
class Player:
    """One adversary: spec, student weights, its optimizer and optional teacher."""

    spec: NetworkSpec
    weights: WeightSet
    optimizer: torch.optim.Optimizer
    ema: EMAState | None = None


@dataclass
class GanState:
    generator: Player
    discriminator: Player
    noise_rng: np.random.Generator
    dropout_rng: torch.Generator
    step: int = 0
    epoch: int = 0


@dataclass
class GanResult:
    generator: WeightSet
    discriminator: WeightSet
    logs: list[TrainLogRecord]
    state: GanState = field(repr=False)


# --------------------------------------------------------------------------- #
# noise, losses, EMA


def noise_batch(n: int, policy: NoisePolicy | str, rng: np.random.Generator, dim: int = LATENT_DIM) -> torch.Tensor:
    """``n`` latent vectors with every component in [0, 1]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    policy = NoisePolicy(policy)
    if policy is NoisePolicy.UNIFORM01:
        z = rng.uniform(0.0, 1.0, size=(n, dim))
    else:
        z = np.clip(rng.normal(0.5, 0.25, size=(n, dim)), 0.0, 1.0)
    return torch.from_numpy(z.astype(np.float32))


def _as_tensor(values) -> tuple[torch.Tensor, bool]:
    if isinstance(values, torch.Tensor):
        return values, True
    return torch.as_tensor(np.asarray(values, dtype=np.float64)), False


def d_loss(d_real, d_fake, eps: float = 1e-7):
    """-mean(log(D(x_r) + eps)) - mean(log(1 - D(G(z)) + eps)).

    Tensors in, differentiable tensor out; anything else returns a float.
    """
    real, is_t = _as_tensor(d_real)
    fake, _ = _as_tensor(d_fake)
    loss = -torch.log(real + eps).mean() - torch.log(1.0 - fake + eps).mean()
    return loss if is_t else float(loss)


def g_loss(d_fake, eps: float = 1e-7):
    """Non-saturating generator loss -mean(log(D(G(z)) + eps))."""
    fake, is_t = _as_tensor(d_fake)
    loss = -torch.log(fake + eps).mean()
    return loss if is_t else float(loss)


def ema_update(state: EMAState) -> EMAState:
    """teacher <- alpha * teacher + (1 - alpha) * student, over every array."""
    student, teacher = dict(state.student.arrays()), dict(state.teacher.arrays())
    if student.keys() != teacher.keys():
        raise ValueError("student and teacher weight sets have different entries")
    new_entries: dict[str, dict[str, torch.Tensor]] = {}
    with torch.no_grad():
        for key, t_old in teacher.items():
            s = student[key]
            if s.shape != t_old.shape:
                raise ValueError(f"shape mismatch for {key}: {tuple(s.shape)} vs {tuple(t_old.shape)}")
            layer, param = key.split("/", 1)
            new_entries.setdefault(layer, {})[param] = state.alpha * t_old + (1.0 - state.alpha) * s.detach()
    teacher_ws = WeightSet(state.teacher.spec_name, new_entries)
    return EMAState(state.student, teacher_ws, state.alpha, state.step + 1)


# --------------------------------------------------------------------------- #
# state construction


def _adam(weights: WeightSet, cfg: GanTrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(weights.trainable(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def init_state(cfg: GanTrainConfig, phase: str, generator: WeightSet | None = None,
               discriminator: WeightSet | None = None, ema: bool = False) -> GanState:
    """Fresh optimizers and RNG streams for one training phase.

    Missing weights are initialized from ``cfg.seed``. With ``ema`` the
    teachers start as exact copies of the students.
    """
    g_spec, d_spec = cfg.generator_spec(), cfg.discriminator_spec()
    g_w = generator.clone(requires_grad=True) if generator is not None else init_weights(g_spec, cfg.seed)
    d_w = discriminator.clone(requires_grad=True) if discriminator is not None else init_weights(d_spec, cfg.seed + 1)
    g = Player(g_spec, g_w, _adam(g_w, cfg))
    d = Player(d_spec, d_w, _adam(d_w, cfg))
    if ema:
        g.ema = EMAState(g_w, g_w.clone(), cfg.ema_alpha)
        d.ema = EMAState(d_w, d_w.clone(), cfg.ema_alpha)
    return GanState(g, d, derive_rng(cfg.seed, phase, "noise"), derive_torch_generator(cfg.seed, phase, "dropout"))


def _check_finite(loss: torch.Tensor, what: str, state: GanState) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite {what} at step {state.step} (epoch {state.epoch})")


def _images(batch) -> torch.Tensor:
    x = torch.as_tensor(batch, dtype=torch.float32)
    return x.unsqueeze(-1) if x.dim() == 3 else x


def d_step(state: GanState, real_batch, cfg: GanTrainConfig) -> tuple[WeightSet, dict]:
    """One Adam step of the discriminator student on real (1) vs generated (0)."""
    real = _images(real_batch)
    g, d = state.generator, state.discriminator
    with torch.no_grad():
        z = noise_batch(real.shape[0], cfg.noise_policy, state.noise_rng)
        fake = forward(g.weights, g.spec, z, "infer")
    probs = forward(d.weights, d.spec, torch.cat([real, fake]), "train", rng=state.dropout_rng)
    p_real, p_fake = probs[: real.shape[0]], probs[real.shape[0]:]
    loss = d_loss(p_real, p_fake, cfg.log_eps)
    _check_finite(loss, "discriminator loss", state)
    d.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    d.optimizer.step()
    if d.ema is not None:
        d.ema = ema_update(d.ema)
    return d.weights, {"d_loss": float(loss.detach()), "d_real_mean": float(p_real.detach().mean()),
                      "d_fake_mean": float(p_fake.detach().mean())}


def g_step(state: GanState, cfg: GanTrainConfig) -> tuple[WeightSet, dict]:
    """One Adam step of the generator student through the frozen discriminator."""
    g, d = state.generator, state.discriminator
    z = noise_batch(cfg.batch_size, cfg.noise_policy, state.noise_rng)
    stats: dict = {}
    fake = forward(g.weights, g.spec, z, "train", stats=stats)
    for t in d.weights.trainable():
        t.requires_grad_(False)
    try:
        probs = forward(d.weights, d.spec, fake, "train", rng=state.dropout_rng)
    finally:
        for t in d.weights.trainable():
            t.requires_grad_(True)
    loss = g_loss(probs, cfg.log_eps)
    _check_finite(loss, "generator loss", state)
    g.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    g.optimizer.step()
    apply_stats(g.weights, stats)
    if g.ema is not None:
        g.ema = ema_update(g.ema)
    return g.weights, {"g_loss": float(loss.detach())}


# --------------------------------------------------------------------------- #
# phases


def _pool_tensor(manifest: DatasetManifest, resolution: int) -> torch.Tensor:
    if len(manifest) == 0:
        raise DatasetError("training manifest is empty")
    pixels = manifest.stack()
    if pixels.shape[1:] != (resolution, resolution):
        raise DatasetError(f"training images are {pixels.shape[1:]}, expected {resolution}x{resolution}")
    return torch.from_numpy(pixels).unsqueeze(-1)


def checkpoint_name(variant: str, phase: str, epoch: int | str, role: str) -> str:
    tag = f"e{epoch:03d}" if isinstance(epoch, int) else epoch
    return f"{variant}_{phase}_{tag}_{role}.safetensors"


def save_state(state: GanState, directory: Path, variant: str, phase: str, epoch: int | str) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    roles = {"student_G": state.generator.weights, "student_D": state.discriminator.weights}
    if state.generator.ema is not None:
        roles["teacher_G"] = state.generator.ema.teacher
        roles["teacher_D"] = state.discriminator.ema.teacher
    return [save_weights(ws, directory / checkpoint_name(variant, phase, epoch, role)) for role, ws in roles.items()]


def run_phase(state: GanState, pool: DatasetManifest, epochs: int, cfg: GanTrainConfig, phase: str, *,
              checkpoint_dir: Path | None = None, log_path: Path | None = None) -> list[TrainLogRecord]:
    """Train for ``epochs`` passes over ``pool`` (16 real images per D step)."""
    data = _pool_tensor(pool, cfg.resolution)
    half = cfg.batch_size // 2
    n = data.shape[0]
    steps_per_epoch = max(1, n // half)
    shuffle_rng = derive_rng(cfg.seed, phase, "shuffle")
    logs: list[TrainLogRecord] = []
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        state.epoch = epoch
        order = shuffle_rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = torch.from_numpy(order[s * half:(s + 1) * half])
            try:
                _, d_info = d_step(state, data[idx], cfg)
                _, g_info = g_step(state, cfg)
            except TrainingDiverged as exc:
                if checkpoint_dir is not None:
                    saved = save_state(state, checkpoint_dir, cfg.variant.value, phase, "diverged")
                    exc.checkpoint = saved[0].parent
                raise
            state.step += 1
            rec = TrainLogRecord(epoch, state.step, d_info["d_loss"], g_info["g_loss"], d_info["d_real_mean"],
                                 d_info["d_fake_mean"], time.perf_counter() - t0, phase)
            logs.append(rec)
            if log_path is not None:
                append_log(log_path, rec)
        log.info("%s %s epoch %d/%d d_loss=%.4f g_loss=%.4f", cfg.variant.value, phase, epoch, epochs,
                 logs[-1].d_loss, logs[-1].g_loss)
        if checkpoint_dir is not None:
            save_state(state, checkpoint_dir, cfg.variant.value, phase, epoch)
    return logs


def pretrain(cfg: GanTrainConfig, kaggle_pool: DatasetManifest, **kw) -> GanResult:
    """Unconditional GAN training on the pooled Kaggle images from random init."""
    state = init_state(cfg, "pretrain")
    logs = run_phase(state, kaggle_pool, cfg.pretrain_epochs, cfg, "pretrain", **kw)
    return GanResult(state.generator.weights, state.discriminator.weights, logs, state)


def finetune(cfg: GanTrainConfig, covid_pool: DatasetManifest, start: GanResult | None = None, **kw) -> GanResult:
    """COVID training phase; EMA teachers are kept iff ``cfg.variant`` is mtt."""
    use_ema = cfg.variant is Variant.MTT
    state = init_state(cfg, "finetune", start.generator if start else None,
                       start.discriminator if start else None, ema=use_ema)
    logs = run_phase(state, covid_pool, cfg.finetune_epochs, cfg, "finetune", **kw)
    if use_ema:
        return GanResult(state.generator.ema.teacher, state.discriminator.ema.teacher, logs, state)
    return GanResult(state.generator.weights, state.discriminator.weights, logs, state)


def train(cfg: GanTrainConfig, kaggle_train: DatasetManifest | None, covid_train: DatasetManifest, *,
          pretrained: GanResult | None = None, checkpoint_dir: str | Path | None = None,
          log_path: str | Path | None = None) -> GanResult:
    """Full schedule for one variant.

    baseline: COVID only from random init. transfer: Kaggle pretraining, then
    COVID fine-tuning. mtt: as transfer, with EMA teachers during fine-tuning;
    the teacher generator and discriminator are returned. ``pretrained`` lets
    transfer and mtt share one pretraining run.
    """
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    lp = Path(log_path) if log_path is not None else None
    if len(covid_train) == 0:
        raise DatasetError("COVID training manifest is empty")
    logs: list[TrainLogRecord] = []
    start = None
    if cfg.variant is not Variant.BASELINE:
        if pretrained is None:
            if kaggle_train is None or len(kaggle_train) == 0:
                raise DatasetError("Kaggle training manifest is empty")
            pretrained = pretrain(cfg, kaggle_train, checkpoint_dir=ckpt, log_path=lp)
        logs.extend(pretrained.logs)
        start = pretrained
    result = finetune(cfg, covid_train, start, checkpoint_dir=ckpt, log_path=lp)
    if ckpt is not None:
        save_state(result.state, ckpt, cfg.variant.value, "finetune", "final")
    return GanResult(result.generator, result.discriminator, logs + result.logs, result.state)


# --------------------------------------------------------------------------- #
# sampling and logs


def generate_images(generator: WeightSet, spec: NetworkSpec, n: int, policy: NoisePolicy | str,
                    rng: np.random.Generator, batch: int = 64) -> np.ndarray:
    """(n, H, W) float32 images from the generator in inference mode."""
    z = noise_batch(n, policy, rng, dim=spec.input_shape[0])
    out = []
    with torch.no_grad():
        for i in range(0, n, batch):
            out.append(forward(generator, spec, z[i:i + batch], "infer")[..., 0].numpy())
    return np.concatenate(out).astype(np.float32)


def generate_dataset(generator: WeightSet, n: int, cfg: GanTrainConfig, seed: int | None = None,
                     tag: str = "gen", spec: NetworkSpec | None = None) -> DatasetManifest:
    """``n`` synthetic COVID records sampled with the stream ``(seed, "generate", tag)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = spec or cfg.generator_spec()
    rng = derive_rng(cfg.seed if seed is None else seed, "generate", tag)
    images = generate_images(generator, spec, n, cfg.noise_policy, rng)
    records = tuple(
        ImageRecord(f"synthetic/{tag}/{i:05d}", Label.COVID, Origin.SYNTHETIC, Source.GENERATOR, data=quantize(img))
        for i, img in enumerate(images)
    )
    return DatasetManifest(records, f"generated n={n} tag={tag} variant={cfg.variant.value}")


LOG_FIELDS = [f.name for f in fields(TrainLogRecord)]


def append_log(path: Path, rec: TrainLogRecord) -> None:
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow(asdict(rec))


def read_log(path: str | Path) -> list[TrainLogRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TrainLogRecord(int(r["epoch"]), int(r["step"]), float(r["d_loss"]), float(r["g_loss"]),
                           float(r["d_real_mean"]), float(r["d_fake_mean"]), float(r["wallclock"]), r["phase"])
            for r in rows]


def probe_d_loss(generator: WeightSet, discriminator: WeightSet, cfg: GanTrainConfig, real_batch,
                 z: torch.Tensor) -> float:
    """Discriminator loss on a fixed probe (real images, fixed noise), inference mode."""
    with torch.no_grad():
        fake = forward(generator, cfg.generator_spec(), z, "infer")
        d_spec = cfg.discriminator_spec()
        return float(d_loss(forward(discriminator, d_spec, _images(real_batch), "infer"),
                            forward(discriminator, d_spec, fake, "infer"), cfg.log_eps))


def losses_finite(logs: Sequence[TrainLogRecord]) -> bool:
    return all(math.isfinite(r.d_loss) and math.isfinite(r.g_loss) for r in logs)
