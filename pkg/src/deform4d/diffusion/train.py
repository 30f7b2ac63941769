"""Training loops for the shape and motion diffusion models."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import torch

from .. import fields
from ..dictionary import FeatureLayout
from ..fields import DTYPE
from .models import DenoiserConfig, MotionDenoiser, ModelError, ShapeDenoiser, TokenNorm
from .schedule import DiffusionSchedule, forward_noise


@dataclass
class DiffusionTrainConfig:
    epochs: int = 1000
    batch: int = 32
    lr: float = 1e-3
    lr_final_factor: float = 0.01  # cosine decay floor, as a fraction of lr
    seed: int = 0
    cond_noise_max: int = 50
    reversal_prob: float = 0.5
    log_path: str | None = None


@dataclass
class ShapeDiffusionModel:
    denoiser: ShapeDenoiser
    norm: TokenNorm
    schedule: DiffusionSchedule
    layout: FeatureLayout
    config: DenoiserConfig
    losses: list = field(default_factory=list)


@dataclass
class MotionDiffusionModel:
    denoiser: MotionDenoiser
    norm: TokenNorm
    cond_norm: TokenNorm
    schedule: DiffusionSchedule
    layout: FeatureLayout
    config: DenoiserConfig
    losses: list = field(default_factory=list)

    def normalize_cond(self, cond):
        return self.cond_norm.normalize(cond)


def _simple_loss(pred, target):
    """Squared L2 norm of the token error, averaged over the batch."""
    return (pred - target).pow(2).reshape(len(pred), -1).sum(-1).mean()


def train_shape_diffusion(
    features,
    schedule: DiffusionSchedule,
    layout: FeatureLayout,
    denoiser_config: DenoiserConfig,
    train_config: DiffusionTrainConfig,
) -> ShapeDiffusionModel:
    """Fit the clean-sample objective on flattened, normalized shape features."""
    features = torch.as_tensor(features, dtype=DTYPE)
    if features.ndim != 2 or features.shape[1] != layout.total_dim:
        raise ModelError("features must be (N, layout.total_dim)")
    norm = TokenNorm.from_features(features)
    x0 = norm.normalize(features)
    torch.manual_seed(train_config.seed)
    model = ShapeDenoiser(layout, denoiser_config)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=train_config.epochs, eta_min=train_config.lr * train_config.lr_final_factor
    )
    gen = torch.Generator().manual_seed(train_config.seed + 1)
    n = len(x0)
    losses = []
    for epoch in range(train_config.epochs):
        idx = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n, train_config.batch):
            rows = idx[start : start + train_config.batch]
            batch = x0[rows]
            t = torch.randint(0, schedule.n_steps, (len(rows),), generator=gen)
            eps = torch.randn(batch.shape, generator=gen, dtype=DTYPE)
            x_t = forward_noise(batch, t, eps, schedule)
            pred = model(x_t, t)
            loss = _simple_loss(pred, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(rows)
            seen += len(rows)
        sched.step()
        epoch_loss /= seen
        if not math.isfinite(epoch_loss):
            raise fields.TrainingDiverged(f"train_shape_diffusion: loss {epoch_loss}")
        losses.append(epoch_loss)
        fields._log_epoch(train_config.log_path, epoch, epoch_loss)
    model.eval()
    return ShapeDiffusionModel(model, norm, schedule, layout, denoiser_config, losses)


def _noise_condition(cond, steps, schedule, gen):
    """Forward-diffuse a condition vector `steps` times; 0 leaves it unchanged."""
    if steps <= 0:
        return cond
    eps = torch.randn(cond.shape, generator=gen, dtype=DTYPE)
    return forward_noise(cond, steps - 1, eps, schedule)


def train_motion_diffusion(
    sequences,
    schedule: DiffusionSchedule,
    layout: FeatureLayout,
    denoiser_config: DenoiserConfig,
    train_config: DiffusionTrainConfig,
) -> MotionDiffusionModel:
    """Fit windowed motion features conditioned on the canonical shape code.

    `sequences` is a list of (features, cond) pairs where features is
    (n_frames, layout.total_dim) and cond the sequence's shape code.
    Augmentations: window reversal with probability `reversal_prob`, and
    condition noising by a uniformly drawn number of forward steps.
    """
    t_frames = denoiser_config.t_frames
    usable = []
    for i, (feats, cond) in enumerate(sequences):
        feats = torch.as_tensor(feats, dtype=DTYPE)
        cond = torch.as_tensor(cond, dtype=DTYPE)
        if feats.shape[0] < t_frames:
            warnings.warn(
                f"sequence {i} has {feats.shape[0]} frames < window {t_frames}; skipped"
            )
            continue
        if feats.shape[1] != layout.total_dim:
            raise ModelError("motion feature dim does not match layout")
        usable.append((feats, cond))
    if not usable:
        raise ModelError("no sequence is long enough for the window size")
    norm = TokenNorm.from_features(torch.cat([f for f, _ in usable]))
    cond_norm = TokenNorm.from_features(torch.stack([c for _, c in usable]))
    feats_n = [norm.normalize(f) for f, _ in usable]
    conds_n = [cond_norm.normalize(c) for _, c in usable]
    torch.manual_seed(train_config.seed + 2)
    model = MotionDenoiser(layout, conds_n[0].shape[-1], denoiser_config)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=train_config.epochs, eta_min=train_config.lr * train_config.lr_final_factor
    )
    gen = torch.Generator().manual_seed(train_config.seed + 3)
    # one nominal pass = every admissible window start, in expectation
    n_windows = sum(f.shape[0] - t_frames + 1 for f in feats_n)
    steps_per_epoch = max(1, n_windows // train_config.batch)
    losses = []
    for epoch in range(train_config.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            windows, conds = [], []
            for _ in range(train_config.batch):
                si = int(torch.randint(len(feats_n), (1,), generator=gen))
                f = feats_n[si]
                start = int(torch.randint(f.shape[0] - t_frames + 1, (1,), generator=gen))
                w = f[start : start + t_frames]
                if float(torch.rand(1, generator=gen)) < train_config.reversal_prob:
                    w = w.flip(0)
                steps = int(
                    torch.randint(train_config.cond_noise_max + 1, (1,), generator=gen)
                )
                conds.append(_noise_condition(conds_n[si], steps, schedule, gen))
                windows.append(w)
            x0 = torch.stack(windows)
            cond = torch.stack(conds)
            t = torch.randint(0, schedule.n_steps, (len(x0),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=DTYPE)
            pred = model(forward_noise(x0, t, eps, schedule), t, cond)
            loss = _simple_loss(pred, x0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
        sched.step()
        epoch_loss /= steps_per_epoch
        if not math.isfinite(epoch_loss):
            raise fields.TrainingDiverged(f"train_motion_diffusion: loss {epoch_loss}")
        losses.append(epoch_loss)
        fields._log_epoch(train_config.log_path, epoch, epoch_loss)
    model.eval()
    return MotionDiffusionModel(
        model, norm, cond_norm, schedule, layout, denoiser_config, losses
    )
