"""DDIM sampling of shape features and sliding-window motion out-painting."""

from __future__ import annotations

import torch

from ..dictionary import Feature, flatten_feature, split_feature
from ..fields import DTYPE
from .models import ModelError
from .schedule import ddim_step, ddim_timesteps


def _ddim_loop(denoise, shape, schedule, n_steps, gen):
    """Run DDIM from pure noise; `denoise(x, t)` predicts the clean sample."""
    x = torch.randn(shape, generator=gen, dtype=DTYPE)
    ts = ddim_timesteps(schedule.n_steps, n_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        with torch.no_grad():
            x0_hat = denoise(x, t)
        x = ddim_step(x, x0_hat, t, t_prev, schedule)
    return x


def ddim_sample_shape(model, n_steps: int = 50, seed: int = 0) -> Feature:
    """Sample one shape feature; deterministic given the seed."""
    gen = torch.Generator().manual_seed(seed)
    den = model.denoiser

    def denoise(x, t):
        return den(x[None], torch.tensor([t]))[0]

    x0 = _ddim_loop(denoise, (model.layout.total_dim,), model.schedule, n_steps, gen)
    return split_feature(model.norm.denormalize(x0), model.layout)


def ddim_sample_motion(model, condition, n_steps: int = 50, seed: int = 0):
    """Sample one full window of motion features conditioned on a shape code."""
    gen = torch.Generator().manual_seed(seed)
    cond = model.normalize_cond(torch.as_tensor(condition, dtype=DTYPE))[None]
    den = model.denoiser

    def denoise(x, t):
        return den(x[None], torch.tensor([t]), cond)[0]

    shape = (model.config.t_frames, model.layout.total_dim)
    x0 = _ddim_loop(denoise, shape, model.schedule, n_steps, gen)
    return [split_feature(model.norm.denormalize(row), model.layout) for row in x0]


def outpaint_extend(
    model,
    condition,
    context_features,
    n_new: int,
    seed: int = 0,
    n_steps: int = 50,
):
    """Extend a motion sequence by in-painting past the given context frames.

    At every denoising level the context slots are replaced by a freshly
    re-noised version of the true context, and only the unknown slots keep
    their DDIM state. Returns context + generated frames; the context
    entries are the caller's objects, echoed back untouched.
    """
    if n_new <= 0:
        raise ModelError("n_new must be positive")
    t_frames = model.config.t_frames
    k_frames = model.config.k_frames
    if len(context_features) != k_frames:
        raise ModelError(
            f"expected {k_frames} context frames, got {len(context_features)}"
        )
    schedule = model.schedule
    gen = torch.Generator().manual_seed(seed)
    cond = model.normalize_cond(torch.as_tensor(condition, dtype=DTYPE))[None]
    ctx = torch.stack([model.norm.normalize(flatten_feature(f)) for f in context_features])
    generated = []
    remaining = n_new
    while remaining > 0:
        x_unknown = torch.randn(
            (t_frames - k_frames, model.layout.total_dim), generator=gen, dtype=DTYPE
        )
        ts = ddim_timesteps(schedule.n_steps, n_steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            ab = schedule.alpha_bars[t]
            eps = torch.randn(ctx.shape, generator=gen, dtype=DTYPE)
            ctx_noised = ab.sqrt() * ctx + (1 - ab).sqrt() * eps
            window = torch.cat([ctx_noised, x_unknown])[None]
            with torch.no_grad():
                x0_hat = model.denoiser(window, torch.tensor([t]), cond)[0]
            x_full = ddim_step(window[0], x0_hat, t, t_prev, schedule)
            x_unknown = x_full[k_frames:]
        generated.append(x_unknown)
        ctx = torch.cat([ctx, x_unknown])[-k_frames:]
        remaining -= t_frames - k_frames
    new_rows = torch.cat(generated)[:n_new]
    new_features = [
        split_feature(model.norm.denormalize(row), model.layout) for row in new_rows
    ]
    return list(context_features) + new_features
