"""Layer-wise SVD dictionaries over trained MLPs.

Each body layer's weight matrix is decomposed as U S V^T; the singular
vectors become a frozen dictionary and the singular values become trainable
per-instance coefficients (stored in log domain as gamma, sigma = exp(gamma)).
The dictionary is compressed to rank k and extended with rk trainable
near-orthonormal residual directions shared across the training set.
Biases and the output head never enter the decomposition and stay frozen.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import fields
from .fields import DTYPE, MlpSpec, MlpWeights, clamped_sdf_loss, encode_points, flow_l1_loss

RESIDUAL_INIT_SIGMA = 1e-4
SIGMA_FLOOR = 1e-12


class DictionaryError(Exception):
    pass


# ---------------------------------------------------------------------------
# types


@dataclass
class LayerDictionary:
    """Frozen truncated SVD bases plus trainable residual bases for one layer."""

    u_main: torch.Tensor  # (J, k), frozen
    v_main: torch.Tensor  # (F, k), frozen
    u_res: torch.Tensor   # (J, rk), trainable
    v_res: torch.Tensor   # (F, rk), trainable
    bias: torch.Tensor    # (J,), frozen
    ref_gamma: torch.Tensor  # (k + rk,) log singular values at decomposition time

    @property
    def k(self):
        return self.u_main.shape[1]

    @property
    def rk(self):
        return self.u_res.shape[1]

    def shape(self):
        return self.u_main.shape[0], self.v_main.shape[0]


@dataclass
class CoefficientSet:
    """Per-layer log coefficients; sigma = exp(gamma) stays positive."""

    gammas: list

    def __post_init__(self):
        for g in self.gammas:
            if not torch.isfinite(g).all():
                raise DictionaryError("non-finite gamma")

    @property
    def n_layers(self):
        return len(self.gammas)

    def sigmas(self):
        return [g.exp() for g in self.gammas]

    def clone(self):
        return CoefficientSet([g.detach().clone() for g in self.gammas])


@dataclass
class Feature:
    """A latent code plus one coefficient vector per decomposed layer."""

    latent: torch.Tensor
    coeffs: CoefficientSet

    def clone(self):
        return Feature(self.latent.detach().clone(), self.coeffs.clone())


ShapeFeature = Feature
MotionFeature = Feature


@dataclass
class FeatureLayout:
    """Token widths of a flattened feature: the latent plus one slot per layer.

    coeff_widths[l] = k_l + rk; uniform at paper scale, where every layer's
    rank bound exceeds k, but the first body layer may cap k below the
    requested value at smaller scales.
    """

    d_latent: int
    n_layers: int
    coeff_widths: list

    def __post_init__(self):
        self.coeff_widths = [int(w) for w in self.coeff_widths]
        if len(self.coeff_widths) != self.n_layers:
            raise DictionaryError("coeff_widths length must equal n_layers")

    @property
    def total_dim(self):
        return self.d_latent + sum(self.coeff_widths)

    def token_widths(self):
        return [self.d_latent] + list(self.coeff_widths)

    def to_dict(self):
        return {
            "d_latent": self.d_latent,
            "n_layers": self.n_layers,
            "coeff_widths": self.coeff_widths,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["d_latent"], d["n_layers"], d["coeff_widths"])


class DictionaryDecoder:
    """Neural field decoder whose weights are rebuilt from coefficients."""

    def __init__(self, spec: MlpSpec, layers, head_weight, head_bias):
        if len(layers) != spec.n_layers:
            raise DictionaryError("layer count does not match spec")
        self.spec = spec
        self.layers = list(layers)
        self.head_weight = head_weight
        self.head_bias = head_bias

    @property
    def ks(self):
        return [l.k for l in self.layers]

    @property
    def rk(self):
        return self.layers[0].rk

    def layout(self, d_latent=None):
        if d_latent is None:
            d_latent = self.spec.latent_dims[0] if len(self.spec.latent_dims) == 1 else self.spec.latent_dims[1]
        return FeatureLayout(
            d_latent, self.spec.n_layers, [l.k + l.rk for l in self.layers]
        )

    def reference_coefficients(self) -> CoefficientSet:
        return CoefficientSet([l.ref_gamma.detach().clone() for l in self.layers])

    def frozen_hash(self):
        """Checksum of every part that fine-tuning must not touch."""
        h = hashlib.sha256()
        for l in self.layers:
            h.update(l.u_main.detach().numpy().tobytes())
            h.update(l.v_main.detach().numpy().tobytes())
            h.update(l.bias.detach().numpy().tobytes())
        h.update(self.head_weight.detach().numpy().tobytes())
        h.update(self.head_bias.detach().numpy().tobytes())
        return h.hexdigest()

    def full_hash(self):
        h = hashlib.sha256(self.frozen_hash().encode())
        for l in self.layers:
            h.update(l.u_res.detach().numpy().tobytes())
            h.update(l.v_res.detach().numpy().tobytes())
        return h.hexdigest()

    def with_residuals(self, residuals):
        """Same frozen parts, new (u_res, v_res) per layer."""
        layers = [
            LayerDictionary(l.u_main, l.v_main, u.detach().clone(), v.detach().clone(), l.bias, l.ref_gamma)
            for l, (u, v) in zip(self.layers, residuals)
        ]
        return DictionaryDecoder(self.spec, layers, self.head_weight, self.head_bias)


# ---------------------------------------------------------------------------
# decomposition / extension / reconstruction


def decompose(weights: MlpWeights, k: int):
    """Layer-wise SVD of the body layers, truncated to the top k triplets.

    k is capped per layer at min(J, F), the layer's rank bound, so passing
    the hidden width yields an exact (full-rank) dictionary everywhere.
    Returns a decoder with rk = 0 and the coefficient set holding the log
    singular values (floored before the log).
    """
    if k < 1:
        raise DictionaryError("k must be >= 1")
    spec = weights.spec
    layers = []
    gammas = []
    for i, w in enumerate(weights.body_weights()):
        j, f = w.shape
        k_l = min(k, j, f)
        u, s, vh = torch.linalg.svd(w.detach().to(DTYPE), full_matrices=False)
        gamma = s[:k_l].clamp_min(SIGMA_FLOOR).log()
        layers.append(
            LayerDictionary(
                u_main=u[:, :k_l].contiguous(),
                v_main=vh[:k_l].T.contiguous(),
                u_res=torch.zeros(j, 0, dtype=DTYPE),
                v_res=torch.zeros(f, 0, dtype=DTYPE),
                bias=weights.biases[i].detach().clone(),
                ref_gamma=gamma.clone(),
            )
        )
        gammas.append(gamma.clone())
    decoder = DictionaryDecoder(
        spec,
        layers,
        weights.weights[-1].detach().clone(),
        weights.biases[-1].detach().clone(),
    )
    return decoder, CoefficientSet(gammas)


def extend(decoder: DictionaryDecoder, rk: int, seed: int = 0) -> DictionaryDecoder:
    """Append rk random orthonormal residual directions per layer.

    Residual coefficients start at log(1e-4) so decoding is unchanged up to
    a negligible perturbation.
    """
    if rk < 1:
        raise DictionaryError("rk must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    layers = []
    for i, l in enumerate(decoder.layers):
        j, f = l.shape()
        if rk > min(j, f):
            raise DictionaryError(f"layer {i}: rk={rk} exceeds min(J, F)={min(j, f)}")
        u_res, _ = torch.linalg.qr(torch.randn(j, rk, generator=gen, dtype=DTYPE))
        v_res, _ = torch.linalg.qr(torch.randn(f, rk, generator=gen, dtype=DTYPE))
        ref = torch.cat(
            [l.ref_gamma[: l.k], torch.full((rk,), math.log(RESIDUAL_INIT_SIGMA), dtype=DTYPE)]
        )
        layers.append(
            LayerDictionary(l.u_main, l.v_main, u_res.contiguous(), v_res.contiguous(), l.bias, ref)
        )
    return DictionaryDecoder(decoder.spec, layers, decoder.head_weight, decoder.head_bias)


def reconstruct_layer(layer: LayerDictionary, sigma):
    """W = U_k diag(sigma[:k]) V_k^T + U_res diag(sigma[k:]) V_res^T."""
    sigma = torch.as_tensor(sigma, dtype=DTYPE) if not isinstance(sigma, torch.Tensor) else sigma
    if sigma.shape[-1] != layer.k + layer.rk:
        raise DictionaryError(
            f"sigma length {sigma.shape[-1]} != k + rk = {layer.k + layer.rk}"
        )
    if (sigma <= 0).any():
        raise DictionaryError("sigma must be strictly positive")
    w = (layer.u_main * sigma[: layer.k]) @ layer.v_main.T
    if layer.rk:
        w = w + (layer.u_res * sigma[layer.k :]) @ layer.v_res.T
    return w


def orthogonality_loss(layer: LayerDictionary):
    """Mean |U_res^T U_res - I| plus mean |V_res^T V_res - I|."""
    if layer.rk < 1:
        raise DictionaryError("orthogonality loss needs rk >= 1")
    eye = torch.eye(layer.rk, dtype=DTYPE)
    lu = (layer.u_res.T @ layer.u_res - eye).abs().mean()
    lv = (layer.v_res.T @ layer.v_res - eye).abs().mean()
    return lu + lv


# ---------------------------------------------------------------------------
# decoding


def _feature_weights(decoder: DictionaryDecoder, coeffs: CoefficientSet):
    if coeffs.n_layers != decoder.spec.n_layers:
        raise DictionaryError(
            f"coefficient set has {coeffs.n_layers} layers, decoder expects {decoder.spec.n_layers}"
        )
    weights = [
        reconstruct_layer(l, g.exp()) for l, g in zip(decoder.layers, coeffs.gammas)
    ]
    weights.append(decoder.head_weight)
    biases = [l.bias for l in decoder.layers] + [decoder.head_bias]
    return weights, biases


def dict_shape_decode(decoder: DictionaryDecoder, feature: Feature, x):
    """SDF at points x from a shape feature (latent + per-layer gamma)."""
    spec = decoder.spec
    x = fields._as_tensor(x)
    weights, biases = _feature_weights(decoder, feature.coeffs)
    lat = feature.latent.to(DTYPE)
    if lat.shape[-1] != spec.latent_dims[0]:
        raise DictionaryError("shape latent dim mismatch")
    x_in = torch.cat([encode_points(x, spec), lat.expand(*x.shape[:-1], lat.shape[-1])], -1)
    return fields.mlp_forward(spec, weights, biases, x_in).squeeze(-1)


def dict_motion_decode(decoder: DictionaryDecoder, s, feature: Feature, x):
    """Flow vectors at points x from a motion feature conditioned on shape code s."""
    spec = decoder.spec
    x = fields._as_tensor(x)
    s = fields._as_tensor(s)
    weights, biases = _feature_weights(decoder, feature.coeffs)
    d_s, d_m = spec.latent_dims
    if s.shape[-1] != d_s or feature.latent.shape[-1] != d_m:
        raise DictionaryError("motion latent dim mismatch")
    lat = torch.cat([s, feature.latent.to(DTYPE)], -1)
    x_in = torch.cat([encode_points(x, spec), lat.expand(*x.shape[:-1], lat.shape[-1])], -1)
    return fields.mlp_forward(spec, weights, biases, x_in)


def flatten_feature(feature: Feature):
    return torch.cat([feature.latent.to(DTYPE)] + [g.to(DTYPE) for g in feature.coeffs.gammas])


def split_feature(vec, layout: FeatureLayout) -> Feature:
    vec = fields._as_tensor(vec)
    if vec.shape[-1] != layout.total_dim:
        raise DictionaryError(
            f"feature length {vec.shape[-1]} != layout total {layout.total_dim}"
        )
    latent = vec[: layout.d_latent]
    gammas = []
    off = layout.d_latent
    for w in layout.coeff_widths:
        gammas.append(vec[off : off + w])
        off += w
    return Feature(latent, CoefficientSet(gammas))


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneConfig:
    epochs: int = 1000
    point_batch: int = 512
    instance_batch: int = 24
    lr_residual: float = 1e-4
    lr_gamma: float = 1e-3
    lambda_orth: float = 0.1
    delta: float = 0.1
    seed: int = 0
    log_path: str | None = None


def _trainable_residuals(decoder):
    return [
        (l.u_res.detach().clone().requires_grad_(True), l.v_res.detach().clone().requires_grad_(True))
        for l in decoder.layers
    ]


def _residual_orth_penalty(residuals):
    total = 0.0
    for u, v in residuals:
        eye = torch.eye(u.shape[1], dtype=DTYPE)
        total = total + (u.T @ u - eye).abs().mean() + (v.T @ v - eye).abs().mean()
    return total


def _batched_forward_res(decoder, residuals, gammas, latents, x):
    """Forward with per-instance weights and externally supplied residuals.

    gammas: list of (I, k_l + rk) per layer; latents: (I, D); x: (I, B, 3).
    """
    spec = decoder.spec
    enc = encode_points(x, spec)
    x_in = torch.cat([enc, latents[:, None, :].expand(-1, x.shape[1], -1)], -1)
    h = x_in
    for li, layer in enumerate(decoder.layers):
        if li == spec.skip_layer:
            h = torch.cat([h, x_in], dim=-1)
        sig = gammas[li].exp()
        w = torch.einsum("jk,ik,fk->ijf", layer.u_main, sig[:, : layer.k], layer.v_main)
        u_res, v_res = residuals[li]
        if u_res.shape[1]:
            w = w + torch.einsum("jk,ik,fk->ijf", u_res, sig[:, layer.k :], v_res)
        h = torch.baddbmm(layer.bias.expand(1, 1, -1), h, w.transpose(1, 2)).relu()
    return h @ decoder.head_weight.T + decoder.head_bias


def finetune_shape(dataset, decoder: DictionaryDecoder, shape_codes, config: FinetuneConfig):
    """Optimize shared residual bases and per-instance shape coefficients.

    Frozen: U_k, V_k, biases, head, latent codes. Every instance starts from
    the decomposition's singular values. Returns (decoder with trained
    residuals, {sequence_id: CoefficientSet}).
    """
    if decoder.rk < 1:
        raise DictionaryError("extend the decoder before fine-tuning")
    ids = list(dataset.sequence_ids)
    data = []
    for sid in ids:
        cache = dataset.samples(sid)
        data.append(
            (
                torch.as_tensor(cache["sdf"].points, dtype=DTYPE),
                torch.as_tensor(cache["sdf"].distances, dtype=DTYPE),
            )
        )
    gammas = [
        l.ref_gamma[None].repeat(len(ids), 1).requires_grad_(True)
        for l in decoder.layers
    ]
    residuals = _trainable_residuals(decoder)
    latents = torch.stack([shape_codes.code(sid).detach() for sid in ids])
    opt = torch.optim.Adam(
        [
            {"params": [t for pair in residuals for t in pair], "lr": config.lr_residual},
            {"params": gammas, "lr": config.lr_gamma},
        ]
    )
    rng = np.random.default_rng(config.seed + 20)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(ids))
        epoch_loss = 0.0
        for start in range(0, len(ids), config.instance_batch):
            chunk = torch.as_tensor(order[start : start + config.instance_batch])
            pts, dist = [], []
            for i in chunk.tolist():
                p, d = data[i]
                idx = rng.integers(0, len(p), size=min(config.point_batch, len(p)))
                pts.append(p[idx])
                dist.append(d[idx])
            x = torch.stack(pts)
            d_true = torch.stack(dist)
            pred = _batched_forward_res(
                decoder, residuals, [g[chunk] for g in gammas], latents[chunk], x
            ).squeeze(-1)
            loss = clamped_sdf_loss(pred, d_true, config.delta)
            loss = loss + config.lambda_orth * _residual_orth_penalty(residuals)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(chunk)
        epoch_loss /= len(ids)
        if not math.isfinite(epoch_loss):
            raise fields.TrainingDiverged(f"finetune_shape: loss {epoch_loss}")
        losses.append(epoch_loss)
        fields._log_epoch(config.log_path, epoch, epoch_loss)
    tuned = decoder.with_residuals(residuals)
    tuned.losses = losses
    coeff_map = {
        sid: CoefficientSet([g[i].detach().clone() for g in gammas])
        for i, sid in enumerate(ids)
    }
    return tuned, coeff_map


def finetune_motion(dataset, decoder, shape_codes, motion_codes, config: FinetuneConfig):
    """Same as finetune_shape but per (sequence, frame) with the flow loss."""
    if decoder.rk < 1:
        raise DictionaryError("extend the decoder before fine-tuning")
    entries = []
    for sid in dataset.sequence_ids:
        cache = dataset.samples(sid)
        pts = torch.as_tensor(cache["corr"].canonical_positions, dtype=DTYPE)
        for t in range(1, len(cache["positions"])):
            key = f"{sid}:{t}"
            flow = torch.as_tensor(dataset.flows(sid, t), dtype=DTYPE)
            cond = torch.cat(
                [shape_codes.code(sid).detach(), motion_codes.code(key).detach()]
            )
            entries.append((key, pts, flow, cond))
    if not entries:
        raise DictionaryError("dataset has no motion frames")
    gammas = [
        l.ref_gamma[None].repeat(len(entries), 1).requires_grad_(True)
        for l in decoder.layers
    ]
    residuals = _trainable_residuals(decoder)
    latents = torch.stack([e[3] for e in entries])
    opt = torch.optim.Adam(
        [
            {"params": [t for pair in residuals for t in pair], "lr": config.lr_residual},
            {"params": gammas, "lr": config.lr_gamma},
        ]
    )
    rng = np.random.default_rng(config.seed + 30)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(entries))
        epoch_loss = 0.0
        for start in range(0, len(entries), config.instance_batch):
            chunk = torch.as_tensor(order[start : start + config.instance_batch])
            xs, fl = [], []
            for i in chunk.tolist():
                _, pts, flow, _ = entries[i]
                idx = rng.integers(0, len(pts), size=min(config.point_batch, len(pts)))
                xs.append(pts[idx])
                fl.append(flow[idx])
            pred = _batched_forward_res(
                decoder,
                residuals,
                [g[chunk] for g in gammas],
                latents[chunk],
                torch.stack(xs),
            )
            loss = flow_l1_loss(pred, torch.stack(fl))
            loss = loss + config.lambda_orth * _residual_orth_penalty(residuals)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(chunk)
        epoch_loss /= len(entries)
        if not math.isfinite(epoch_loss):
            raise fields.TrainingDiverged(f"finetune_motion: loss {epoch_loss}")
        losses.append(epoch_loss)
        fields._log_epoch(config.log_path, epoch, epoch_loss)
    tuned = decoder.with_residuals(residuals)
    tuned.losses = losses
    coeff_map = {
        e[0]: CoefficientSet([g[i].detach().clone() for g in gammas])
        for i, e in enumerate(entries)
    }
    return tuned, coeff_map


# ---------------------------------------------------------------------------
# unseen-shape fitting


@dataclass
class FitConfig:
    iters: int = 400
    point_batch: int = 2048
    lr_latent: float = 1e-2
    lr_gamma: float = 1e-2
    lambda_reg: float = 1e-4
    delta: float = 0.1
    seed: int = 0


def fit_unseen_shape(
    decoder: DictionaryDecoder,
    observations,
    config: FitConfig,
    optimize_coeffs: bool = True,
    init_feature: Feature | None = None,
):
    """Fit a fresh (latent, gamma) pair to SDF observations; decoder frozen.

    With optimize_coeffs=False only the latent moves and gamma stays at its
    initial values (the decomposition's singular values unless an explicit
    init_feature is given). Returns the fitted feature with a `.losses` trace.
    """
    gen = torch.Generator().manual_seed(config.seed)
    d_latent = decoder.spec.latent_dims[0]
    if init_feature is None:
        latent = torch.randn(d_latent, generator=gen, dtype=DTYPE) * 0.01
        coeffs = decoder.reference_coefficients()
    else:
        latent = init_feature.latent.detach().clone()
        coeffs = init_feature.coeffs.clone()
    latent.requires_grad_(True)
    gammas = [g.detach().clone().requires_grad_(optimize_coeffs) for g in coeffs.gammas]
    params = [{"params": [latent], "lr": config.lr_latent}]
    if optimize_coeffs:
        params.append({"params": gammas, "lr": config.lr_gamma})
    opt = torch.optim.Adam(params)
    pts = torch.as_tensor(observations.points, dtype=DTYPE)
    dist = torch.as_tensor(observations.distances, dtype=DTYPE)
    rng = np.random.default_rng(config.seed + 1)
    losses = []
    for _ in range(config.iters):
        idx = rng.integers(0, len(pts), size=min(config.point_batch, len(pts)))
        feature = Feature(latent, CoefficientSet(gammas))
        pred = dict_shape_decode(decoder, feature, pts[idx])
        loss = clamped_sdf_loss(pred, dist[idx], config.delta)
        loss = loss + config.lambda_reg * latent.pow(2).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if not math.isfinite(losses[-1]):
            raise fields.TrainingDiverged(f"fit_unseen_shape: loss {losses[-1]}")
    fitted = Feature(
        latent.detach().clone(), CoefficientSet([g.detach().clone() for g in gammas])
    )
    fitted.losses = losses
    return fitted
