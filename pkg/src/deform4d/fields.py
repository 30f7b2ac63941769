"""Shape SDF and motion flow coordinate MLPs with auto-decoder training.

Weights are plain float64 tensors (lists of matrices, not nn.Modules) so the
dictionary stage can decompose them directly. An MLP is L "body" layers plus
a fixed output head; the head is bookkept like the biases and never enters
the dictionary decomposition.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64


class FieldsError(Exception):
    pass


class TrainingDiverged(FieldsError):
    pass


# ---------------------------------------------------------------------------
# specs and weights


@dataclass
class MlpSpec:
    """Architecture of a coordinate MLP.

    layer_widths lists the output width of each of the L body layers; the
    head maps the last body width to output_dim. skip_layer (0-based body
    index) re-concatenates the raw input at that layer.
    """

    layer_widths: list
    input_dim: int
    output_dim: int
    activation: str = "relu"
    skip_layer: int | None = None
    coord_encoding: str = "none"
    n_freqs: int = 0
    latent_dims: tuple = ()

    def __post_init__(self):
        self.layer_widths = list(self.layer_widths)
        self.latent_dims = tuple(self.latent_dims)
        if len(self.layer_widths) < 2:
            raise FieldsError("need at least 2 body layers")
        if any(w <= 0 for w in self.layer_widths):
            raise FieldsError("layer widths must be positive")
        if self.activation != "relu":
            raise FieldsError(f"unsupported activation {self.activation!r}")
        if self.skip_layer is not None and not 0 < self.skip_layer < self.n_layers:
            raise FieldsError("skip_layer must lie strictly inside the body")
        if self.coord_encoding not in ("none", "sinusoidal"):
            raise FieldsError(f"unknown coord_encoding {self.coord_encoding!r}")
        if self.coord_encoding == "sinusoidal" and self.n_freqs < 1:
            raise FieldsError("sinusoidal encoding needs n_freqs >= 1")

    @property
    def n_layers(self):
        return len(self.layer_widths)

    def encoded_point_dim(self):
        if self.coord_encoding == "none":
            return 3
        return 3 * (1 + 2 * self.n_freqs)

    def layer_shapes(self):
        """(J, F) of every body layer followed by the head."""
        shapes = []
        prev = self.input_dim
        for i, w in enumerate(self.layer_widths):
            fan_in = prev + (self.input_dim if i == self.skip_layer else 0)
            shapes.append((w, fan_in))
            prev = w
        shapes.append((self.output_dim, prev))
        return shapes

    def to_dict(self):
        return {
            "layer_widths": self.layer_widths,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "activation": self.activation,
            "skip_layer": self.skip_layer,
            "coord_encoding": self.coord_encoding,
            "n_freqs": self.n_freqs,
            "latent_dims": list(self.latent_dims),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "latent_dims": tuple(d.get("latent_dims", ()))})


def shape_spec(width=128, n_layers=8, d_latent=64, coord_encoding="none", n_freqs=0):
    return MlpSpec(
        layer_widths=[width] * n_layers,
        input_dim=(3 if coord_encoding == "none" else 3 * (1 + 2 * n_freqs)) + d_latent,
        output_dim=1,
        skip_layer=n_layers // 2,
        coord_encoding=coord_encoding,
        n_freqs=n_freqs,
        latent_dims=(d_latent,),
    )


def motion_spec(width=256, n_layers=8, d_shape=64, d_motion=64, n_freqs=4):
    enc = 3 * (1 + 2 * n_freqs) if n_freqs else 3
    return MlpSpec(
        layer_widths=[width] * n_layers,
        input_dim=enc + d_shape + d_motion,
        output_dim=3,
        skip_layer=n_layers // 2,
        coord_encoding="sinusoidal" if n_freqs else "none",
        n_freqs=n_freqs,
        latent_dims=(d_shape, d_motion),
    )


@dataclass
class MlpWeights:
    """Per-layer weight matrices and biases (body layers then head)."""

    spec: MlpSpec
    weights: list
    biases: list

    def __post_init__(self):
        shapes = self.spec.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise FieldsError("weight/bias count does not match spec")
        for w, b, (j, f) in zip(self.weights, self.biases, shapes):
            if tuple(w.shape) != (j, f) or tuple(b.shape) != (j,):
                raise FieldsError(f"layer shape mismatch: {tuple(w.shape)} vs {(j, f)}")
            if not (torch.isfinite(w).all() and torch.isfinite(b).all()):
                raise FieldsError("non-finite weights")

    def body_weights(self):
        return self.weights[:-1]

    def parameters(self):
        return list(self.weights) + list(self.biases)

    def clone(self):
        return MlpWeights(
            self.spec,
            [w.detach().clone() for w in self.weights],
            [b.detach().clone() for b in self.biases],
        )

    def hash(self):
        h = hashlib.sha256()
        for t in self.parameters():
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def init_mlp_weights(spec: MlpSpec, seed: int = 0) -> MlpWeights:
    gen = torch.Generator().manual_seed(seed)
    weights, biases = [], []
    for j, f in spec.layer_shapes():
        bound = 1.0 / math.sqrt(f)
        weights.append((torch.rand(j, f, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        biases.append((torch.rand(j, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
    return MlpWeights(spec, weights, biases)


# ---------------------------------------------------------------------------
# forward passes


def encode_points(x, spec: MlpSpec):
    if spec.coord_encoding == "none":
        return x
    parts = [x]
    for i in range(spec.n_freqs):
        f = (2.0**i) * math.pi
        parts += [torch.sin(f * x), torch.cos(f * x)]
    return torch.cat(parts, dim=-1)


def mlp_forward(spec: MlpSpec, weights, biases, x_in):
    """Run the body (ReLU, optional skip concat) and head on (..., input_dim)."""
    h = x_in
    n = len(weights) - 1
    for i in range(n):
        if i == spec.skip_layer:
            h = torch.cat([h, x_in], dim=-1)
        h = torch.nn.functional.relu(
            torch.nn.functional.linear(h, weights[i], biases[i])
        )
    return torch.nn.functional.linear(h, weights[-1], biases[-1])


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def shape_forward(weights: MlpWeights, s, x):
    """Predicted SDF at points x (N, 3) for latent code s (D_s,)."""
    spec = weights.spec
    x = _as_tensor(x)
    s = _as_tensor(s)
    if s.shape[-1] != spec.latent_dims[0]:
        raise FieldsError(
            f"latent dim {s.shape[-1]} != expected {spec.latent_dims[0]}"
        )
    enc = encode_points(x, spec)
    lat = s.expand(*x.shape[:-1], s.shape[-1]) if s.dim() == 1 else s
    x_in = torch.cat([enc, lat], dim=-1)
    return mlp_forward(spec, weights.weights, weights.biases, x_in).squeeze(-1)


def motion_forward(weights: MlpWeights, s, m, x):
    """Predicted flow vectors at points x (N, 3) for codes (s, m)."""
    spec = weights.spec
    x = _as_tensor(x)
    s, m = _as_tensor(s), _as_tensor(m)
    d_s, d_m = spec.latent_dims
    if s.shape[-1] != d_s or m.shape[-1] != d_m:
        raise FieldsError(
            f"latent dims ({s.shape[-1]}, {m.shape[-1]}) != expected ({d_s}, {d_m})"
        )
    enc = encode_points(x, spec)
    lat = torch.cat([s, m], dim=-1)
    lat = lat.expand(*x.shape[:-1], lat.shape[-1]) if lat.dim() == 1 else lat
    x_in = torch.cat([enc, lat], dim=-1)
    return mlp_forward(spec, weights.weights, weights.biases, x_in)


# ---------------------------------------------------------------------------
# losses


def clamped_sdf_loss(d_pred, d_true, delta=0.1):
    if delta <= 0:
        raise FieldsError("delta must be positive")
    d_pred, d_true = _as_tensor(d_pred), _as_tensor(d_true)
    return (d_pred.clamp(-delta, delta) - d_true.clamp(-delta, delta)).abs().mean()


def flow_l1_loss(flow_pred, flow_true):
    flow_pred, flow_true = _as_tensor(flow_pred), _as_tensor(flow_true)
    if flow_pred.shape != flow_true.shape:
        raise FieldsError(
            f"flow shape mismatch: {tuple(flow_pred.shape)} vs {tuple(flow_true.shape)}"
        )
    return (flow_pred - flow_true).abs().mean()


# ---------------------------------------------------------------------------
# latent tables


@dataclass
class LatentTable:
    ids: list
    codes: torch.Tensor

    def __post_init__(self):
        if len(self.ids) != self.codes.shape[0]:
            raise FieldsError("id/code count mismatch")
        if not torch.isfinite(self.codes).all():
            raise FieldsError("non-finite latent codes")
        self._index = {k: i for i, k in enumerate(self.ids)}

    @property
    def dim(self):
        return self.codes.shape[1]

    def row(self, key):
        if key not in self._index:
            raise FieldsError(f"unknown latent id {key!r}")
        return self._index[key]

    def code(self, key):
        return self.codes[self.row(key)]

    def clone(self):
        return LatentTable(list(self.ids), self.codes.detach().clone())

    def hash(self):
        h = hashlib.sha256()
        h.update(json.dumps(self.ids).encode())
        h.update(self.codes.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def init_latents(ids, dim, seed, std=0.01):
    gen = torch.Generator().manual_seed(seed)
    codes = torch.randn(len(ids), dim, generator=gen, dtype=DTYPE) * std
    return LatentTable(list(ids), codes)


# ---------------------------------------------------------------------------
# training


@dataclass
class FieldTrainConfig:
    epochs: int = 500
    point_batch: int = 512
    instance_batch: int = 24
    lr_weights: float = 5e-4
    lr_latent: float = 1e-3
    lr_final_factor: float = 1.0  # <1 enables cosine decay down to lr * factor
    lambda_reg: float = 1e-4
    delta: float = 0.1
    seed: int = 0
    log_path: str | None = None


def _lr_scheduler(opt, config):
    f = config.lr_final_factor
    lam = lambda e: f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * e / max(1, config.epochs)))
    return torch.optim.lr_scheduler.LambdaLR(opt, lam)


def _log_epoch(log_path, epoch, loss):
    if log_path:
        with open(log_path, "a") as fh:
            fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")


def loss_window_means(losses, window=10):
    """Means of consecutive disjoint epoch windows (trailing partial dropped)."""
    n = len(losses) // window
    arr = np.asarray(losses[: n * window]).reshape(n, window)
    return arr.mean(axis=1)


def _check_finite(loss, what):
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{what}: loss became {loss}; lower the learning rates")


def train_shape_space(dataset, spec: MlpSpec, config: FieldTrainConfig):
    """Jointly optimize MLP weights and one latent code per sequence identity.

    The canonical (frame 0) SDF samples of every sequence are the targets.
    Returns (MlpWeights, LatentTable) and records per-epoch losses on the
    returned weights object as `.losses`.
    """
    ids = list(dataset.sequence_ids)
    if not ids:
        raise FieldsError("empty dataset")
    data = []
    for sid in ids:
        cache = dataset.samples(sid)
        data.append(
            (
                torch.as_tensor(cache["sdf"].points, dtype=DTYPE),
                torch.as_tensor(cache["sdf"].distances, dtype=DTYPE),
            )
        )
    weights = init_mlp_weights(spec, config.seed)
    latents = init_latents(ids, spec.latent_dims[0], config.seed + 1)
    for p in weights.parameters():
        p.requires_grad_(True)
    latents.codes.requires_grad_(True)
    opt = torch.optim.Adam(
        [
            {"params": weights.parameters(), "lr": config.lr_weights},
            {"params": [latents.codes], "lr": config.lr_latent},
        ]
    )
    sched = _lr_scheduler(opt, config)
    rng = np.random.default_rng(config.seed + 2)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(ids))
        epoch_loss = 0.0
        for start in range(0, len(ids), config.instance_batch):
            chunk = order[start : start + config.instance_batch]
            pts, dist, lat = [], [], []
            for i in chunk:
                p, d = data[i]
                idx = rng.integers(0, len(p), size=min(config.point_batch, len(p)))
                pts.append(p[idx])
                dist.append(d[idx])
                lat.append(latents.codes[i].expand(len(idx), -1))
            x = torch.cat(pts)
            d_true = torch.cat(dist)
            x_in = torch.cat([encode_points(x, spec), torch.cat(lat)], dim=-1)
            pred = mlp_forward(spec, weights.weights, weights.biases, x_in).squeeze(-1)
            loss = clamped_sdf_loss(pred, d_true, config.delta)
            loss = loss + config.lambda_reg * latents.codes[chunk].pow(2).sum(1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(chunk)
        sched.step()
        epoch_loss /= len(ids)
        _check_finite(epoch_loss, "train_shape_space")
        losses.append(epoch_loss)
        _log_epoch(config.log_path, epoch, epoch_loss)
    weights = weights.clone()
    weights.losses = losses
    return weights, LatentTable(ids, latents.codes.detach().clone())


def train_motion_space(dataset, shape_weights, shape_codes, spec: MlpSpec, config):
    """Optimize the motion MLP and one code per (sequence, frame >= 1).

    Shape weights and codes are read-only inputs; they are never touched.
    Motion table keys are "<sequence>:<frame>".
    """
    entries = []
    for sid in dataset.sequence_ids:
        try:
            cache = dataset.samples(sid)
        except Exception as exc:
            raise FieldsError(f"missing correspondence data for {sid!r}: {exc}") from exc
        pts = torch.as_tensor(cache["corr"].canonical_positions, dtype=DTYPE)
        for t in range(1, len(cache["positions"])):
            flow = torch.as_tensor(dataset.flows(sid, t), dtype=DTYPE)
            entries.append((f"{sid}:{t}", sid, pts, flow))
    if not entries:
        raise FieldsError("dataset has no motion frames")
    ids = [e[0] for e in entries]
    weights = init_mlp_weights(spec, config.seed + 10)
    latents = init_latents(ids, spec.latent_dims[1], config.seed + 11)
    for p in weights.parameters():
        p.requires_grad_(True)
    latents.codes.requires_grad_(True)
    opt = torch.optim.Adam(
        [
            {"params": weights.parameters(), "lr": config.lr_weights},
            {"params": [latents.codes], "lr": config.lr_latent},
        ]
    )
    sched = _lr_scheduler(opt, config)
    rng = np.random.default_rng(config.seed + 12)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(entries))
        epoch_loss = 0.0
        for start in range(0, len(entries), config.instance_batch):
            chunk = order[start : start + config.instance_batch]
            xs, flows, lats = [], [], []
            for i in chunk:
                _, sid, pts, flow = entries[i]
                idx = rng.integers(0, len(pts), size=min(config.point_batch, len(pts)))
                xs.append(pts[idx])
                flows.append(flow[idx])
                s = shape_codes.code(sid).detach()
                m = latents.codes[i]
                lats.append(torch.cat([s, m]).expand(len(idx), -1))
            x = torch.cat(xs)
            x_in = torch.cat([encode_points(x, spec), torch.cat(lats)], dim=-1)
            pred = mlp_forward(spec, weights.weights, weights.biases, x_in)
            loss = flow_l1_loss(pred, torch.cat(flows))
            loss = loss + config.lambda_reg * latents.codes[chunk].pow(2).sum(1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(chunk)
        sched.step()
        epoch_loss /= len(entries)
        _check_finite(epoch_loss, "train_motion_space")
        losses.append(epoch_loss)
        _log_epoch(config.log_path, epoch, epoch_loss)
    weights = weights.clone()
    weights.losses = losses
    return weights, LatentTable(ids, latents.codes.detach().clone())
