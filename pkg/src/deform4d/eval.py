"""Generation metrics, novelty retrieval and the reconstruction ablation.

All metrics use the sequence Chamfer distance (mean per-frame two-sided
squared Chamfer) between point-set sequences. Reports follow the convention
of multiplying distances by 1e3 for display.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from . import dictionary as dct
from . import fields, geometry
from .fields import DTYPE
from .geometry import sequence_chamfer


class EvalError(Exception):
    pass


# ---------------------------------------------------------------------------
# set-level metrics over point-set sequences


def _pairwise_distances(gen, ref, method="kdtree"):
    d = np.empty((len(gen), len(ref)))
    for i, g in enumerate(gen):
        for j, r in enumerate(ref):
            d[i, j] = sequence_chamfer(g, r, method=method)
    return d


def mmd(gen, ref, method="kdtree"):
    """Mean over reference sequences of the closest generated distance."""
    if not gen or not ref:
        raise EvalError("mmd requires non-empty sets")
    d = _pairwise_distances(gen, ref, method)
    return float(d.min(axis=0).mean())


def coverage(gen, ref, method="kdtree"):
    """Fraction of reference sequences matched as some generation's nearest."""
    if not gen or not ref:
        raise EvalError("coverage requires non-empty sets")
    d = _pairwise_distances(gen, ref, method)
    return float(len(np.unique(d.argmin(axis=1))) / len(ref))


def one_nna(gen, ref, method="kdtree"):
    """Leave-one-out 1-NN accuracy over the pooled set; ties break toward ref."""
    if len(gen) < 2 or len(ref) < 2:
        raise EvalError("one_nna requires at least 2 sequences per set")
    pooled = list(gen) + list(ref)
    labels = np.array([0] * len(gen) + [1] * len(ref))
    n = len(pooled)
    d = np.full((n, n), np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = sequence_chamfer(pooled[i], pooled[j], method=method)
    correct = 0
    for i in range(n):
        m = d[i].min()
        candidates = np.flatnonzero(d[i] == m)
        predicted = 1 if (labels[candidates] == 1).any() else 0
        correct += int(predicted == labels[i])
    return correct / n


def novelty_histogram(gen, train, method="kdtree"):
    """Nearest training sequence per generation: [(gen idx, train idx, distance)]."""
    if not gen or not train:
        raise EvalError("novelty_histogram requires non-empty sets")
    d = _pairwise_distances(gen, train, method)
    nearest = d.argmin(axis=1)
    return [(i, int(nearest[i]), float(d[i, nearest[i]])) for i in range(len(gen))]


def write_novelty_csv(rows, path, n_bins=10):
    """Histogram of nearest-neighbor distances as (bin_low, bin_high, count)."""
    dists = np.array([r[2] for r in rows])
    lo, hi = float(dists.min()), float(dists.max())
    if hi <= lo:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(dists, bins=edges)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count"])
        for i in range(n_bins):
            w.writerow([f"{edges[i]:.9g}", f"{edges[i + 1]:.9g}", int(counts[i])])
    return counts


@dataclass
class MetricReport:
    mmd: float
    cov: float
    one_nna: float
    n_gen: int
    n_ref: int
    points_per_frame: int
    distance: str = "sequence_chamfer"

    def __post_init__(self):
        if not (0.0 <= self.cov <= 1.0 and 0.0 <= self.one_nna <= 1.0 and self.mmd >= 0):
            raise EvalError("metric values out of range")


def metric_report(gen, ref, points_per_frame, method="kdtree") -> MetricReport:
    return MetricReport(
        mmd=mmd(gen, ref, method),
        cov=coverage(gen, ref, method),
        one_nna=one_nna(gen, ref, method),
        n_gen=len(gen),
        n_ref=len(ref),
        points_per_frame=points_per_frame,
    )


def write_metric_csv(report: MetricReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["metric", "value", "display_x1e3", "n_gen", "n_ref", "distance", "points_per_frame"]
        )
        for name, value in (("mmd", report.mmd), ("cov", report.cov), ("one_nna", report.one_nna)):
            w.writerow(
                [
                    name,
                    f"{value:.9g}",
                    f"{value * 1e3:.6g}" if name == "mmd" else f"{value:.6g}",
                    report.n_gen,
                    report.n_ref,
                    report.distance,
                    report.points_per_frame,
                ]
            )


# ---------------------------------------------------------------------------
# decoding helpers shared with the pipeline


def _chunked_field(fn, chunk=200_000):
    def call(points):
        outs = [fn(points[s : s + chunk]) for s in range(0, len(points), chunk)]
        return np.concatenate(outs)

    return call


def fields_shape_mesh(weights, code, resolution=64):
    """Marching-cubes mesh of the global shape MLP at a latent code."""

    def f(pts):
        with torch.no_grad():
            return fields.shape_forward(weights, code, pts).numpy()

    return geometry.marching_cubes(_chunked_field(f), resolution)


def dict_shape_mesh(decoder, feature, resolution=64):
    """Marching-cubes mesh of the dictionary decoder at a shape feature."""

    def f(pts):
        with torch.no_grad():
            return dct.dict_shape_decode(decoder, feature, torch.as_tensor(pts, dtype=DTYPE)).numpy()

    return geometry.marching_cubes(_chunked_field(f), resolution)


def fields_flow(weights, s, m):
    def flow(pts):
        with torch.no_grad():
            return fields.motion_forward(weights, s, m, pts).numpy()

    return flow


def dict_flow(decoder, s, feature):
    def flow(pts):
        with torch.no_grad():
            return dct.dict_motion_decode(decoder, s, feature, torch.as_tensor(pts, dtype=DTYPE)).numpy()

    return flow


def mesh_points(mesh, n, seed):
    pts, _, _ = geometry.sample_surface(mesh, n, np.random.default_rng(seed))
    return pts


# ---------------------------------------------------------------------------
# reconstruction ablation (four variants)


@dataclass
class TrainedArtifacts:
    shape_weights: fields.MlpWeights
    shape_codes: fields.LatentTable
    motion_weights: fields.MlpWeights
    motion_codes: fields.LatentTable
    shape_decoder: dct.DictionaryDecoder
    shape_coeffs: dict
    motion_decoder: dct.DictionaryDecoder
    motion_coeffs: dict


@dataclass
class AblationConfig:
    points_per_frame: int = 2048
    mc_resolution: int = 48
    fit_iters: int = 150
    fit_point_batch: int = 2048
    fit_n_uniform: int = 1000
    fit_n_near: int = 3000
    fit_band: float = 0.02
    delta: float = 0.1
    seed: int = 0


VARIANTS = ("latent_only", "s_fit", "s_sigma_fit", "ours")


def _fit_latent_only(weights, observations, init_code, config):
    """Variant (ii): optimize only the latent of the frozen global shape MLP."""
    code = init_code.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([code], lr=1e-2)
    pts = torch.as_tensor(observations.points, dtype=DTYPE)
    dist = torch.as_tensor(observations.distances, dtype=DTYPE)
    rng = np.random.default_rng(config.seed + 7)
    for _ in range(config.fit_iters):
        idx = rng.integers(0, len(pts), size=min(config.fit_point_batch, len(pts)))
        pred = fields.shape_forward(weights, code, pts[idx])
        loss = fields.clamped_sdf_loss(pred, dist[idx], config.delta)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return code.detach()


def _sequence_cd(recon_meshes, gt_meshes, n_points, seed):
    gt = [mesh_points(m, n_points, seed + i) for i, m in enumerate(gt_meshes)]
    rc = [mesh_points(m, n_points, seed + 1000 + i) for i, m in enumerate(recon_meshes)]
    return sequence_chamfer(rc, gt)


def reconstruction_ablation(dataset, artifacts: TrainedArtifacts, config: AblationConfig | None = None):
    """Mean reconstruction sequence-CD for the four model variants.

    (i) latent-only global MLPs, (ii) per-frame latent fits of the frozen
    global shape MLP, (iii) per-frame (latent, coefficient) fits of the
    frozen dictionary, (iv) the decoupled fine-tuned shape+motion model.
    Returns {variant: mean sequence CD}.
    """
    config = config or AblationConfig()
    a = artifacts
    per_variant = {v: [] for v in VARIANTS}
    for sid in dataset.sequence_ids:
        rec = dataset.record(sid)
        gt_meshes = [dataset.frame_mesh(sid, t) for t in range(rec.n_frames)]
        s_code = a.shape_codes.code(sid)

        # (i) latent-only: global shape + motion MLPs, no fine-tuning
        canon_npms = fields_shape_mesh(a.shape_weights, s_code, config.mc_resolution)
        frames_npms = [canon_npms]
        for t in range(1, rec.n_frames):
            m_code = a.motion_codes.code(f"{sid}:{t}")
            frames_npms.append(
                geometry.warp_mesh(canon_npms, fields_flow(a.motion_weights, s_code, m_code))
            )
        per_variant["latent_only"].append(
            _sequence_cd(frames_npms, gt_meshes, config.points_per_frame, config.seed)
        )

        # (iv) ours: fine-tuned dictionary decoders
        feat_s = dct.Feature(s_code, a.shape_coeffs[sid])
        canon_ours = dict_shape_mesh(a.shape_decoder, feat_s, config.mc_resolution)
        frames_ours = [canon_ours]
        for t in range(1, rec.n_frames):
            feat_m = dct.Feature(
                a.motion_codes.code(f"{sid}:{t}"), a.motion_coeffs[f"{sid}:{t}"]
            )
            frames_ours.append(
                geometry.warp_mesh(canon_ours, dict_flow(a.motion_decoder, s_code, feat_m))
            )
        per_variant["ours"].append(
            _sequence_cd(frames_ours, gt_meshes, config.points_per_frame, config.seed)
        )

        # (ii)/(iii): fit the canonical shape model directly to each deformed frame
        frames_sfit = []
        frames_ssig = []
        for t in range(rec.n_frames):
            obs = geometry.sample_sdf(
                gt_meshes[t],
                n_uniform=config.fit_n_uniform,
                n_near=config.fit_n_near,
                band=config.fit_band,
                seed=config.seed + 31 * t,
            )
            code_t = _fit_latent_only(a.shape_weights, obs, s_code, config)
            frames_sfit.append(fields_shape_mesh(a.shape_weights, code_t, config.mc_resolution))
            fit_cfg = dct.FitConfig(
                iters=config.fit_iters,
                point_batch=config.fit_point_batch,
                delta=config.delta,
                seed=config.seed + 13 * t,
            )
            feat_t = dct.fit_unseen_shape(
                a.shape_decoder,
                obs,
                fit_cfg,
                optimize_coeffs=True,
                init_feature=dct.Feature(s_code, a.shape_coeffs[sid]),
            )
            frames_ssig.append(dict_shape_mesh(a.shape_decoder, feat_t, config.mc_resolution))
        per_variant["s_fit"].append(
            _sequence_cd(frames_sfit, gt_meshes, config.points_per_frame, config.seed)
        )
        per_variant["s_sigma_fit"].append(
            _sequence_cd(frames_ssig, gt_meshes, config.points_per_frame, config.seed)
        )
    return {v: float(np.mean(cds)) for v, cds in per_variant.items()}


def write_ablation_csv(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mean_sequence_cd", "display_x1e3"])
        for v in VARIANTS:
            w.writerow([v, f"{table[v]:.9g}", f"{table[v] * 1e3:.6g}"])
