"""Stage orchestration: artifacts, checkpointing, resumability, sampling.

Each stage reads its inputs from disk and writes its outputs atomically, so
a re-run with unchanged inputs is a no-op and a full re-run with the same
config and seed reproduces every artifact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
import warnings

import numpy as np
import torch

from . import datagen, dictionary as dct, eval as evalmod, fields, geometry
from . import diffusion as dif
from .checkpoint import read_container, write_container
from .config import ConfigError, PipelineConfig
from .fields import DTYPE


class PipelineError(Exception):
    pass


class PrerequisiteError(PipelineError):
    pass


class NumericalError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# run directory layout


class RunDir:
    def __init__(self, root):
        self.root = os.fspath(root)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def data_manifest(self):
        return self.path("data", "manifest.json")

    @property
    def splits(self):
        return self.path("splits.json")

    def checkpoint(self, name):
        return self.path("checkpoints", f"{name}.ckpt")

    def report(self, stage):
        return self.path("stage_reports", f"{stage}.json")

    def ensure(self):
        for sub in ("data", "checkpoints", "stage_reports", "samples", "reports"):
            os.makedirs(self.path(sub), exist_ok=True)
        return self


class RunLock:
    """One stage at a time per run directory."""

    def __init__(self, run_dir: RunDir):
        self.lock_path = run_dir.path(".lock")

    def __enter__(self):
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(
                f"lock file {self.lock_path} exists; another stage is running "
                "(remove it if that process is dead)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.lock_path)
        except FileNotFoundError:
            pass


def _write_json(path, payload):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# artifact serialization (all through the float32 container)


def save_mlp(path, weights: fields.MlpWeights, extra_meta=None):
    arrays = {}
    for i, (w, b) in enumerate(zip(weights.weights, weights.biases)):
        arrays[f"weight/{i:02d}"] = w.detach().numpy()
        arrays[f"bias/{i:02d}"] = b.detach().numpy()
    meta = {"kind": "mlp", "spec": weights.spec.to_dict()}
    meta.update(extra_meta or {})
    write_container(path, arrays, meta)


def load_mlp(path) -> fields.MlpWeights:
    arrays, meta = read_container(path)
    spec = fields.MlpSpec.from_dict(meta["spec"])
    n = spec.n_layers + 1
    weights = [torch.as_tensor(arrays[f"weight/{i:02d}"], dtype=DTYPE) for i in range(n)]
    biases = [torch.as_tensor(arrays[f"bias/{i:02d}"], dtype=DTYPE) for i in range(n)]
    return fields.MlpWeights(spec, weights, biases)


def save_latents(path, table: fields.LatentTable, extra_meta=None):
    meta = {"kind": "latents", "ids": list(table.ids)}
    meta.update(extra_meta or {})
    write_container(path, {"codes": table.codes.detach().numpy()}, meta)


def load_latents(path) -> fields.LatentTable:
    arrays, meta = read_container(path)
    return fields.LatentTable(meta["ids"], torch.as_tensor(arrays["codes"], dtype=DTYPE))


def save_decoder(path, decoder: dct.DictionaryDecoder, extra_meta=None):
    arrays = {
        "head/weight": decoder.head_weight.detach().numpy(),
        "head/bias": decoder.head_bias.detach().numpy(),
    }
    for i, l in enumerate(decoder.layers):
        arrays[f"layer/{i:02d}/u_main"] = l.u_main.detach().numpy()
        arrays[f"layer/{i:02d}/v_main"] = l.v_main.detach().numpy()
        arrays[f"layer/{i:02d}/u_res"] = l.u_res.detach().numpy()
        arrays[f"layer/{i:02d}/v_res"] = l.v_res.detach().numpy()
        arrays[f"layer/{i:02d}/bias"] = l.bias.detach().numpy()
        arrays[f"layer/{i:02d}/ref_gamma"] = l.ref_gamma.detach().numpy()
    meta = {"kind": "dictionary", "spec": decoder.spec.to_dict()}
    meta.update(extra_meta or {})
    write_container(path, arrays, meta)


def load_decoder(path) -> dct.DictionaryDecoder:
    arrays, meta = read_container(path)
    spec = fields.MlpSpec.from_dict(meta["spec"])
    layers = []
    for i in range(spec.n_layers):
        p = f"layer/{i:02d}"
        layers.append(
            dct.LayerDictionary(
                torch.as_tensor(arrays[f"{p}/u_main"], dtype=DTYPE),
                torch.as_tensor(arrays[f"{p}/v_main"], dtype=DTYPE),
                torch.as_tensor(arrays[f"{p}/u_res"], dtype=DTYPE),
                torch.as_tensor(arrays[f"{p}/v_res"], dtype=DTYPE),
                torch.as_tensor(arrays[f"{p}/bias"], dtype=DTYPE),
                torch.as_tensor(arrays[f"{p}/ref_gamma"], dtype=DTYPE),
            )
        )
    return dct.DictionaryDecoder(
        spec,
        layers,
        torch.as_tensor(arrays["head/weight"], dtype=DTYPE),
        torch.as_tensor(arrays["head/bias"], dtype=DTYPE),
    )


def save_coeffs(path, coeff_map: dict, extra_meta=None):
    ids = sorted(coeff_map)
    arrays = {}
    for idx, key in enumerate(ids):
        for l, g in enumerate(coeff_map[key].gammas):
            arrays[f"gamma/{idx:05d}/{l:02d}"] = g.detach().numpy()
    meta = {"kind": "coeffs", "ids": ids, "n_layers": coeff_map[ids[0]].n_layers}
    meta.update(extra_meta or {})
    write_container(path, arrays, meta)


def load_coeffs(path) -> dict:
    arrays, meta = read_container(path)
    out = {}
    for idx, key in enumerate(meta["ids"]):
        gammas = [
            torch.as_tensor(arrays[f"gamma/{idx:05d}/{l:02d}"], dtype=DTYPE)
            for l in range(meta["n_layers"])
        ]
        out[key] = dct.CoefficientSet(gammas)
    return out


def _save_denoiser_arrays(model):
    return {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}


def _load_state(model, arrays):
    state = {
        k[len("param/") :]: torch.as_tensor(v, dtype=DTYPE)
        for k, v in arrays.items()
        if k.startswith("param/")
    }
    model.load_state_dict(state)
    model.eval()
    return model


def save_shape_diffusion(path, model: dif.ShapeDiffusionModel, extra_meta=None):
    arrays = _save_denoiser_arrays(model.denoiser)
    arrays["norm/mean"] = model.norm.mean.numpy()
    arrays["norm/std"] = model.norm.std.numpy()
    arrays["schedule/betas"] = model.schedule.betas.numpy()
    meta = {
        "kind": "shape_diffusion",
        "layout": model.layout.to_dict(),
        "config": model.config.to_dict(),
    }
    meta.update(extra_meta or {})
    write_container(path, arrays, meta)


def load_shape_diffusion(path) -> dif.ShapeDiffusionModel:
    arrays, meta = read_container(path)
    layout = dct.FeatureLayout.from_dict(meta["layout"])
    config = dif.DenoiserConfig(**meta["config"])
    betas = torch.as_tensor(arrays["schedule/betas"], dtype=DTYPE)
    schedule = dif.DiffusionSchedule(betas, torch.cumprod(1.0 - betas, dim=0))
    model = dif.ShapeDenoiser(layout, config)
    _load_state(model, arrays)
    norm = dif.TokenNorm(arrays["norm/mean"], arrays["norm/std"])
    return dif.ShapeDiffusionModel(model, norm, schedule, layout, config)


def save_motion_diffusion(path, model: dif.MotionDiffusionModel, extra_meta=None):
    arrays = _save_denoiser_arrays(model.denoiser)
    arrays["norm/mean"] = model.norm.mean.numpy()
    arrays["norm/std"] = model.norm.std.numpy()
    arrays["cond/mean"] = model.cond_norm.mean.numpy()
    arrays["cond/std"] = model.cond_norm.std.numpy()
    arrays["schedule/betas"] = model.schedule.betas.numpy()
    meta = {
        "kind": "motion_diffusion",
        "layout": model.layout.to_dict(),
        "config": model.config.to_dict(),
        "cond_dim": int(model.cond_norm.mean.shape[0]),
    }
    meta.update(extra_meta or {})
    write_container(path, arrays, meta)


def load_motion_diffusion(path) -> dif.MotionDiffusionModel:
    arrays, meta = read_container(path)
    layout = dct.FeatureLayout.from_dict(meta["layout"])
    config = dif.DenoiserConfig(**meta["config"])
    betas = torch.as_tensor(arrays["schedule/betas"], dtype=DTYPE)
    schedule = dif.DiffusionSchedule(betas, torch.cumprod(1.0 - betas, dim=0))
    model = dif.MotionDenoiser(layout, meta["cond_dim"], config)
    _load_state(model, arrays)
    norm = dif.TokenNorm(arrays["norm/mean"], arrays["norm/std"])
    cond_norm = dif.TokenNorm(arrays["cond/mean"], arrays["cond/std"])
    return dif.MotionDiffusionModel(model, norm, cond_norm, schedule, layout, config)


# ---------------------------------------------------------------------------
# dataset helpers


def _load_splits(rd: RunDir):
    with open(rd.splits) as fh:
        return json.load(fh)


def _train_dataset(rd: RunDir):
    dataset = datagen.load_dataset(rd.data_manifest)
    return dataset.subset(_load_splits(rd)["train"])


def _sequence_specs(config: PipelineConfig):
    if config.data.corpus == "desk24":
        return datagen.default_desk_specs(config.data.n_frames, config.seed)
    with open(config.data.corpus) as fh:
        raw = json.load(fh)
    return [datagen.SyntheticSpec(**entry) for entry in raw]


def _shape_mlp_spec(config):
    f = config.fields
    return fields.shape_spec(f.shape_width, f.shape_layers, f.d_shape)


def _motion_mlp_spec(config):
    f = config.fields
    return fields.motion_spec(
        f.motion_width, f.motion_layers, f.d_shape, f.d_motion, f.motion_freqs
    )


def _apply_threads(config):
    if config.threads > 0:
        torch.set_num_threads(config.threads)


# ---------------------------------------------------------------------------
# stages


def _stage_synth_data(config: PipelineConfig, rd: RunDir):
    specs = _sequence_specs(config)
    dataset = datagen.generate_dataset(specs, rd.path("data"))
    return {"n_sequences": len(dataset.sequences)}


def _stage_prepare(config: PipelineConfig, rd: RunDir):
    dataset = datagen.load_dataset(rd.data_manifest)
    prep = datagen.PrepConfig(
        n_uniform=config.data.n_uniform,
        n_near=config.data.n_near,
        band=config.data.band,
        n_corr=config.data.n_corr,
        noise_sigma=config.data.noise_sigma,
        noise_fraction=config.data.noise_fraction,
        seed=config.seed,
    )
    datagen.prepare_training_samples(dataset, prep)
    fractions = (
        config.data.train_fraction,
        config.data.val_fraction,
        config.data.test_fraction,
    )
    train, val, test = datagen.split_dataset(
        dataset,
        fractions,
        seed=config.seed,
        held_out_identities=config.data.held_out_identities or None,
    )
    _write_json(
        rd.splits,
        {
            "train": train.sequence_ids,
            "val": val.sequence_ids,
            "test": test.sequence_ids,
        },
    )
    return {"n_train": len(train.sequences), "n_val": len(val.sequences), "n_test": len(test.sequences)}


def _stage_train_shape(config: PipelineConfig, rd: RunDir):
    dataset = _train_dataset(rd)
    f = config.fields
    cfg = fields.FieldTrainConfig(
        epochs=f.shape_epochs,
        point_batch=f.point_batch,
        instance_batch=f.instance_batch,
        lr_weights=f.lr_weights,
        lr_latent=f.lr_latent,
        lambda_reg=f.lambda_reg,
        delta=f.delta,
        seed=config.seed,
        log_path=rd.path("stage_reports", "train-shape.losses.jsonl"),
    )
    weights, codes = fields.train_shape_space(dataset, _shape_mlp_spec(config), cfg)
    save_mlp(rd.checkpoint("shape_mlp"), weights, {"final_loss": weights.losses[-1]})
    save_latents(rd.checkpoint("shape_codes"), codes)
    return {"final_loss": weights.losses[-1]}


def _stage_train_motion(config: PipelineConfig, rd: RunDir):
    dataset = _train_dataset(rd)
    shape_weights = load_mlp(rd.checkpoint("shape_mlp"))
    shape_codes = load_latents(rd.checkpoint("shape_codes"))
    f = config.fields
    cfg = fields.FieldTrainConfig(
        epochs=f.motion_epochs,
        point_batch=f.point_batch,
        instance_batch=f.instance_batch,
        lr_weights=f.lr_weights,
        lr_latent=f.lr_latent,
        lambda_reg=f.lambda_reg,
        delta=f.delta,
        seed=config.seed,
        log_path=rd.path("stage_reports", "train-motion.losses.jsonl"),
    )
    weights, codes = fields.train_motion_space(
        dataset, shape_weights, shape_codes, _motion_mlp_spec(config), cfg
    )
    save_mlp(rd.checkpoint("motion_mlp"), weights, {"final_loss": weights.losses[-1]})
    save_latents(rd.checkpoint("motion_codes"), codes)
    return {"final_loss": weights.losses[-1]}


def _stage_decompose(config: PipelineConfig, rd: RunDir):
    d = config.dictionary
    out = {}
    for kind, k, rk in (("shape", d.shape_k, d.shape_rk), ("motion", d.motion_k, d.motion_rk)):
        weights = load_mlp(rd.checkpoint(f"{kind}_mlp"))
        decoder, _ = dct.decompose(weights, k)
        decoder = dct.extend(decoder, rk, seed=config.seed + (0 if kind == "shape" else 1))
        save_decoder(rd.checkpoint(f"{kind}_dict"), decoder, {"k": k, "rk": rk})
        out[f"{kind}_ks"] = decoder.ks
    return out


def _stage_finetune_shape(config: PipelineConfig, rd: RunDir):
    dataset = _train_dataset(rd)
    decoder = load_decoder(rd.checkpoint("shape_dict"))
    codes = load_latents(rd.checkpoint("shape_codes"))
    d = config.dictionary
    cfg = dct.FinetuneConfig(
        epochs=d.shape_epochs,
        point_batch=d.point_batch,
        instance_batch=d.instance_batch,
        lr_residual=d.lr_residual,
        lr_gamma=d.lr_gamma,
        lambda_orth=d.lambda_orth,
        delta=config.fields.delta,
        seed=config.seed,
        log_path=rd.path("stage_reports", "finetune-shape.losses.jsonl"),
    )
    tuned, coeffs = dct.finetune_shape(dataset, decoder, codes, cfg)
    save_decoder(rd.checkpoint("shape_dict_tuned"), tuned, {"final_loss": tuned.losses[-1]})
    save_coeffs(rd.checkpoint("shape_coeffs"), coeffs)
    orth = max(float(dct.orthogonality_loss(l)) for l in tuned.layers)
    return {"final_loss": tuned.losses[-1], "max_orthogonality_loss": orth}


def _stage_finetune_motion(config: PipelineConfig, rd: RunDir):
    dataset = _train_dataset(rd)
    decoder = load_decoder(rd.checkpoint("motion_dict"))
    shape_codes = load_latents(rd.checkpoint("shape_codes"))
    motion_codes = load_latents(rd.checkpoint("motion_codes"))
    d = config.dictionary
    cfg = dct.FinetuneConfig(
        epochs=d.motion_epochs,
        point_batch=d.point_batch,
        instance_batch=d.instance_batch,
        lr_residual=d.lr_residual,
        lr_gamma=d.lr_gamma,
        lambda_orth=d.lambda_orth,
        delta=config.fields.delta,
        seed=config.seed,
        log_path=rd.path("stage_reports", "finetune-motion.losses.jsonl"),
    )
    tuned, coeffs = dct.finetune_motion(dataset, decoder, shape_codes, motion_codes, cfg)
    save_decoder(rd.checkpoint("motion_dict_tuned"), tuned, {"final_loss": tuned.losses[-1]})
    save_coeffs(rd.checkpoint("motion_coeffs"), coeffs)
    orth = max(float(dct.orthogonality_loss(l)) for l in tuned.layers)
    return {"final_loss": tuned.losses[-1], "max_orthogonality_loss": orth}


def _shape_features(rd: RunDir):
    codes = load_latents(rd.checkpoint("shape_codes"))
    coeffs = load_coeffs(rd.checkpoint("shape_coeffs"))
    decoder = load_decoder(rd.checkpoint("shape_dict_tuned"))
    layout = decoder.layout(codes.dim)
    ids = sorted(coeffs)
    feats = torch.stack(
        [
            dct.flatten_feature(dct.Feature(codes.code(sid), coeffs[sid]))
            for sid in ids
        ]
    )
    return feats, layout, ids


def _stage_train_shape_diff(config: PipelineConfig, rd: RunDir):
    feats, layout, _ = _shape_features(rd)
    d = config.diffusion
    schedule = dif.make_schedule(d.train_steps, d.schedule)
    dcfg = dif.DenoiserConfig(d.token_dim, d.depth, d.n_heads, d.t_frames, d.k_frames)
    tcfg = dif.DiffusionTrainConfig(
        epochs=d.shape_epochs,
        batch=d.batch,
        lr=d.lr,
        seed=config.seed,
        log_path=rd.path("stage_reports", "train-shape-diff.losses.jsonl"),
    )
    model = dif.train_shape_diffusion(feats, schedule, layout, dcfg, tcfg)
    save_shape_diffusion(
        rd.checkpoint("shape_diffusion"), model, {"final_loss": model.losses[-1]}
    )
    return {"final_loss": model.losses[-1]}


def _motion_sequences(rd: RunDir):
    shape_codes = load_latents(rd.checkpoint("shape_codes"))
    motion_codes = load_latents(rd.checkpoint("motion_codes"))
    coeffs = load_coeffs(rd.checkpoint("motion_coeffs"))
    decoder = load_decoder(rd.checkpoint("motion_dict_tuned"))
    layout = decoder.layout(motion_codes.dim)
    by_seq = {}
    for key in coeffs:
        sid, t = key.rsplit(":", 1)
        by_seq.setdefault(sid, []).append(int(t))
    sequences = []
    for sid in sorted(by_seq):
        frames = sorted(by_seq[sid])
        feats = torch.stack(
            [
                dct.flatten_feature(
                    dct.Feature(motion_codes.code(f"{sid}:{t}"), coeffs[f"{sid}:{t}"])
                )
                for t in frames
            ]
        )
        sequences.append((feats, shape_codes.code(sid)))
    return sequences, layout


def _stage_train_motion_diff(config: PipelineConfig, rd: RunDir):
    sequences, layout = _motion_sequences(rd)
    d = config.diffusion
    schedule = dif.make_schedule(d.train_steps, d.schedule)
    dcfg = dif.DenoiserConfig(d.token_dim, d.depth, d.n_heads, d.t_frames, d.k_frames)
    tcfg = dif.DiffusionTrainConfig(
        epochs=d.motion_epochs,
        batch=d.batch,
        lr=d.lr,
        seed=config.seed,
        cond_noise_max=d.cond_noise_max,
        reversal_prob=d.reversal_prob,
        log_path=rd.path("stage_reports", "train-motion-diff.losses.jsonl"),
    )
    model = dif.train_motion_diffusion(sequences, schedule, layout, dcfg, tcfg)
    save_motion_diffusion(
        rd.checkpoint("motion_diffusion"), model, {"final_loss": model.losses[-1]}
    )
    return {"final_loss": model.losses[-1]}


STAGES = {
    "synth-data": (_stage_synth_data, [], ["data/manifest.json"]),
    "prepare": (_stage_prepare, ["data/manifest.json"], ["splits.json"]),
    "train-shape": (
        _stage_train_shape,
        ["splits.json"],
        ["checkpoints/shape_mlp.ckpt", "checkpoints/shape_codes.ckpt"],
    ),
    "train-motion": (
        _stage_train_motion,
        ["checkpoints/shape_mlp.ckpt", "checkpoints/shape_codes.ckpt"],
        ["checkpoints/motion_mlp.ckpt", "checkpoints/motion_codes.ckpt"],
    ),
    "decompose": (
        _stage_decompose,
        ["checkpoints/shape_mlp.ckpt", "checkpoints/motion_mlp.ckpt"],
        ["checkpoints/shape_dict.ckpt", "checkpoints/motion_dict.ckpt"],
    ),
    "finetune-shape": (
        _stage_finetune_shape,
        ["checkpoints/shape_dict.ckpt", "checkpoints/shape_codes.ckpt"],
        ["checkpoints/shape_dict_tuned.ckpt", "checkpoints/shape_coeffs.ckpt"],
    ),
    "finetune-motion": (
        _stage_finetune_motion,
        ["checkpoints/motion_dict.ckpt", "checkpoints/motion_codes.ckpt"],
        ["checkpoints/motion_dict_tuned.ckpt", "checkpoints/motion_coeffs.ckpt"],
    ),
    "train-shape-diff": (
        _stage_train_shape_diff,
        ["checkpoints/shape_coeffs.ckpt", "checkpoints/shape_dict_tuned.ckpt"],
        ["checkpoints/shape_diffusion.ckpt"],
    ),
    "train-motion-diff": (
        _stage_train_motion_diff,
        ["checkpoints/motion_coeffs.ckpt", "checkpoints/motion_dict_tuned.ckpt"],
        ["checkpoints/motion_diffusion.ckpt"],
    ),
}

STAGE_ORDER = list(STAGES)


def _stage_input_hash(config: PipelineConfig, rd: RunDir, prereqs):
    h = hashlib.sha256()
    h.update(json.dumps(config.to_dict(), sort_keys=True).encode())
    for rel in prereqs:
        h.update(_file_digest(rd.path(rel)).encode())
    return h.hexdigest()


def run_stage(stage: str, config: PipelineConfig, run_dir) -> dict:
    """Run one pipeline stage; skips when inputs are unchanged.

    Returns the stage report. Raises PrerequisiteError when an earlier
    stage's outputs are missing.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; valid: {', '.join(STAGES)}")
    fn, prereqs, outputs = STAGES[stage]
    rd = RunDir(run_dir).ensure()
    for rel in prereqs:
        if not os.path.exists(rd.path(rel)):
            needed = _producing_stage(rel)
            raise PrerequisiteError(
                f"stage {stage!r} needs {rel}; run stage {needed!r} first"
            )
    input_hash = _stage_input_hash(config, rd, prereqs)
    report_path = rd.report(stage)
    if os.path.exists(report_path) and all(os.path.exists(rd.path(o)) for o in outputs):
        with open(report_path) as fh:
            previous = json.load(fh)
        if previous.get("input_hash") == input_hash:
            previous["status"] = "skipped"
            return previous
    _apply_threads(config)
    with RunLock(rd):
        t0 = time.time()
        try:
            results = fn(config, rd)
        except (fields.TrainingDiverged, geometry.EmptyMeshError) as exc:
            raise NumericalError(str(exc)) from exc
        report = {
            "stage": stage,
            "status": "completed",
            "duration_s": time.time() - t0,
            "input_hash": input_hash,
            "results": results,
            "seed": config.seed,
            "config": config.to_dict(),
        }
        _write_json(report_path, report)
    return report


def _producing_stage(rel_path):
    for name, (_, _, outputs) in STAGES.items():
        if rel_path in outputs:
            return name
    return "synth-data"


# ---------------------------------------------------------------------------
# generation commands


def _require(rd: RunDir, names):
    for name in names:
        if not os.path.exists(rd.checkpoint(name)):
            raise PrerequisiteError(
                f"missing checkpoint {name!r}; run stage {_producing_stage('checkpoints/' + name + '.ckpt')!r} first"
            )


def _save_sample_features(path, shape_feature, motion_features):
    arrays = {"shape/latent": shape_feature.latent.detach().numpy()}
    for l, g in enumerate(shape_feature.coeffs.gammas):
        arrays[f"shape/gamma/{l:02d}"] = g.detach().numpy()
    for t, f in enumerate(motion_features):
        arrays[f"motion/{t:03d}/latent"] = f.latent.detach().numpy()
        for l, g in enumerate(f.coeffs.gammas):
            arrays[f"motion/{t:03d}/gamma/{l:02d}"] = g.detach().numpy()
    write_container(
        path,
        arrays,
        {"kind": "sample_features", "n_motion": len(motion_features),
         "n_layers": shape_feature.coeffs.n_layers},
    )


def _load_sample_features(path):
    arrays, meta = read_container(path)
    n_layers = meta["n_layers"]
    shape_feature = dct.Feature(
        torch.as_tensor(arrays["shape/latent"], dtype=DTYPE),
        dct.CoefficientSet(
            [torch.as_tensor(arrays[f"shape/gamma/{l:02d}"], dtype=DTYPE) for l in range(n_layers)]
        ),
    )
    motion_features = []
    for t in range(meta["n_motion"]):
        motion_features.append(
            dct.Feature(
                torch.as_tensor(arrays[f"motion/{t:03d}/latent"], dtype=DTYPE),
                dct.CoefficientSet(
                    [
                        torch.as_tensor(arrays[f"motion/{t:03d}/gamma/{l:02d}"], dtype=DTYPE)
                        for l in range(n_layers)
                    ]
                ),
            )
        )
    return shape_feature, motion_features


def _motion_feature_plan(motion_model, condition, n_motion, seed, n_steps):
    """First full window, then sliding-window out-painting up to n_motion frames."""
    window = dif.ddim_sample_motion(motion_model, condition, n_steps=n_steps, seed=seed)
    if n_motion <= len(window):
        return window[:n_motion]
    k = motion_model.config.k_frames
    extended = dif.outpaint_extend(
        motion_model,
        condition,
        window[-k:],
        n_new=n_motion - len(window),
        seed=seed + 1,
        n_steps=n_steps,
    )
    return window + extended[k:]


def _decode_sequence(shape_decoder, motion_decoder, shape_feature, motion_features, resolution):
    canonical = evalmod.dict_shape_mesh(shape_decoder, shape_feature, resolution)
    meshes = [canonical]
    for f in motion_features:
        flow = evalmod.dict_flow(motion_decoder, shape_feature.latent, f)
        meshes.append(geometry.warp_mesh(canonical, flow))
    return meshes


def _write_sample_sequence(rd, name, meshes, shape_feature, motion_features):
    seq_dir = rd.path("samples", name)
    os.makedirs(seq_dir, exist_ok=True)
    frame_files = []
    for t, mesh in enumerate(meshes):
        rel = os.path.join(name, f"frame_{t:03d}.obj")
        geometry.save_obj(mesh, rd.path("samples", rel))
        frame_files.append(rel)
    _save_sample_features(
        os.path.join(seq_dir, "features.ckpt"), shape_feature, motion_features
    )
    return {
        "sequence_id": name,
        "identity": name,
        "n_frames": len(meshes),
        "frame_files": frame_files,
        "cache_files": {"features": os.path.join(name, "features.ckpt")},
    }


def _write_samples_manifest(rd, records):
    _write_json(
        rd.path("samples", "manifest.json"),
        {
            "version": datagen.MANIFEST_VERSION,
            "sequences": records,
            "normalization": {"center": [0.0, 0.0, 0.0], "scale": 1.0},
        },
    )


def sample(config: PipelineConfig, run_dir, n: int, frames: int, seed: int | None = None) -> dict:
    """Generate n deforming sequences: shape feature, motion windows, meshes."""
    rd = RunDir(run_dir).ensure()
    _require(
        rd,
        ["shape_diffusion", "motion_diffusion", "shape_dict_tuned", "motion_dict_tuned"],
    )
    _apply_threads(config)
    if frames < 1:
        raise ConfigError("frames must be >= 1")
    seed = config.seed if seed is None else seed
    shape_model = load_shape_diffusion(rd.checkpoint("shape_diffusion"))
    motion_model = load_motion_diffusion(rd.checkpoint("motion_diffusion"))
    shape_decoder = load_decoder(rd.checkpoint("shape_dict_tuned"))
    motion_decoder = load_decoder(rd.checkpoint("motion_dict_tuned"))
    steps = config.diffusion.ddim_steps
    records, skipped = [], []
    existing_manifest = rd.path("samples", "manifest.json")
    if os.path.exists(existing_manifest):
        with open(existing_manifest) as fh:
            records = json.load(fh)["sequences"]
    for i in range(n):
        name = f"gen_{seed:04d}_{i:03d}"
        sample_seed = seed + 7919 * i
        shape_feature = dif.ddim_sample_shape(shape_model, n_steps=steps, seed=sample_seed)
        try:
            motion_features = _motion_feature_plan(
                motion_model, shape_feature.latent, frames - 1, sample_seed + 1, steps
            )
            meshes = _decode_sequence(
                shape_decoder, motion_decoder, shape_feature, motion_features,
                config.eval.mc_resolution,
            )
        except geometry.EmptyMeshError as exc:
            warnings.warn(f"sample {name}: {exc}; skipped")
            skipped.append({"sample": name, "reason": str(exc)})
            continue
        records = [r for r in records if r["sequence_id"] != name]
        records.append(
            _write_sample_sequence(rd, name, meshes, shape_feature, motion_features)
        )
    _write_samples_manifest(rd, records)
    report = {
        "requested": n,
        "written": n - len(skipped),
        "skipped": skipped,
        "seed": seed,
        "frames": frames,
        "ddim_steps": steps,
    }
    _write_json(rd.path("reports", "sample_report.json"), report)
    return report


def extend(config: PipelineConfig, run_dir, sequence_id: str, n_new: int, seed: int | None = None) -> dict:
    """Out-paint additional frames onto an existing generated sequence."""
    rd = RunDir(run_dir)
    _require(rd, ["motion_diffusion", "shape_dict_tuned", "motion_dict_tuned"])
    _apply_threads(config)
    manifest_path = rd.path("samples", "manifest.json")
    if not os.path.exists(manifest_path):
        raise PrerequisiteError("no samples manifest; run sample first")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    record = next(
        (r for r in manifest["sequences"] if r["sequence_id"] == sequence_id), None
    )
    if record is None:
        raise ConfigError(f"unknown generated sequence {sequence_id!r}")
    seed = config.seed if seed is None else seed
    motion_model = load_motion_diffusion(rd.checkpoint("motion_diffusion"))
    shape_decoder = load_decoder(rd.checkpoint("shape_dict_tuned"))
    motion_decoder = load_decoder(rd.checkpoint("motion_dict_tuned"))
    shape_feature, motion_features = _load_sample_features(
        rd.path("samples", record["cache_files"]["features"])
    )
    k = motion_model.config.k_frames
    if len(motion_features) < k:
        raise ConfigError(f"sequence {sequence_id!r} has fewer than {k} motion frames")
    extended = dif.outpaint_extend(
        motion_model,
        shape_feature.latent,
        motion_features[-k:],
        n_new=n_new,
        seed=seed,
        n_steps=config.diffusion.ddim_steps,
    )
    new_features = extended[k:]
    canonical = evalmod.dict_shape_mesh(
        shape_decoder, shape_feature, config.eval.mc_resolution
    )
    start = record["n_frames"]
    for j, f in enumerate(new_features):
        flow = evalmod.dict_flow(motion_decoder, shape_feature.latent, f)
        mesh = geometry.warp_mesh(canonical, flow)
        rel = os.path.join(sequence_id, f"frame_{start + j:03d}.obj")
        geometry.save_obj(mesh, rd.path("samples", rel))
        record["frame_files"].append(rel)
    motion_features = motion_features + new_features
    record["n_frames"] = start + len(new_features)
    _save_sample_features(
        rd.path("samples", record["cache_files"]["features"]), shape_feature, motion_features
    )
    _write_json(manifest_path, manifest)
    return {"sequence_id": sequence_id, "n_new": len(new_features), "n_frames": record["n_frames"]}


def fit_and_animate(config: PipelineConfig, run_dir, mesh_path, frames: int, seed: int | None = None) -> dict:
    """Fit an unseen watertight mesh with the frozen dictionary, then animate it."""
    rd = RunDir(run_dir).ensure()
    _require(rd, ["shape_dict_tuned", "motion_diffusion", "motion_dict_tuned"])
    _apply_threads(config)
    seed = config.seed if seed is None else seed
    mesh = geometry.load_obj(mesh_path, os.path.basename(str(mesh_path)))
    mesh, _, _ = geometry.normalize_to_unit_box(mesh)
    obs = geometry.sample_sdf(
        mesh,
        n_uniform=config.data.n_uniform,
        n_near=config.data.n_near,
        band=config.data.band,
        seed=seed,
    )
    decoder = load_decoder(rd.checkpoint("shape_dict_tuned"))
    fit_cfg = dct.FitConfig(
        iters=max(200, config.eval.ablation_fit_iters),
        delta=config.fields.delta,
        seed=seed,
    )
    feature = dct.fit_unseen_shape(decoder, obs, fit_cfg, optimize_coeffs=True)
    recon = evalmod.dict_shape_mesh(decoder, feature, config.eval.mc_resolution)
    fit_cd = geometry.chamfer_distance(
        evalmod.mesh_points(recon, config.eval.points_per_frame, seed + 5),
        evalmod.mesh_points(mesh, config.eval.points_per_frame, seed + 6),
    )
    motion_model = load_motion_diffusion(rd.checkpoint("motion_diffusion"))
    motion_decoder = load_decoder(rd.checkpoint("motion_dict_tuned"))
    motion_features = _motion_feature_plan(
        motion_model, feature.latent, frames - 1, seed + 7, config.diffusion.ddim_steps
    )
    meshes = [recon] + [
        geometry.warp_mesh(
            recon, evalmod.dict_flow(motion_decoder, feature.latent, f)
        )
        for f in motion_features
    ]
    name = f"fit_{os.path.splitext(os.path.basename(str(mesh_path)))[0]}_{seed:04d}"
    record = _write_sample_sequence(rd, name, meshes, feature, motion_features)
    manifest_path = rd.path("samples", "manifest.json")
    records = []
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            records = [
                r for r in json.load(fh)["sequences"] if r["sequence_id"] != name
            ]
    records.append(record)
    _write_samples_manifest(rd, records)
    report = {
        "sequence_id": name,
        "fit_cd": fit_cd,
        "final_fit_loss": feature.losses[-1],
        "n_frames": len(meshes),
        "seed": seed,
    }
    _write_json(rd.path("reports", f"{name}.json"), report)
    return report


def _mesh_seed(mesh, base):
    # content-derived seed: identical meshes sample identical points, so a
    # generated copy of a reference sequence scores exactly zero distance
    digest = hashlib.sha256(mesh.vertices.tobytes()).digest()
    return (base + int.from_bytes(digest[:4], "little")) % (2**31)


def _sequences_as_points(dataset, n_points, seed):
    out = []
    for sid in dataset.sequence_ids:
        rec = dataset.record(sid)
        frames = []
        for t in range(rec.n_frames):
            mesh = dataset.frame_mesh(sid, t)
            frames.append(evalmod.mesh_points(mesh, n_points, _mesh_seed(mesh, seed)))
        out.append(frames)
    return out


def evaluate(config: PipelineConfig, run_dir, gen_dir=None, ref_split: str = "test") -> dict:
    """Metric report plus novelty histogram for generated sequences."""
    rd = RunDir(run_dir).ensure()
    gen_dir = gen_dir or rd.path("samples")
    gen_manifest = os.path.join(gen_dir, "manifest.json")
    if not os.path.exists(gen_manifest):
        raise PrerequisiteError(f"no generated sequences at {gen_manifest}")
    gen = datagen.load_dataset(gen_manifest)
    if not gen.sequences:
        raise PrerequisiteError("generated manifest lists no sequences")
    dataset = datagen.load_dataset(rd.data_manifest)
    splits = _load_splits(rd)
    if ref_split not in splits:
        raise ConfigError(f"unknown ref split {ref_split!r}")
    ref = dataset.subset(splits[ref_split])
    train = dataset.subset(splits["train"])
    npts = config.eval.points_per_frame
    gen_pts = _sequences_as_points(gen, npts, config.seed)
    ref_pts = _sequences_as_points(ref, npts, config.seed)
    train_pts = _sequences_as_points(train, npts, config.seed)
    # sequence Chamfer needs equal lengths: compare on the common prefix
    n_frames = min(len(s) for s in gen_pts + ref_pts + train_pts)
    gen_pts = [s[:n_frames] for s in gen_pts]
    ref_pts = [s[:n_frames] for s in ref_pts]
    train_pts = [s[:n_frames] for s in train_pts]
    report = evalmod.metric_report(gen_pts, ref_pts, npts)
    evalmod.write_metric_csv(report, rd.path("reports", "metrics.csv"))
    rows = evalmod.novelty_histogram(gen_pts, train_pts)
    evalmod.write_novelty_csv(rows, rd.path("reports", "novelty.csv"))
    out = dataclasses.asdict(report)
    out["n_frames_compared"] = n_frames
    _write_json(rd.path("reports", "metrics.json"), out)
    return out


def reconstruct_ablation(config: PipelineConfig, run_dir) -> dict:
    """Table-2-style four-variant reconstruction comparison on the train split."""
    rd = RunDir(run_dir).ensure()
    _require(
        rd,
        [
            "shape_mlp", "shape_codes", "motion_mlp", "motion_codes",
            "shape_dict_tuned", "shape_coeffs", "motion_dict_tuned", "motion_coeffs",
        ],
    )
    _apply_threads(config)
    artifacts = evalmod.TrainedArtifacts(
        shape_weights=load_mlp(rd.checkpoint("shape_mlp")),
        shape_codes=load_latents(rd.checkpoint("shape_codes")),
        motion_weights=load_mlp(rd.checkpoint("motion_mlp")),
        motion_codes=load_latents(rd.checkpoint("motion_codes")),
        shape_decoder=load_decoder(rd.checkpoint("shape_dict_tuned")),
        shape_coeffs=load_coeffs(rd.checkpoint("shape_coeffs")),
        motion_decoder=load_decoder(rd.checkpoint("motion_dict_tuned")),
        motion_coeffs=load_coeffs(rd.checkpoint("motion_coeffs")),
    )
    cfg = evalmod.AblationConfig(
        points_per_frame=config.eval.points_per_frame,
        mc_resolution=config.eval.ablation_mc_resolution,
        fit_iters=config.eval.ablation_fit_iters,
        delta=config.fields.delta,
        seed=config.seed,
    )
    table = evalmod.reconstruction_ablation(_train_dataset(rd), artifacts, cfg)
    evalmod.write_ablation_csv(table, rd.path("reports", "ablation.csv"))
    _write_json(rd.path("reports", "ablation.json"), table)
    return table
