import json
import os

import numpy as np
import pytest
import torch

from deform4d import cli, datagen

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


def box_specs(n=6, deformations=("translate", "twist", "bend", "stretch"), n_frames=5):
    """Varied-box corpus: small global nets underfit it, fine-tuning recovers it."""
    halves = [
        (0.5, 0.38, 0.3),
        (0.42, 0.5, 0.26),
        (0.3, 0.34, 0.52),
        (0.55, 0.25, 0.4),
        (0.36, 0.45, 0.42),
        (0.48, 0.3, 0.48),
        (0.52, 0.42, 0.22),
        (0.26, 0.5, 0.4),
    ]
    amplitudes = {"translate": 0.2, "twist": 0.5, "bend": 0.35, "stretch": 0.25}
    specs = []
    for i in range(n):
        motion = deformations[i % len(deformations)]
        specs.append(
            datagen.SyntheticSpec(
                sequence_id=f"box{i}_{motion}",
                identity=f"box{i}",
                kind="box",
                shape_params={"half_extents": halves[i], "segments": 5},
                deformation=motion,
                amplitude=amplitudes[motion],
                n_frames=n_frames,
            )
        )
    return specs


@pytest.fixture(scope="session")
def sphere_dataset(tmp_path_factory):
    """One icosphere sequence with cached samples, for field-training tests."""
    root = tmp_path_factory.mktemp("sphere_ds")
    specs = [
        datagen.SyntheticSpec(
            "sph_tr", "sph", "sphere",
            {"radius": 0.5, "subdivisions": 2},
            "translate", 0.1, 4,
        )
    ]
    ds = datagen.generate_dataset(specs, root)
    datagen.prepare_training_samples(
        ds, datagen.PrepConfig(n_uniform=500, n_near=1200, n_corr=800, seed=0)
    )
    return ds


ACCEPTANCE_CONFIG = {
    "seed": 7,
    "threads": 0,
    "data": {
        "n_frames": 5,
        "n_uniform": 1200,
        "n_near": 2800,
        "n_corr": 2500,
        "train_fraction": 1.0,
        "val_fraction": 0.0,
        "test_fraction": 0.0,
    },
    "fields": {
        "shape_width": 48, "shape_layers": 4, "d_shape": 16,
        "motion_width": 64, "motion_layers": 4, "d_motion": 16, "motion_freqs": 2,
        "shape_epochs": 300, "motion_epochs": 250,
        "point_batch": 640, "instance_batch": 8,
    },
    "dictionary": {
        "shape_k": 36, "shape_rk": 10, "motion_k": 48, "motion_rk": 12,
        "shape_epochs": 1200, "motion_epochs": 400,
        "lr_residual": 1e-3, "lr_gamma": 5e-3,
        "point_batch": 640, "instance_batch": 8,
    },
    "diffusion": {
        "train_steps": 300, "ddim_steps": 50,
        "token_dim": 64, "depth": 3, "n_heads": 4,
        "t_frames": 3, "k_frames": 1,
        "shape_epochs": 800, "motion_epochs": 300, "batch": 8,
    },
    "eval": {
        "points_per_frame": 1024,
        "mc_resolution": 48,
        "ablation_mc_resolution": 48,
        "ablation_fit_iters": 150,
    },
}


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    """Full desk-scale (reduced corpus) pipeline, shared by acceptance tests.

    Six single-identity box sequences; every stage runs through the CLI so
    the acceptance checks exercise the shipped artifacts.
    """
    root = tmp_path_factory.mktemp("acceptance")
    specs_path = root / "specs.json"
    specs = box_specs(n=6, n_frames=5)
    with open(specs_path, "w") as fh:
        json.dump(
            [
                {
                    "sequence_id": s.sequence_id,
                    "identity": s.identity,
                    "kind": s.kind,
                    "shape_params": s.shape_params,
                    "deformation": s.deformation,
                    "amplitude": s.amplitude,
                    "n_frames": s.n_frames,
                }
                for s in specs
            ],
            fh,
        )
    config = dict(ACCEPTANCE_CONFIG)
    config["data"] = dict(config["data"], corpus=str(specs_path))
    config_path = root / "config.json"
    with open(config_path, "w") as fh:
        json.dump(config, fh)
    run_dir = root / "run"
    for stage in [
        "synth-data", "prepare", "train-shape", "train-motion", "decompose",
        "finetune-shape", "finetune-motion", "train-shape-diff", "train-motion-diff",
    ]:
        rc = cli.main([stage, "--config", str(config_path), "--run-dir", str(run_dir)])
        assert rc == 0, f"stage {stage} failed"
    return {"run_dir": str(run_dir), "config_path": str(config_path), "root": str(root)}
