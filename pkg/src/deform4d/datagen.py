"""Procedural synthetic 4D corpus with analytic deformations.

Every sequence is a canonical mesh plus closed-form per-frame vertex
displacements, so ground-truth flow is available exactly. Stands in for a
large external mesh-sequence dataset; an importer for such a source can
implement the same manifest schema.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .checkpoint import read_container, write_container
from .geometry import TriMesh

MANIFEST_VERSION = 1


class DatagenError(Exception):
    pass


# ---------------------------------------------------------------------------
# analytic SDFs (construction + oracles)


def sphere_sdf(points, radius=0.5, center=(0.0, 0.0, 0.0)):
    return np.linalg.norm(points - np.asarray(center), axis=-1) - radius


def capsule_sdf(points, a, b, radius):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pa = points - a
    ba = b - a
    h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[:, None] * ba, axis=-1) - radius


def union_sdf(sdfs):
    def f(points):
        return np.minimum.reduce([s(points) for s in sdfs])

    return f


# ---------------------------------------------------------------------------
# primitive meshes


def icosphere(radius=0.5, subdivisions=3, name="icosphere"):
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edge_mid = {}
        new_faces = []
        verts_list = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = verts_list[i] + verts_list[j]
                m /= np.linalg.norm(m)
                edge_mid[key] = len(verts_list)
                verts_list.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return TriMesh(verts * radius, faces, name)


def box_mesh(half_extents=(0.5, 0.5, 0.5), segments=6, name="box"):
    """Axis-aligned box with each face subdivided into segments x segments quads."""
    h = np.asarray(half_extents, dtype=np.float64)
    verts = []
    faces = []
    index = {}

    def vid(p):
        key = tuple(np.round(p, 9))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    lin = np.linspace(-1.0, 1.0, segments + 1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_axis, v_axis = (axis + 1) % 3, (axis + 2) % 3
            for i in range(segments):
                for j in range(segments):
                    quad = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign
                        p[u_axis] = lin[i + du]
                        p[v_axis] = lin[j + dv]
                        quad.append(vid(p * h))
                    a, b, c, d = quad
                    if sign > 0:
                        faces += [[a, b, c], [a, c, d]]
                    else:
                        faces += [[a, c, b], [a, d, c]]
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64), name)


def capsule_mesh(half_length=0.4, radius=0.25, resolution=48, name="capsule"):
    a = np.array([-half_length, 0.0, 0.0])
    b = np.array([half_length, 0.0, 0.0])
    mesh = geometry.marching_cubes(
        lambda p: capsule_sdf(p, a, b, radius), resolution=resolution
    )
    return TriMesh(mesh.vertices, mesh.triangles, name)


QUADRUPED_DEFAULTS = {
    "body_half_length": 0.42,
    "body_radius": 0.2,
    "body_z": 0.18,
    "leg_radius": 0.09,
    "leg_x": 0.3,
    "leg_y": 0.17,
    "foot_z": -0.62,
    "resolution": 56,
}


def quadruped_blob_mesh(params=None, name="quadruped"):
    """Capsule body with four capsule legs, meshed via marching cubes."""
    p = dict(QUADRUPED_DEFAULTS)
    p.update(params or {})
    bz = p["body_z"]
    body = lambda q: capsule_sdf(
        q, (-p["body_half_length"], 0, bz), (p["body_half_length"], 0, bz), p["body_radius"]
    )
    parts = [body]
    for sx in (-1, 1):
        for sy in (-1, 1):
            hip = np.array([sx * p["leg_x"], sy * p["leg_y"], bz])
            foot = np.array([sx * p["leg_x"], sy * p["leg_y"], p["foot_z"]])
            parts.append(
                lambda q, hip=hip, foot=foot: capsule_sdf(q, hip, foot, p["leg_radius"])
            )
    mesh = geometry.marching_cubes(union_sdf(parts), resolution=p["resolution"])
    return TriMesh(mesh.vertices, mesh.triangles, name)


IDENTITY_BUILDERS = {
    "sphere": lambda params: icosphere(**params),
    "ellipsoid": lambda params: _ellipsoid(**params),
    "capsule": lambda params: capsule_mesh(**params),
    "box": lambda params: box_mesh(**params),
    "quadruped_blob": lambda params: quadruped_blob_mesh(params),
}


def _ellipsoid(radii=(0.6, 0.45, 0.35), subdivisions=3):
    base = icosphere(1.0, subdivisions, "ellipsoid")
    return TriMesh(base.vertices * np.asarray(radii), base.triangles, "ellipsoid")


# ---------------------------------------------------------------------------
# closed-form deformations; frame 0 is always the identity


def _ramp(frame, n_frames):
    return frame / (n_frames - 1)


def _deform_translate(points, frame, n_frames, amplitude, params):
    direction = np.asarray(params.get("direction", (1.0, 0.0, 0.0)))
    return points + amplitude * _ramp(frame, n_frames) * direction


def _deform_stretch(points, frame, n_frames, amplitude, params):
    out = points.copy()
    out[:, 2] *= 1.0 + amplitude * _ramp(frame, n_frames)
    return out


def _deform_twist(points, frame, n_frames, amplitude, params):
    angle = amplitude * _ramp(frame, n_frames) * points[:, 2]
    ca, sa = np.cos(angle), np.sin(angle)
    out = points.copy()
    out[:, 0] = ca * points[:, 0] - sa * points[:, 1]
    out[:, 1] = sa * points[:, 0] + ca * points[:, 1]
    return out


def _deform_bend(points, frame, n_frames, amplitude, params):
    angle = amplitude * _ramp(frame, n_frames) * points[:, 0]
    ca, sa = np.cos(angle), np.sin(angle)
    out = points.copy()
    out[:, 0] = ca * points[:, 0] - sa * points[:, 2]
    out[:, 2] = sa * points[:, 0] + ca * points[:, 2]
    return out


def _deform_leg_swing(points, frame, n_frames, amplitude, params):
    """Sinusoidal forward swing of the four legs, diagonal pairs in phase.

    Displacement ramps linearly from zero at hip height to full amplitude
    at the leg tip; peak tip displacement equals `amplitude` exactly when
    n_frames is divisible by 4.
    """
    hip_z = params["hip_z"]
    tip_z = params["tip_z"]
    w = np.clip((hip_z - points[:, 2]) / (hip_z - tip_z), 0.0, 1.0)
    side = np.where(points[:, 0] * points[:, 1] >= 0, 1.0, -1.0)
    out = points.copy()
    out[:, 0] += amplitude * np.sin(2.0 * np.pi * frame / n_frames) * side * w
    return out


DEFORMATIONS = {
    "translate": _deform_translate,
    "stretch": _deform_stretch,
    "twist": _deform_twist,
    "bend": _deform_bend,
    "leg_swing": _deform_leg_swing,
}


# ---------------------------------------------------------------------------
# sequence specs


@dataclass
class SyntheticSpec:
    sequence_id: str
    identity: str
    kind: str
    shape_params: dict = field(default_factory=dict)
    deformation: str = "translate"
    amplitude: float = 0.1
    n_frames: int = 16
    deform_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in IDENTITY_BUILDERS:
            raise DatagenError(f"{self.sequence_id}: unknown identity kind {self.kind!r}")
        if self.deformation not in DEFORMATIONS:
            raise DatagenError(
                f"{self.sequence_id}: unknown deformation {self.deformation!r}"
            )
        if self.n_frames < 2:
            raise DatagenError(f"{self.sequence_id}: n_frames must be >= 2")


def build_identity_mesh(spec: SyntheticSpec) -> TriMesh:
    mesh = IDENTITY_BUILDERS[spec.kind](dict(spec.shape_params))
    return TriMesh(mesh.vertices, mesh.triangles, spec.identity)


def analytic_deformation(spec: SyntheticSpec, canonical: TriMesh):
    """Closed-form map (points, frame) -> deformed points for this sequence."""
    fn = DEFORMATIONS[spec.deformation]
    params = dict(spec.deform_params)
    if spec.deformation == "leg_swing":
        params.setdefault("hip_z", float(spec.shape_params.get("body_z", QUADRUPED_DEFAULTS["body_z"])))
        params.setdefault("tip_z", float(canonical.vertices[:, 2].min()))

    def deform(points, frame):
        return fn(np.asarray(points, dtype=np.float64), frame, spec.n_frames, spec.amplitude, params)

    return deform


def default_desk_specs(n_frames: int = 16, seed: int = 0):
    """Desk corpus: 8 identities x 3 motions = 24 sequences."""
    identities = [
        ("sphere_a", "sphere", {"radius": 0.55, "subdivisions": 3}),
        ("ellipsoid_a", "ellipsoid", {"radii": (0.65, 0.45, 0.3)}),
        ("ellipsoid_b", "ellipsoid", {"radii": (0.4, 0.6, 0.45)}),
        ("capsule_a", "capsule", {"half_length": 0.45, "radius": 0.22}),
        ("capsule_b", "capsule", {"half_length": 0.3, "radius": 0.3}),
        ("box_a", "box", {"half_extents": (0.5, 0.38, 0.3), "segments": 6}),
        ("quadruped_a", "quadruped_blob", {}),
        ("quadruped_b", "quadruped_blob", {"body_radius": 0.16, "leg_radius": 0.07, "foot_z": -0.55}),
    ]
    motion_cycle = ["translate", "bend", "stretch", "twist"]
    amplitudes = {"translate": 0.2, "bend": 0.35, "stretch": 0.25, "twist": 0.6, "leg_swing": 0.15}
    specs = []
    for i, (ident, kind, params) in enumerate(identities):
        if kind == "quadruped_blob":
            motions = ["leg_swing", "translate", "twist"]
        else:
            motions = [motion_cycle[(i + j) % len(motion_cycle)] for j in range(3)]
        for motion in motions:
            specs.append(
                SyntheticSpec(
                    sequence_id=f"{ident}_{motion}",
                    identity=ident,
                    kind=kind,
                    shape_params=params,
                    deformation=motion,
                    amplitude=amplitudes[motion],
                    n_frames=n_frames,
                    seed=seed,
                )
            )
    return specs


# ---------------------------------------------------------------------------
# dataset on disk


@dataclass
class SequenceRecord:
    sequence_id: str
    identity: str
    n_frames: int
    frame_files: list
    cache_files: dict = field(default_factory=dict)


class SequenceDataset:
    """Mesh sequences plus cached training samples, backed by a JSON manifest."""

    def __init__(self, root, sequences, normalization=None):
        self.root = os.fspath(root)
        self.sequences = list(sequences)
        self.normalization = normalization or {"center": [0.0, 0.0, 0.0], "scale": 1.0}
        self._mesh_cache = {}
        self._sample_cache = {}

    @property
    def sequence_ids(self):
        return [s.sequence_id for s in self.sequences]

    def record(self, sequence_id) -> SequenceRecord:
        for s in self.sequences:
            if s.sequence_id == sequence_id:
                return s
        raise DatagenError(f"unknown sequence {sequence_id!r}")

    def frame_mesh(self, sequence_id, frame) -> TriMesh:
        key = (sequence_id, frame)
        if key not in self._mesh_cache:
            rec = self.record(sequence_id)
            path = os.path.join(self.root, rec.frame_files[frame])
            self._mesh_cache[key] = geometry.load_obj(path, f"{sequence_id}/frame{frame}")
        return self._mesh_cache[key]

    def canonical_mesh(self, sequence_id) -> TriMesh:
        return self.frame_mesh(sequence_id, 0)

    def samples(self, sequence_id):
        """Cached training samples written by prepare_training_samples."""
        if sequence_id not in self._sample_cache:
            rec = self.record(sequence_id)
            if "samples" not in rec.cache_files:
                raise DatagenError(
                    f"sequence {sequence_id!r} has no sample cache; run prepare first"
                )
            arrays, meta = read_container(os.path.join(self.root, rec.cache_files["samples"]))
            sdf = geometry.SdfSampleSet(
                arrays["sdf/points"].astype(np.float64),
                arrays["sdf/distances"].astype(np.float64),
                arrays["sdf/tags"].astype(np.int64),
            )
            corr = geometry.CorrespondenceSet(
                arrays["corr/triangle_index"].astype(np.int64),
                arrays["corr/barycentric"].astype(np.float64),
                arrays["corr/normal_noise"].astype(np.float64),
                arrays["corr/canonical_positions"].astype(np.float64),
                int(meta["n_triangles"]),
            )
            positions = [
                arrays[f"positions/frame_{t:03d}"].astype(np.float64)
                for t in range(rec.n_frames)
            ]
            self._sample_cache[sequence_id] = {"sdf": sdf, "corr": corr, "positions": positions}
        return self._sample_cache[sequence_id]

    def flows(self, sequence_id, frame):
        """Ground-truth flow vectors from canonical to `frame` at the correspondences."""
        cache = self.samples(sequence_id)
        return cache["positions"][frame] - cache["corr"].canonical_positions

    def subset(self, sequence_ids):
        keep = set(sequence_ids)
        return SequenceDataset(
            self.root,
            [s for s in self.sequences if s.sequence_id in keep],
            self.normalization,
        )

    def manifest_dict(self):
        return {
            "version": MANIFEST_VERSION,
            "sequences": [dataclasses.asdict(s) for s in self.sequences],
            "normalization": self.normalization,
        }

    def save_manifest(self, path=None):
        path = path or os.path.join(self.root, "manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.manifest_dict(), fh, indent=1, sort_keys=True)
        os.replace(tmp, path)
        return path


def generate_dataset(specs, out_dir) -> SequenceDataset:
    """Write OBJ frames plus a manifest; deterministic for identical specs."""
    if not specs:
        raise DatagenError("specs must be non-empty")
    os.makedirs(out_dir, exist_ok=True)
    identity_meshes = {}
    records = []
    for spec in specs:
        if spec.identity not in identity_meshes:
            identity_meshes[spec.identity] = build_identity_mesh(spec)
        canonical = identity_meshes[spec.identity]
        deform = analytic_deformation(spec, canonical)
        seq_dir = os.path.join("sequences", spec.sequence_id)
        os.makedirs(os.path.join(out_dir, seq_dir), exist_ok=True)
        frame_files = []
        for t in range(spec.n_frames):
            verts = deform(canonical.vertices, t)
            if np.abs(verts).max() > 1.0:
                raise DatagenError(
                    f"{spec.sequence_id}: frame {t} leaves the unit box "
                    f"(max coord {np.abs(verts).max():.3f}); reduce amplitude"
                )
            rel = os.path.join(seq_dir, f"frame_{t:03d}.obj")
            geometry.save_obj(canonical.with_vertices(verts), os.path.join(out_dir, rel))
            frame_files.append(rel)
        records.append(
            SequenceRecord(spec.sequence_id, spec.identity, spec.n_frames, frame_files)
        )
    dataset = SequenceDataset(out_dir, records)
    dataset.save_manifest()
    return dataset


def load_dataset(manifest_path) -> SequenceDataset:
    manifest_path = os.fspath(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatagenError(f"{manifest_path}: unsupported manifest version")
    root = os.path.dirname(manifest_path)
    records = []
    missing = []
    for entry in manifest["sequences"]:
        rec = SequenceRecord(
            entry["sequence_id"],
            entry["identity"],
            entry["n_frames"],
            entry["frame_files"],
            entry.get("cache_files", {}),
        )
        for f in rec.frame_files:
            if not os.path.exists(os.path.join(root, f)):
                missing.append(f)
        records.append(rec)
    if missing:
        raise DatagenError(f"missing frame files: {missing}")
    return SequenceDataset(root, records, manifest.get("normalization"))


# ---------------------------------------------------------------------------
# training-sample preparation


@dataclass
class PrepConfig:
    """Desk-scale defaults; paper-scale is 50k/150k SDF and 200k correspondences."""

    n_uniform: int = 5_000
    n_near: int = 15_000
    band: float = 0.02
    n_corr: int = 20_000
    noise_sigma: float = 0.002
    noise_fraction: float = 0.5
    seed: int = 0


def _prep_input_hash(dataset, rec, config):
    h = hashlib.sha256()
    h.update(json.dumps(dataclasses.asdict(config), sort_keys=True).encode())
    for f in rec.frame_files:
        with open(os.path.join(dataset.root, f), "rb") as fh:
            h.update(hashlib.sha256(fh.read()).digest())
    return h.hexdigest()


def prepare_training_samples(dataset: SequenceDataset, config: PrepConfig | None = None):
    """Cache SDF samples (frame 0) and per-frame correspondence targets.

    Idempotent: a sequence whose inputs are unchanged since the last run is
    skipped. Returns the dataset with refreshed cache handles.
    """
    config = config or PrepConfig()
    for idx, rec in enumerate(dataset.sequences):
        cache_rel = os.path.join("caches", f"{rec.sequence_id}.samples.ckpt")
        cache_path = os.path.join(dataset.root, cache_rel)
        input_hash = _prep_input_hash(dataset, rec, config)
        if os.path.exists(cache_path):
            try:
                _, meta = read_container(cache_path)
                if meta.get("input_hash") == input_hash:
                    rec.cache_files["samples"] = cache_rel
                    continue
            except Exception:
                pass  # corrupt cache: rebuild
        canonical = dataset.canonical_mesh(rec.sequence_id)
        seq_seed = config.seed * 100003 + idx
        sdf = geometry.sample_sdf(
            canonical,
            n_uniform=config.n_uniform,
            n_near=config.n_near,
            band=config.band,
            seed=seq_seed,
        )
        corr = geometry.sample_correspondences(
            canonical,
            n=config.n_corr,
            noise_sigma=config.noise_sigma,
            noise_fraction=config.noise_fraction,
            seed=seq_seed + 1,
        )
        arrays = {
            "sdf/points": sdf.points,
            "sdf/distances": sdf.distances,
            "sdf/tags": sdf.split_tag,
            "corr/triangle_index": corr.triangle_index,
            "corr/barycentric": corr.barycentric_weights,
            "corr/normal_noise": corr.normal_noise,
            "corr/canonical_positions": corr.canonical_positions,
        }
        for t in range(rec.n_frames):
            frame = dataset.frame_mesh(rec.sequence_id, t)
            arrays[f"positions/frame_{t:03d}"] = geometry.evaluate_correspondences(corr, frame)
        write_container(
            cache_path,
            arrays,
            metadata={
                "sequence": rec.sequence_id,
                "input_hash": input_hash,
                "n_triangles": canonical.n_triangles,
                "n_frames": rec.n_frames,
            },
        )
        rec.cache_files["samples"] = cache_rel
        dataset._sample_cache.pop(rec.sequence_id, None)
    dataset.save_manifest()
    return dataset


def split_dataset(dataset, fractions=(0.75, 0.05, 0.20), seed=0, held_out_identities=None):
    """Deterministic by-sequence split; held-out identities go wholly to test."""
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise DatagenError("fractions must be three values summing to 1")
    rng = np.random.default_rng(seed)
    ids = list(dataset.sequence_ids)
    if held_out_identities:
        held = set(held_out_identities)
        test_ids = [s.sequence_id for s in dataset.sequences if s.identity in held]
        rest = [i for i in ids if i not in set(test_ids)]
        order = [rest[i] for i in rng.permutation(len(rest))]
        n_val = int(round(len(order) * fractions[1] / (fractions[0] + fractions[1])))
        val_ids = order[:n_val]
        train_ids = order[n_val:]
    else:
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_train = int(round(len(order) * fractions[0]))
        n_val = int(round(len(order) * fractions[1]))
        train_ids = order[:n_train]
        val_ids = order[n_train : n_train + n_val]
        test_ids = order[n_train + n_val :]
    return dataset.subset(train_ids), dataset.subset(val_ids), dataset.subset(test_ids)
