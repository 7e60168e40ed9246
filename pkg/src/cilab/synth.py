"""Procedural instance datasets: rotated glyphs on a pose grid.

Each instance is a latent vector that parameterises an oriented rectangle
plus three keypoint dots.  A view renders the glyph rotated to one azimuth of
the pose grid (and optionally foreshortened for an elevation), then adds
pixel noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, PersistenceError
from .retrieval import RetrievalSplit
from .stream import InstanceDataset

LATENT_DIM = 10
DATA_FORMAT = 1
_LE = np.dtype("<f8")
_BACKGROUND = 0.1
_EDGE = 0.05
_DOT_RADIUS = 0.12


@dataclass(frozen=True)
class GenConfig:
    num_instances: int = 20
    views_per_instance: int = 12
    pose_grid: int = 12
    elevations: int = 1
    image_size: int = 16
    noise_sigma: float = 0.05
    instance_separation: float = 1.0
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 10.0
    frontal_only: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_instances < 1:
            raise ConfigError("num_instances must be >= 1")
        if self.views_per_instance < 2:
            raise ConfigError("views_per_instance must be >= 2")
        if self.pose_grid < 1 or self.elevations < 1:
            raise ConfigError("pose_grid and elevations must be >= 1")
        if self.image_size < 4:
            raise ConfigError("image_size must be >= 4")
        if self.noise_sigma < 0 or self.instance_separation <= 0:
            raise ConfigError("noise_sigma must be >= 0 and instance_separation > 0")
        if not 0 <= self.outlier_fraction < 0.5:
            raise ConfigError(f"outlier_fraction must lie in [0, 0.5), got {self.outlier_fraction}")
        if self.views_per_instance > len(self.poses()):
            raise ConfigError(
                f"views_per_instance={self.views_per_instance} exceeds {len(self.poses())} available poses"
            )

    def poses(self) -> list[tuple[float, int]]:
        """(azimuth degrees, elevation index) for every pose on the grid."""
        out = []
        for e in range(self.elevations):
            for k in range(self.pose_grid):
                az = k * 360.0 / self.pose_grid
                if self.frontal_only and min(az, 360.0 - az) > 30.0 + 1e-9:
                    continue
                out.append((az, e))
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def frontal_preset(**overrides) -> GenConfig:
    """Views restricted to +-30 degrees around the front, on a 24-step grid."""
    base = dict(pose_grid=24, views_per_instance=5, frontal_only=True)
    base.update(overrides)
    return GenConfig(**base)


def render(latent: np.ndarray, azimuth_deg: float, elevation: int, size: int) -> np.ndarray:
    """Noise-free grayscale render in [0, 1], shape ``(size, size)``."""
    z = np.asarray(latent, dtype=np.float64)
    half_len = 0.3 + 0.06 * (abs(z[0]) + abs(z[1]) + abs(z[2]))
    half_wid = 0.15 + 0.04 * (abs(z[1]) + abs(z[3]) + abs(z[9]))
    rect_level = 0.5 + 0.4 * np.tanh(abs(z[2]) + abs(z[3]) - 1.0)
    dot_level = 0.55 + 0.4 * np.tanh(z[9])
    dots = [(0.6 * np.tanh(z[4 + 2 * k]), 0.6 * np.tanh(z[5 + 2 * k])) for k in range(3)]

    coords = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    y, x = np.meshgrid(-coords, coords, indexing="ij")
    th = np.deg2rad(azimuth_deg)
    c, s = np.cos(th), np.sin(th)
    u = c * x + s * y
    v = (-s * x + c * y) / (1.0 - 0.15 * elevation)

    rect = _sigmoid((half_len - np.abs(u)) / _EDGE) * _sigmoid((half_wid - np.abs(v)) / _EDGE)
    img = _BACKGROUND + (rect_level - _BACKGROUND) * rect
    for px, py in dots:
        blob = np.exp(-((u - px) ** 2 + (v - py) ** 2) / (2 * _DOT_RADIUS**2))
        img = img + (dot_level - img) * blob
    return np.clip(img, 0.0, 1.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _render_views(latent, pose_ids, poses, size, sigma, rng) -> np.ndarray:
    out = np.empty((len(pose_ids), 1, size, size))
    for i, pid in enumerate(pose_ids):
        az, el = poses[pid]
        img = render(latent, az, el, size)
        if sigma > 0:
            img = np.clip(img + rng.normal(0.0, sigma, img.shape), 0.0, 1.0)
        out[i, 0] = img
    return out


def generate(cfg: GenConfig) -> InstanceDataset:
    """Render ``num_instances x views_per_instance`` images; a pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    poses = cfg.poses()
    latents = {i: rng.normal(0.0, cfg.instance_separation, LATENT_DIM) for i in range(cfg.num_instances)}
    images, iids, vids = [], [], []
    for i in range(cfg.num_instances):
        if cfg.views_per_instance == len(poses):
            pose_ids = np.arange(len(poses))
        else:
            pose_ids = np.sort(rng.choice(len(poses), size=cfg.views_per_instance, replace=False))
        images.append(_render_views(latents[i], pose_ids, poses, cfg.image_size, cfg.noise_sigma, rng))
        iids += [i] * len(pose_ids)
        vids += [int(p) for p in pose_ids]
    ds = InstanceDataset(np.concatenate(images), iids, vids, latents, {"gen": cfg.to_dict(), "outliers": []})
    if cfg.outlier_fraction > 0:
        ds = inject_outliers(ds, cfg.outlier_fraction, cfg.outlier_magnitude, cfg.seed + 1)
    return ds


def inject_outliers(ds: InstanceDataset, fraction: float, magnitude: float = 10.0, seed: int = 0) -> InstanceDataset:
    """Re-render a seeded subset of instances with latents scaled by ``magnitude``."""
    if not 0 <= fraction < 0.5:
        raise ConfigError(f"outlier fraction must lie in [0, 0.5), got {fraction}")
    if ds.latents is None or "gen" not in ds.meta:
        raise ConfigError("outlier injection needs a generated dataset with latents")
    instances = ds.instances
    count = int(round(fraction * len(instances)))
    if count == 0:
        return ds
    cfg = GenConfig.from_dict(ds.meta["gen"])
    poses = cfg.poses()
    rng = np.random.default_rng(seed)
    chosen = sorted(int(i) for i in rng.choice(instances, size=count, replace=False))
    images = ds.images.copy()
    latents = dict(ds.latents)
    for iid in chosen:
        latents[iid] = ds.latents[iid] * magnitude
        rows = ds.indices_of(iid)
        images[rows] = _render_views(latents[iid], ds.view_ids[rows], poses, cfg.image_size, cfg.noise_sigma, rng)
    meta = dict(ds.meta)
    meta["outliers"] = sorted(set(meta.get("outliers", [])) | set(chosen))
    return InstanceDataset(images, ds.instance_ids.copy(), ds.view_ids.copy(), latents, meta)


def make_retrieval_split(ds: InstanceDataset, queries_per_instance: int, seed: int = 0) -> RetrievalSplit:
    """Per instance, ``queries_per_instance`` random views become queries, the rest gallery."""
    if queries_per_instance < 1:
        raise ConfigError("queries_per_instance must be >= 1")
    rng = np.random.default_rng(seed)
    q_rows, g_rows = [], []
    for iid in ds.instances:
        rows = ds.indices_of(iid)
        if len(rows) <= queries_per_instance:
            raise ConfigError(
                f"instance {iid} has {len(rows)} views; need more than queries_per_instance={queries_per_instance}"
            )
        perm = rng.permutation(rows)
        q_rows += sorted(perm[:queries_per_instance].tolist())
        g_rows += sorted(perm[queries_per_instance:].tolist())
    q_rows, g_rows = np.asarray(q_rows), np.asarray(g_rows)
    return RetrievalSplit(ds.images[q_rows], ds.instance_ids[q_rows], ds.images[g_rows], ds.instance_ids[g_rows],
                          q_rows, g_rows)


# ---------------------------------------------------------------------------
# persistence: JSON manifest + little-endian float64 pixel blob


def _write(path: Path, manifest: dict, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest["blob"] = path.with_suffix(".bin").name
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(pixels).astype(_LE).tobytes())
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read(path: Path, kind: str) -> tuple[dict, np.ndarray]:
    try:
        manifest = json.loads(Path(path).read_text())
        raw = (Path(path).parent / manifest["blob"]).read_bytes()
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise PersistenceError(f"cannot read {kind} at {path}: {exc}") from exc
    if manifest.get("kind") != kind or manifest.get("format_version") != DATA_FORMAT:
        raise PersistenceError(f"{path} is not a {kind} manifest (format {DATA_FORMAT})")
    if len(raw) % 8:
        raise PersistenceError(f"{path}: blob length is not a multiple of 8")
    return manifest, np.frombuffer(raw, dtype=_LE).astype(np.float64)


def save_dataset(ds: InstanceDataset, path) -> None:
    manifest = {
        "format_version": DATA_FORMAT,
        "kind": "dataset",
        "image_shape": list(ds.images.shape[1:]),
        "samples": [[int(i), int(v)] for i, v in zip(ds.instance_ids, ds.view_ids)],
        "latents": None if ds.latents is None else {str(k): v.tolist() for k, v in ds.latents.items()},
        "meta": ds.meta,
    }
    _write(Path(path), manifest, ds.images)


def load_dataset(path) -> InstanceDataset:
    manifest, pixels = _read(Path(path), "dataset")
    try:
        shape = tuple(manifest["image_shape"])
        samples = np.asarray(manifest["samples"], dtype=np.int64).reshape(-1, 2)
        images = pixels.reshape((len(samples),) + shape)
        latents = manifest.get("latents")
        if latents is not None:
            latents = {int(k): np.asarray(v) for k, v in latents.items()}
        return InstanceDataset(images, samples[:, 0], samples[:, 1], latents, manifest.get("meta", {}))
    except (KeyError, ValueError, ConfigError) as exc:
        raise PersistenceError(f"corrupt dataset manifest {path}: {exc}") from exc


def save_split(split: RetrievalSplit, path) -> None:
    manifest = {
        "format_version": DATA_FORMAT,
        "kind": "split",
        "image_shape": list(split.query_images.shape[1:]),
        "query_ids": split.query_ids.tolist(),
        "gallery_ids": split.gallery_ids.tolist(),
        "query_samples": None if split.query_sample_ids is None else np.asarray(split.query_sample_ids).tolist(),
        "gallery_samples": None if split.gallery_sample_ids is None else np.asarray(split.gallery_sample_ids).tolist(),
    }
    _write(Path(path), manifest, np.concatenate([split.query_images, split.gallery_images]))


def load_split(path) -> RetrievalSplit:
    manifest, pixels = _read(Path(path), "split")
    try:
        shape = tuple(manifest["image_shape"])
        nq, ng = len(manifest["query_ids"]), len(manifest["gallery_ids"])
        images = pixels.reshape((nq + ng,) + shape)
        qs, gs = manifest.get("query_samples"), manifest.get("gallery_samples")
        return RetrievalSplit(images[:nq], manifest["query_ids"], images[nq:], manifest["gallery_ids"],
                              None if qs is None else np.asarray(qs), None if gs is None else np.asarray(gs))
    except (KeyError, ValueError) as exc:
        raise PersistenceError(f"corrupt split manifest {path}: {exc}") from exc
