"""Training objective, optimisation loop and evaluation metrics.

The objective is ``alpha * colour + beta * depth + gamma * eikonal + delta * mesh``
where the mesh-prior weight drops to zero at a cutoff iteration. All sums
are taken as means so learning rates do not depend on batch sizes.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .fields import FD_STEP, FieldConfig, SceneModel, sample_gradient
from .geometry import TriangleMesh
from .nn import DTYPE, AdamState, adam_step, load_checkpoint, save_checkpoint
from .pipeline.io import to_uint8, write_json
from .renderer import Camera, RenderConfig, frame_rays, render_frame, render_rays, sphere_bounds
from .spectral import KINDS, PositionalEmbedding

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "total", "color", "depth", "eikonal", "mesh", "delta_active")
PSNR_CAP = 99.0
NEAR_SURFACE_STD = 0.05
CUTOFF_RATIO = 10_000 / 90_000


class NumericError(RuntimeError):
    """Raised when the training objective becomes non-finite."""


# --- configuration -------------------------------------------------------

@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1
    delta: float = 1.0
    mesh_prior_cutoff: int = 10_000

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "mesh_prior_cutoff"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    def delta_at(self, iteration: int) -> float:
        return self.delta if iteration < self.mesh_prior_cutoff else 0.0


@dataclass
class TrainConfig:
    iterations: int = 90_000
    rays_per_batch: int = 512
    samples_per_ray: int = 128
    eikonal_samples: int = 512
    mesh_samples: int = 512
    augment_p: float = 0.3
    seed: int = 0
    embedding_kind: str = "laplacian"
    embedding_k: int = 256
    lr: float = 5e-4
    sharpness_lr_scale: float = 1.0
    grad_clip: float = 1.0  # global L2 norm; 0 disables
    checkpoint_every: int = 5000
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1
    delta: float = 1.0
    mesh_prior_cutoff: int | None = None  # None: scale with iterations
    feature_dim: int = 256
    bg_width: int = 256
    bg_layers: int = 8
    res_width: int = 768
    res_layers: int = 8
    feat_width: int = 256
    feat_layers: int = 4
    dec_width: int = 256
    dec_layers: int = 4
    skip_layer: int = 4
    sharpness_std: float = 0.3  # initial logistic std of the render density
    eval_samples: int = 128

    def __post_init__(self):
        if not 0.0 <= self.augment_p <= 1.0:
            raise ValueError(f"augment_p must lie in [0, 1], got {self.augment_p}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.embedding_kind not in KINDS:
            raise ValueError(f"unknown embedding kind {self.embedding_kind!r}; expected one of {KINDS}")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if self.rays_per_batch < 1 or self.samples_per_ray < 2:
            raise ValueError("need at least 1 ray and 2 samples per ray")
        _ = self.weights  # validates the weights

    @property
    def cutoff(self) -> int:
        if self.mesh_prior_cutoff is not None:
            return self.mesh_prior_cutoff
        return round(self.iterations * CUTOFF_RATIO)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.delta, self.cutoff)

    def field_config(self) -> FieldConfig:
        names = {f.name for f in dataclasses.fields(FieldConfig)}
        return FieldConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        try:
            base = PROFILES[name]
        except KeyError:
            raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None
        return cls(**{**base, **overrides})

    @classmethod
    def from_strings(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Apply ``key = value`` strings on top of ``base`` with per-field type conversion."""
        current = dataclasses.asdict(base or cls())
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            current[key] = _convert(key, raw, types[key])
        return cls(**current)


def _convert(key: str, raw: str, annotation: str):
    text = raw.strip()
    try:
        if annotation.startswith("int") and "None" in annotation and text.lower() in ("none", ""):
            return None
        if annotation.startswith("int"):
            return int(text)
        if annotation == "float":
            return float(text)
    except ValueError:
        raise ValueError(f"option {key}: cannot parse {raw!r} as {annotation}") from None
    return text


PROFILES = {
    "paper": {},
    "desk": dict(
        iterations=2000, rays_per_batch=256, samples_per_ray=48, eikonal_samples=128, mesh_samples=128,
        embedding_k=32, lr=2e-3, sharpness_lr_scale=10.0, checkpoint_every=500, feature_dim=32,
        bg_width=64, bg_layers=6, res_width=64, res_layers=4, feat_width=64, feat_layers=3,
        dec_width=64, dec_layers=3, skip_layer=3, sharpness_std=0.1, eval_samples=96,
    ),
    "tiny": dict(
        iterations=20, rays_per_batch=4, samples_per_ray=8, eikonal_samples=8, mesh_samples=8,
        embedding_k=8, lr=1e-3, checkpoint_every=10, feature_dim=8, bg_width=16, bg_layers=4,
        res_width=16, res_layers=3, feat_width=16, feat_layers=2, dec_width=16, dec_layers=2,
        skip_layer=2, eval_samples=16,
    ),
}


# --- data ----------------------------------------------------------------

@dataclass
class Frame:
    name: str
    camera: Camera
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) distance along the ray, 0 = invalid
    pose: np.ndarray   # world_from_template, 4x4


@dataclass
class CaptureDataset:
    mesh: TriangleMesh
    frames: list[Frame]

    def __post_init__(self):
        if not self.frames:
            raise ValueError("dataset has no frames")
        for f in self.frames:
            shape = (f.camera.height, f.camera.width)
            if f.color.shape != shape + (3,) or f.depth.shape != shape:
                raise ValueError(f"frame {f.name}: image size does not match its camera {shape}")
            if not np.all(np.isfinite(f.depth)) or np.any(f.depth < 0):
                raise ValueError(f"frame {f.name}: depth must be finite and nonnegative")
            check_rigid(f.pose, f.name)

    def pose_table(self) -> tuple[list[np.ndarray], np.ndarray]:
        """Distinct poses and, per frame, the index of its pose."""
        keys: dict[bytes, int] = {}
        poses = []
        ids = []
        for f in self.frames:
            k = np.asarray(f.pose, dtype=np.float64).tobytes()
            if k not in keys:
                keys[k] = len(poses)
                poses.append(np.asarray(f.pose, dtype=np.float64))
            ids.append(keys[k])
        return poses, np.array(ids)


def check_rigid(pose: np.ndarray, name: str = "pose", tol: float = 1e-6):
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"{name}: pose must be 4x4")
    R = pose[:3, :3]
    if np.abs(R.T @ R - np.eye(3)).max() > tol or np.linalg.det(R) < 0:
        raise ValueError(f"{name}: pose rotation is not orthonormal")
    if np.abs(pose[3] - [0, 0, 0, 1]).max() > tol:
        raise ValueError(f"{name}: pose bottom row must be 0 0 0 1")


@dataclass
class RaySet:
    """Every scene-sphere-hitting pixel ray of a dataset, flattened."""

    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    rgb: np.ndarray
    depth: np.ndarray
    pose_id: np.ndarray
    poses: list

    @classmethod
    def from_dataset(cls, data: CaptureDataset) -> "RaySet":
        poses, ids = data.pose_table()
        parts = []
        for f, pid in zip(data.frames, ids):
            o, d = frame_rays(f.camera)
            near, far, hit = sphere_bounds(o, d)
            parts.append((o[hit], d[hit], near[hit], far[hit], f.color.reshape(-1, 3)[hit],
                          f.depth.ravel()[hit], np.full(hit.sum(), pid)))
        cols = [np.concatenate(c) for c in zip(*parts)]
        return cls(*cols, poses=poses)

    def __len__(self) -> int:
        return len(self.origins)


# --- losses --------------------------------------------------------------

def color_loss(predicted, observed) -> torch.Tensor:
    predicted = torch.as_tensor(predicted, dtype=DTYPE)
    observed = torch.as_tensor(observed, dtype=DTYPE)
    if predicted.shape != observed.shape:
        raise ValueError(f"colour batch shapes differ: {tuple(predicted.shape)} vs {tuple(observed.shape)}")
    return (predicted - observed).abs().mean()


def backproject(origins: np.ndarray, dirs: np.ndarray, depth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Surface points of valid (positive) depths and the mask of those depths."""
    valid = depth > 0
    return origins[valid] + depth[valid, None] * dirs[valid], valid


def depth_loss(scene, origins, dirs, depth, pose_id=None, poses=None) -> torch.Tensor:
    """Mean |S| at back-projected depth pixels; zero with a warning if none are valid."""
    pts, valid = backproject(np.asarray(origins), np.asarray(dirs), np.asarray(depth))
    if not valid.any():
        log.warning("depth loss: no valid depth pixels")
        return torch.zeros((), dtype=DTYPE)
    if pose_id is None:
        return scene.sdf(pts).abs().mean()
    pid = np.asarray(pose_id)[valid]
    total = torch.zeros((), dtype=DTYPE)
    for k in np.unique(pid):
        sel = pid == k
        total = total + scene.sdf(pts[sel], pose=poses[k]).abs().sum()
    return total / len(pts)


def uniform_ball(rng: np.random.Generator, n: int, radius: float = 1.0) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius * rng.random(n) ** (1 / 3))[:, None]


def eikonal_loss(scene, sample_count: int, seed, pose=None, h: float = FD_STEP) -> torch.Tensor:
    if sample_count < 1:
        raise ValueError("eikonal sample count must be >= 1")
    rng = np.random.default_rng(seed)
    pts = uniform_ball(rng, sample_count, 1.0 - 2 * h)  # keep the stencil inside the bound
    grad = sample_gradient(scene, pts, pose, h)
    return ((grad.norm(dim=1) - 1.0) ** 2).mean()


def surface_samples(mesh: TriangleMesh, rng: np.random.Generator, n: int, std: float = NEAR_SURFACE_STD):
    """Area-weighted surface points pushed along the face normal by N(0, std)."""
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    tri = mesh.nodes[mesh.faces[face]]
    p = np.einsum("ni,nij->nj", bary, tri)
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return p + rng.normal(scale=std, size=(n, 1)) * nrm


def mesh_loss(model: SceneModel, sample_count: int, seed) -> torch.Tensor:
    """Mean |S_o - sdf_M| in the template frame, half near the surface and half in the unit ball."""
    rng = np.random.default_rng(seed)
    n_near = sample_count // 2
    pts = np.concatenate([
        surface_samples(model.posed.template, rng, n_near),
        uniform_ball(rng, sample_count - n_near),
    ])
    sdf_o, _, sdf_m = model.object_branch(pts, None, with_feature=False)
    return (sdf_o - sdf_m).abs().mean()


def augment_view(v, p: float, seed) -> np.ndarray:
    """With probability ``p`` replace each unit view direction by a uniform random one."""
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(-1, 3)
    rng = np.random.default_rng(seed)
    replace = rng.random(len(flat)) < p
    rand = rng.normal(size=(len(flat), 3))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return np.where(replace[:, None], rand, flat).reshape(v.shape)


# --- objective -----------------------------------------------------------

@dataclass
class Batch:
    index: np.ndarray
    offsets: np.ndarray
    views: np.ndarray
    eikonal_seed: int
    mesh_seed: int
    eikonal_pose: int


def draw_batch(rays: RaySet, config: TrainConfig, iteration: int) -> Batch:
    """All randomness of one iteration, derived from ``(seed, iteration)`` alone."""
    rng = np.random.default_rng([config.seed, iteration])
    idx = np.sort(rng.choice(len(rays), size=min(config.rays_per_batch, len(rays)), replace=False))
    offsets = rng.random((len(idx), config.samples_per_ray))
    views = augment_view(rays.dirs[idx], config.augment_p, rng.integers(2**63))
    eik_seed, mesh_seed = (int(s) for s in rng.integers(2**63, size=2))
    eik_pose = int(rays.pose_id[idx[rng.integers(len(idx))]])
    return Batch(idx, offsets, views, eik_seed, mesh_seed, eik_pose)


def objective(model: SceneModel, rays: RaySet, config: TrainConfig, iteration: int, batch: Batch | None = None):
    """``(total, terms)``; terms hold the weighted contributions, summing to ``total``."""
    b = batch or draw_batch(rays, config, iteration)
    w = config.weights
    idx = b.index
    pid = rays.pose_id[idx]
    zero = torch.zeros((), dtype=DTYPE)
    terms = {"color": zero}
    if w.alpha > 0:
        pred = torch.zeros(len(idx), 3, dtype=DTYPE)
        for k in np.unique(pid):
            sel = np.flatnonzero(pid == k)
            r = idx[sel]
            out = render_rays(
                model, rays.origins[r], rays.dirs[r], rays.near[r], rays.far[r], config.samples_per_ray,
                b.offsets[sel], pose=rays.poses[k], view=b.views[sel],
            )
            pred = pred.index_put((torch.as_tensor(sel),), out.color)
        terms["color"] = w.alpha * color_loss(pred, rays.rgb[idx])
    terms["depth"] = (
        w.beta * depth_loss(model, rays.origins[idx], rays.dirs[idx], rays.depth[idx], pid, rays.poses)
        if w.beta > 0 else zero
    )
    terms["eikonal"] = (
        w.gamma * eikonal_loss(model, config.eikonal_samples, b.eikonal_seed, rays.poses[b.eikonal_pose])
        if w.gamma > 0 else zero
    )
    delta = w.delta_at(iteration)
    terms["mesh"] = delta * mesh_loss(model, config.mesh_samples, b.mesh_seed) if delta > 0 else zero
    total = terms["color"] + terms["depth"] + terms["eikonal"] + terms["mesh"]
    return total, terms


# --- model construction & checkpoints -----------------------------------

def build_model(mesh: TriangleMesh, embedding: PositionalEmbedding, config: TrainConfig) -> SceneModel:
    return SceneModel(mesh, embedding, config.field_config())


def model_parameters(model: SceneModel) -> dict:
    return dict(model.named_parameters())


def save_model(path, model: SceneModel, config: TrainConfig, iteration: int, adam: AdamState | None = None,
               embedding_seed: int = 0, extra_meta: dict | None = None):
    """Self-contained checkpoint: weights, codes, template mesh and both configs."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors["mesh.nodes"] = model.posed.template.nodes
    tensors["mesh.faces"] = model.posed.template.faces.astype(np.float64)
    meta = {
        "iteration": iteration,
        "train_config": config.to_dict(),
        "field_config": dataclasses.asdict(model.config),
        "embedding_kind": model.embedding_kind,
        "embedding_seed": embedding_seed,
        **(extra_meta or {}),
    }
    save_checkpoint(path, tensors, meta, adam)


def load_model(path) -> tuple[SceneModel, dict, AdamState | None]:
    tensors, meta, adam = load_checkpoint(path)
    try:
        mesh = TriangleMesh(tensors["mesh.nodes"], tensors["mesh.faces"].astype(np.int64))
        codes = tensors["model.codes"]
    except KeyError as e:
        raise ValueError(f"{path}: checkpoint lacks {e.args[0]}") from None
    emb = PositionalEmbedding(kind=meta["embedding_kind"], X=codes, seed=meta.get("embedding_seed", 0))
    model = SceneModel(mesh, emb, FieldConfig(**meta["field_config"]))
    state = {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model, meta, adam


# --- training loop -------------------------------------------------------

@dataclass
class TrainResult:
    trace: list[dict]
    checkpoint: Path | None
    iterations: int


def _new_adam(model: SceneModel, config: TrainConfig) -> AdamState:
    return AdamState(lr=config.lr, lr_scale={"log_sharpness": config.sharpness_lr_scale})


def _dump_batch(path: Path, rays: RaySet, batch: Batch, iteration: int, terms: dict):
    idx = batch.index
    np.savez(
        path, iteration=iteration, origins=rays.origins[idx], dirs=rays.dirs[idx], near=rays.near[idx],
        far=rays.far[idx], rgb=rays.rgb[idx], depth=rays.depth[idx], pose_id=rays.pose_id[idx],
        offsets=batch.offsets, views=batch.views,
        **{f"term_{k}": v.item() for k, v in terms.items()},
    )


def train(
    model: SceneModel,
    data: CaptureDataset,
    config: TrainConfig,
    out_dir=None,
    resume=None,
    embedding_seed: int = 0,
    progress=None,
) -> TrainResult:
    """Optimise ``model`` in place. Writes checkpoints and the loss trace into ``out_dir`` if given."""
    rays = RaySet.from_dataset(data)
    out = Path(out_dir) if out_dir is not None else None
    adam = _new_adam(model, config)
    start = 0
    if resume is not None:
        loaded, meta, loaded_adam = load_model(resume)
        model.load_state_dict(loaded.state_dict())
        adam = loaded_adam or adam
        start = int(meta["iteration"])
    params = model_parameters(model)

    trace: list[dict] = []
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_trace_meta(out, config)
        fh, writer = _open_trace(out / "trace.csv", start)
    ckpt = None
    try:
        for it in range(start, config.iterations):
            batch = draw_batch(rays, config, it)
            total, terms = objective(model, rays, config, it, batch)
            if not torch.isfinite(total):
                dump = (out or Path(".")) / f"nonfinite_{it}.npz"
                _dump_batch(dump, rays, batch, it, terms)
                raise NumericError(f"non-finite loss at iteration {it}; batch dumped to {dump}")
            model.zero_grad(set_to_none=True)
            total.backward()
            if config.grad_clip > 0:
                # a stencil straddling the medial axis can yield one enormous eikonal sample
                torch.nn.utils.clip_grad_norm_(list(params.values()), config.grad_clip)
            adam_step(adam, params)
            row = {"iteration": it, "total": total.item(), **{k: v.item() for k, v in terms.items()},
                   "delta_active": int(config.weights.delta_at(it) > 0)}
            trace.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if progress is not None:
                progress(row)
            done = it + 1
            if out is not None and (done % config.checkpoint_every == 0 or done == config.iterations):
                ckpt = out / f"checkpoint_{done:06d}.ckpt"
                save_model(ckpt, model, config, done, adam, embedding_seed)
                save_model(out / "model.ckpt", model, config, done, adam, embedding_seed)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(trace, out / "model.ckpt" if ckpt is not None else None, config.iterations - start)


def _write_trace_meta(out: Path, config: TrainConfig):
    write_json(out / "trace.meta.json", {
        "columns": list(TRACE_COLUMNS),
        "terms": "weighted contributions; total = color + depth + eikonal + mesh",
        "augment_p": config.augment_p,
        "mesh_prior_cutoff": config.cutoff,
        "config": config.to_dict(),
    })


def _open_trace(path: Path, start: int):
    """Open the trace for appending, dropping rows at or after ``start`` (resume)."""
    rows = []
    if start > 0 and path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["iteration"]) < start]
    fh = open(path, "w", newline="")
    writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
    writer.writeheader()
    writer.writerows(rows)
    return fh, writer


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("iteration", "delta_active") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


# --- metrics -------------------------------------------------------------

def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return PSNR_CAP if mse < 1e-10 else min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5: an 11x11 window
SSIM_RADIUS = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)


def ssim(a, b) -> float:
    """Gaussian-window SSIM on the channel-mean grayscale image; border of the window radius excluded."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    win = 2 * SSIM_RADIUS + 1
    if min(a.shape) < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} SSIM window")
    c1, c2 = 0.01**2, 0.03**2

    def blur(x):
        return gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_TRUNCATE)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    r = SSIM_RADIUS
    return float(s[r:-r, r:-r].mean())


def geometric_error(scene, frames: list[Frame], per_frame: bool = False):
    """Mean |S| over back-projected valid depth pixels of ``frames``."""
    values, counts = [], []
    with torch.no_grad():
        for f in frames:
            o, d = frame_rays(f.camera)
            depth = f.depth.ravel()
            n = int((depth > 0).sum())
            values.append(float(depth_loss(scene, o, d, depth, np.zeros(len(depth), int), [f.pose])) if n else 0.0)
            counts.append(n)
    if per_frame:
        return np.array(values)
    if sum(counts) == 0:
        log.warning("geometric error: no valid depth pixels")
        return 0.0
    return float(np.dot(values, counts) / sum(counts))


@dataclass
class Stat:
    mean: float
    std: float

    @classmethod
    def of(cls, xs) -> "Stat":
        xs = np.asarray(xs, dtype=np.float64)
        return cls(float(xs.mean()), float(xs.std()))


@dataclass
class EvalReport:
    psnr: Stat
    ssim: Stat
    geometric_error: Stat
    frames: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not -1.0 <= self.ssim.mean <= 1.0:
            raise ValueError("ssim outside [-1, 1]")
        if self.geometric_error.mean < 0:
            raise ValueError("negative geometric error")

    def to_dict(self) -> dict:
        return {
            "PSNR": dataclasses.asdict(self.psnr),
            "SSIM": dataclasses.asdict(self.ssim),
            "Geom. error": dataclasses.asdict(self.geometric_error),
            "frames": list(self.frames),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(Stat(**d["PSNR"]), Stat(**d["SSIM"]), Stat(**d["Geom. error"]), list(d.get("frames", [])))


def evaluate(scene, frames: list[Frame], render: RenderConfig | None = None) -> EvalReport:
    """Render every frame at its capture pose and compare against the observations."""
    cfg = render or RenderConfig(normals=False)
    ps, ss = [], []
    for f in frames:
        # compare at the 8-bit precision the observations are stored in
        img = to_uint8(render_frame(scene, f.camera, cfg, pose=f.pose).color) / 255.0
        ps.append(psnr(img, f.color))
        ss.append(ssim(img, f.color))
    ge = geometric_error(scene, frames, per_frame=True)
    return EvalReport(Stat.of(ps), Stat.of(ss), Stat.of(ge), [f.name for f in frames])
