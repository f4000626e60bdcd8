"""Pinhole cameras, ray sampling and SDF-driven volume rendering.

Cameras follow the OpenCV convention (x right, y down, z forward) and the
scene is bounded by the unit sphere. Per-sample opacity comes from the
logistic CDF of the scaled signed distance between consecutive samples.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit

from .fields import OBJECT, SCENE_RADIUS, sample_gradient
from .nn import DTYPE

OUTSIDE_BOUND, BACKGROUND_PIXEL, OBJECT_PIXEL = 0, 1, 2
MASK_PALETTE = np.array([0, 128, 255], dtype=np.uint8)
NORMAL_PRUNE = 1e-6


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    camera_from_world: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.camera_from_world, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "camera_from_world", T)
        R = T[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("camera rotation is not orthonormal with determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_from_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.camera_from_world[:3, 3]

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[2].copy()

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points to continuous pixel coordinates (u, v)."""
        pc = np.asarray(points) @ self.rotation.T + self.camera_from_world[:3, 3]
        return np.stack([self.fx * pc[:, 0] / pc[:, 2] + self.cx, self.fy * pc[:, 1] / pc[:, 2] + self.cy], axis=1)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), width=64, height=64, fov_deg=70.0) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ eye
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2, T)

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "camera_from_world": [float(v) for v in self.camera_from_world.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            T = np.array(d["camera_from_world"], dtype=np.float64)
            if T.size != 16:
                raise ValueError(f"camera_from_world needs 16 values, got {T.size}")
            return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                       float(d["cx"]), float(d["cy"]), T.reshape(4, 4))
        except KeyError as e:
            raise ValueError(f"camera is missing field {e.args[0]!r}") from None

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Camera":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (json.JSONDecodeError, TypeError) as e:
            raise ValueError(f"{path}: cannot parse camera ({e})") from None


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    hit: bool


@dataclass
class RenderConfig:
    n_samples: int = 128
    stratified: bool = True
    seed: int = 0
    chunk: int = 1024  # rays per batch
    normals: bool = True


@dataclass
class RenderedFrame:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    accumulated_weight: np.ndarray
    valid: np.ndarray = field(default=None)


def sphere_bounds(origins: np.ndarray, dirs: np.ndarray, radius: float = SCENE_RADIUS):
    """Entry/exit distances of unit-speed rays against a centred sphere, clamped to j >= 0."""
    b = np.einsum("ij,ij->i", origins, dirs)
    c = np.einsum("ij,ij->i", origins, origins) - radius * radius
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = -b + root
    hit = (disc > 0) & (far > near)
    return np.where(hit, near, 0.0), np.where(hit, far, 0.0), hit


def camera_rays(camera: Camera, u: np.ndarray, v: np.ndarray):
    """Unit world-frame directions through continuous pixel coordinates."""
    d = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    d = d @ camera.rotation  # R^T applied to row vectors
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(camera.center, d.shape).copy(), d


def frame_rays(camera: Camera):
    """Row-major rays through every pixel centre."""
    v, u = np.mgrid[0 : camera.height, 0 : camera.width].astype(np.float64)
    return camera_rays(camera, u.ravel() + 0.5, v.ravel() + 0.5)


def ray_through(camera: Camera, u: float, v: float) -> Ray:
    o, d = camera_rays(camera, np.array([float(u)]), np.array([float(v)]))
    near, far, hit = sphere_bounds(o, d)
    return Ray(o[0], d[0], float(near[0]), float(far[0]), bool(hit[0]))


def pixel_ray(camera: Camera, px) -> Ray:
    """Ray through the centre of integer pixel ``(column, row)``."""
    x, y = px
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise ValueError(f"pixel {px} outside {camera.width}x{camera.height}")
    return ray_through(camera, x + 0.5, y + 0.5)


def sample_ray(ray: Ray, n: int, stratified: bool = False, seed=0) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least 2 samples")
    if not ray.hit:
        raise ValueError("ray misses the scene sphere")
    offsets = np.random.default_rng(seed).random(n) if stratified else None
    return _sample_grid(np.array([ray.near]), np.array([ray.far]), n, offsets)[0]


def _sample_grid(near, far, n, offsets=None):
    if offsets is None:
        frac = np.linspace(0.0, 1.0, n)[None, :]
    else:
        frac = (np.arange(n)[None, :] + offsets) / n
    return near[:, None] + (far - near)[:, None] * frac


def render_weights(sdf, sharpness):
    """Discrete weights ``alpha_i * prod_{j<i} (1 - alpha_j)`` along the last axis.

    ``alpha_i = max((Phi(s f_i) - Phi(s f_{i+1})) / Phi(s f_i), 0)`` evaluated as
    ``1 - exp(log Phi(s f_{i+1}) - log Phi(s f_i))``, which stays finite when Phi underflows.
    The last sample has no successor and gets zero weight.
    """
    as_numpy = not isinstance(sdf, torch.Tensor)
    sdf = torch.as_tensor(sdf, dtype=DTYPE)
    if sdf.shape[-1] < 2:
        raise ValueError("need at least 2 samples")
    log_phi = F.logsigmoid(torch.as_tensor(sharpness, dtype=DTYPE) * sdf)
    alpha = (-torch.expm1(log_phi[..., 1:] - log_phi[..., :-1])).clamp(0.0, 1.0)
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha[..., :-1]], dim=-1), dim=-1)
    w = torch.cat([alpha * trans, torch.zeros_like(alpha[..., :1])], dim=-1)
    return w.numpy() if as_numpy else w


@dataclass
class RayBatch:
    color: torch.Tensor
    depth: torch.Tensor
    weight_sum: torch.Tensor
    mask: torch.Tensor
    normal: torch.Tensor | None
    weights: torch.Tensor
    distances: np.ndarray


def render_rays(
    scene,
    origins: np.ndarray,
    dirs: np.ndarray,
    near: np.ndarray,
    far: np.ndarray,
    n_samples: int,
    offsets: np.ndarray | None = None,
    pose=None,
    view: np.ndarray | None = None,
    normals: bool = False,
) -> RayBatch:
    """Volume-render rays that hit the scene sphere. ``view`` overrides the decoder's view direction."""
    R = len(origins)
    t = _sample_grid(near, far, n_samples, offsets)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    view = dirs if view is None else view
    views = np.repeat(view, n_samples, axis=0)
    ev = scene.evaluate(pts.reshape(-1, 3), views, pose=pose)
    sdf = ev.sdf.reshape(R, n_samples)

    # close the last segment at the far bound so a surface lying on the bound is still crossed
    end = origins + far[:, None] * dirs
    sdf_end = scene.sdf(end, pose=pose)
    f = torch.cat([sdf, sdf_end[:, None]], dim=1)
    w = render_weights(f, scene.sharpness)[:, :-1]
    wsum = w.sum(dim=1)
    color = (w[..., None] * ev.rgb.reshape(R, n_samples, 3)).sum(dim=1)
    s_now = float(torch.as_tensor(scene.sharpness).detach())
    depth = (w * termination_points(t, far, f.detach().numpy(), s_now)).sum(dim=1)
    depth = torch.where(wsum > 1e-6, depth / wsum.clamp_min(1e-6), depth)

    owner = ev.owner.reshape(R, n_samples)
    lead = owner.gather(1, w.argmax(dim=1, keepdim=True))[:, 0]
    mask = torch.where((wsum > 0.5) & (lead == OBJECT), OBJECT_PIXEL, BACKGROUND_PIXEL)

    normal = None
    if normals:
        wd = w.detach()
        keep = (wd > NORMAL_PRUNE).reshape(-1).numpy()
        acc = torch.zeros(R * n_samples, 3, dtype=DTYPE)
        if keep.any():
            acc[torch.as_tensor(keep)] = wd.reshape(-1)[keep, None] * sample_gradient(
                scene, pts.reshape(-1, 3)[keep], pose
            ).detach()
        acc = acc.reshape(R, n_samples, 3).sum(dim=1)
        norm = acc.norm(dim=1, keepdim=True)
        normal = torch.where(norm > 0, acc / norm.clamp_min(1e-300), torch.zeros_like(acc))
    return RayBatch(color, depth, wsum, mask, normal, w, t)


def _logistic_moment(u: np.ndarray) -> np.ndarray:
    """Antiderivative of ``u * sigmoid'(u)``, split by sign to avoid cancellation."""
    neg = np.minimum(u, 0.0)
    pos = np.maximum(u, 0.0)
    g_neg = neg * expit(neg) - np.logaddexp(0.0, neg)
    g_pos = -pos * expit(-pos) - np.logaddexp(0.0, -pos)
    return np.where(u < 0, g_neg, g_pos)


def _logistic_mass(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sigmoid(b) - sigmoid(a)`` for ``a <= b``, accurate in both tails."""
    return np.where(a >= 0, expit(-a) - expit(-b), expit(b) - expit(a))


def termination_points(t: np.ndarray, far: np.ndarray, f: np.ndarray, sharpness: float) -> torch.Tensor:
    """Expected stopping point of a ray that stops inside segment ``[j_i, j_{i+1}]``.

    With the SDF linear across the segment, the stopping density in ``u = s f`` is
    the logistic density restricted to ``[s f_{i+1}, s f_i]``; its mean maps back
    to a distance along the ray. Segments where the SDF does not decrease use the midpoint.
    """
    t_next = np.concatenate([t[:, 1:], far[:, None]], axis=1)
    b, a = sharpness * f[:, :-1], sharpness * f[:, 1:]
    frac = np.full(a.shape, 0.5)
    ok = b - a > 1e-9
    mass = _logistic_mass(np.where(ok, a, 0.0), np.where(ok, b, 1.0))
    ok &= mass > 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = (_logistic_moment(b) - _logistic_moment(a)) / mass
        frac = np.where(ok, np.clip((b - mean) / (b - a), 0.0, 1.0), frac)
    return torch.as_tensor(t + frac * (t_next - t), dtype=DTYPE)


def _pixel_offsets(seed: int, pixel_ids: np.ndarray, n: int) -> np.ndarray:
    return np.stack([np.random.default_rng([seed, int(i)]).random(n) for i in pixel_ids])


def render_pixel(scene, ray: Ray, config: RenderConfig | None = None, pixel_index: int = 0, pose=None):
    """``(color, depth, normal, mask_label, accumulated_weight)`` for one ray."""
    cfg = config or RenderConfig()
    if not ray.hit:
        return np.zeros(3), 0.0, np.zeros(3), OUTSIDE_BOUND, 0.0
    offsets = _pixel_offsets(cfg.seed, [pixel_index], cfg.n_samples) if cfg.stratified else None
    with torch.no_grad():
        b = render_rays(
            scene, ray.origin[None], ray.direction[None], np.array([ray.near]), np.array([ray.far]),
            cfg.n_samples, offsets, pose=pose, normals=cfg.normals,
        )
    normal = b.normal[0].numpy() if b.normal is not None else np.zeros(3)
    return b.color[0].numpy(), float(b.depth[0]), normal, int(b.mask[0]), float(b.weight_sum[0])


def render_frame(scene, camera: Camera, config: RenderConfig | None = None, pose=None) -> RenderedFrame:
    cfg = config or RenderConfig()
    H, W = camera.height, camera.width
    origins, dirs = frame_rays(camera)
    near, far, hit = sphere_bounds(origins, dirs)
    N = H * W
    color = np.zeros((N, 3))
    depth = np.zeros(N)
    normal = np.zeros((N, 3))
    weight = np.zeros(N)
    mask = np.full(N, OUTSIDE_BOUND, dtype=np.uint8)
    ids = np.flatnonzero(hit)
    with torch.no_grad():
        for start in range(0, len(ids), cfg.chunk):
            sel = ids[start : start + cfg.chunk]
            offsets = _pixel_offsets(cfg.seed, sel, cfg.n_samples) if cfg.stratified else None
            b = render_rays(
                scene, origins[sel], dirs[sel], near[sel], far[sel], cfg.n_samples, offsets,
                pose=pose, normals=cfg.normals,
            )
            color[sel] = b.color.numpy()
            depth[sel] = b.depth.numpy()
            weight[sel] = b.weight_sum.numpy()
            mask[sel] = b.mask.numpy()
            if b.normal is not None:
                normal[sel] = b.normal.numpy()
    valid = np.isfinite(color).all(axis=1) & np.isfinite(depth) & np.isfinite(normal).all(axis=1)
    for arr in (color, depth, normal, weight):
        arr[~np.isfinite(arr)] = 0.0
    return RenderedFrame(
        color=color.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        normal=normal.reshape(H, W, 3),
        mask=mask.reshape(H, W),
        accumulated_weight=weight.reshape(H, W),
        valid=valid.reshape(H, W),
    )
