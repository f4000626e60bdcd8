"""Composable scene fields.

A background branch maps encoded 3D position to an SDF value and a feature
vector. An object branch works in mesh-attached coordinates: the signed
distance to the posed mesh plus the barycentric blend of per-node surface
codes at the closest point. The scene takes the pointwise minimum of the
two SDFs and the feature of whichever branch attains it.

Anything that provides ``sharpness`` and ``evaluate`` can be rendered; the
learned :class:`SceneModel` and the network-free :class:`AnalyticScene` both do.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import ClosestPointIndex, TriangleMesh, apply_transform
from .nn import DTYPE, Mlp, SineCosineEncoding
from .spectral import PositionalEmbedding

log = logging.getLogger(__name__)

BACKGROUND, OBJECT = 0, 1
SCENE_RADIUS = 1.0
FD_STEP = 1e-4
RGB_MARGIN = 1e-6


def sharpness_for_std(std: float) -> float:
    """Inverse scale of a logistic density with the given standard deviation."""
    return math.pi / (std * math.sqrt(3.0))


@dataclass
class FieldConfig:
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
    pos_octaves: int = 6
    view_octaves: int = 4
    sdf_octaves: int = 6
    room_radius: float = 0.9
    sharpness_std: float = 0.3
    seed: int = 0


@dataclass
class MeshCoordinate:
    embedded: np.ndarray
    signed_distance: float


@dataclass
class FieldSample:
    sdf: np.ndarray
    feature: np.ndarray
    owner: np.ndarray
    gradient: np.ndarray | None = None


@dataclass
class FieldEval:
    """Batched branch outputs; tensors keep autograd history when enabled."""

    sdf: torch.Tensor
    owner: torch.Tensor  # int64, BACKGROUND or OBJECT
    rgb: torch.Tensor | None = None
    feature: torch.Tensor | None = None
    sdf_background: torch.Tensor | None = None
    sdf_object: torch.Tensor | None = None


def blend_codes(codes, faces: np.ndarray, face: np.ndarray, bary: np.ndarray):
    """``b_A e_A + b_B e_B + b_C e_C`` for each (face, barycentric) pair."""
    nodes = faces[face]
    if isinstance(codes, torch.Tensor):
        b = torch.as_tensor(bary, dtype=codes.dtype)
        idx = torch.as_tensor(nodes, dtype=torch.long)
        return (b[..., None] * codes[idx]).sum(dim=-2)
    return np.einsum("ni,nik->nk", bary, codes[nodes])


def compose(sdf_w, feat_w, sdf_o, feat_o):
    """Pointwise min of the branch SDFs and the argmin branch's feature; ties go to the object."""
    obj = sdf_o <= sdf_w
    sdf = torch.where(obj, sdf_o, sdf_w)
    feat = None if feat_o is None else torch.where(obj[:, None], feat_o, feat_w)
    return sdf, feat, obj.long()


def mesh_coordinates(index: ClosestPointIndex, codes, points: np.ndarray):
    """Batched surface codes and signed distances for (N, 3) points."""
    q = index.query(points)
    return blend_codes(codes, index.mesh.faces, q.face, q.barycentric), q.signed_distance


def mesh_coordinate(index: ClosestPointIndex, embedding: PositionalEmbedding, p) -> MeshCoordinate:
    if embedding.n != index.mesh.n_nodes:
        raise ValueError(f"embedding has {embedding.n} nodes, mesh has {index.mesh.n_nodes}")
    code, sdf = mesh_coordinates(index, embedding.X, np.asarray(p, dtype=np.float64).reshape(1, 3))
    return MeshCoordinate(code[0], float(sdf[0]))


def _to_points(points) -> np.ndarray:
    if isinstance(points, torch.Tensor):
        points = points.detach().cpu().numpy()
    return np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)


def check_bound(points: np.ndarray, slack: float = 1e-3):
    r = np.linalg.norm(points, axis=1)
    if np.any(r > SCENE_RADIUS + slack):
        raise ValueError(f"point outside the scene bound (|p| = {r.max():.4f} > {SCENE_RADIUS})")


def unit_view(view, tol: float = 1e-3) -> np.ndarray:
    view = np.asarray(view, dtype=np.float64)
    norm = np.linalg.norm(view, axis=-1, keepdims=True)
    err = np.abs(norm - 1.0)
    if np.any(err > tol):
        raise ValueError(f"view direction is not unit length (|v| = {norm.ravel()[np.argmax(err)]:.6f})")
    if np.any(err > 1e-12):
        log.warning("normalising view direction off unit length by %.2e", err.max())
    return view / norm


class _PosedMesh:
    """A template mesh plus its current placement: a rigid transform or a re-posed copy."""

    def __init__(self, mesh: TriangleMesh):
        self.template = mesh
        self.index = ClosestPointIndex(mesh)
        self._rigid_cache: dict[bytes, np.ndarray] = {}

    def set_mesh(self, mesh: TriangleMesh):
        if not mesh.same_topology(self.template):
            raise ValueError(
                f"topology mismatch: {mesh.n_nodes} nodes / {mesh.n_faces} faces vs "
                f"{self.template.n_nodes} / {self.template.n_faces}"
            )
        self.index = ClosestPointIndex(mesh)

    def local(self, points: np.ndarray, pose) -> np.ndarray:
        # distances and barycentrics are invariant under rigid motion, so a rigidly
        # posed query is answered in the template frame against one index
        if pose is None:
            return points
        pose = np.asarray(pose, dtype=np.float64)
        key = pose.tobytes()
        inv = self._rigid_cache.get(key)
        if inv is None:
            inv = np.linalg.inv(pose)
            self._rigid_cache[key] = inv
        return apply_transform(inv, points)

    def query(self, points: np.ndarray, pose=None):
        return self.index.query(self.local(points, pose))


class SceneModel(nn.Module):
    def __init__(self, mesh: TriangleMesh, embedding: PositionalEmbedding, config: FieldConfig | None = None):
        super().__init__()
        cfg = config or FieldConfig()
        if embedding.n != mesh.n_nodes:
            raise ValueError(f"embedding has {embedding.n} nodes, mesh has {mesh.n_nodes}")
        self.config = cfg
        self.embedding_kind = embedding.kind
        self.posed = _PosedMesh(mesh)
        codes = torch.as_tensor(embedding.X, dtype=DTYPE).clone()
        if embedding.kind == "learnable":
            self.codes = nn.Parameter(codes)
        else:
            self.register_buffer("codes", codes)

        self.pos_enc = SineCosineEncoding(cfg.pos_octaves)
        self.view_enc = SineCosineEncoding(cfg.view_octaves)
        self.sdf_enc = SineCosineEncoding(cfg.sdf_octaves)
        k, skip = cfg.feature_dim, (cfg.skip_layer,)
        obj_in = self.sdf_enc.out_dim(1) + embedding.k
        self.background = Mlp(
            self.pos_enc.out_dim(3), 1 + k, cfg.bg_width, cfg.bg_layers, skip=skip,
            init="geometric", radius=cfg.room_radius, inside_out=True, seed=cfg.seed,
        )
        self.residual = Mlp(obj_in, 1, cfg.res_width, cfg.res_layers, skip=skip, init="zero_last", seed=cfg.seed + 1)
        self.object_feature = Mlp(obj_in, k, cfg.feat_width, cfg.feat_layers, seed=cfg.seed + 2)
        self.decoder = Mlp(
            k + self.view_enc.out_dim(3) + 1, 3, cfg.dec_width, cfg.dec_layers,
            activation="relu", output_activation="sigmoid", seed=cfg.seed + 3,
        )
        self.log_sharpness = nn.Parameter(torch.tensor(math.log(sharpness_for_std(cfg.sharpness_std)), dtype=DTYPE))

    @property
    def sharpness(self) -> torch.Tensor:
        return torch.exp(self.log_sharpness)

    @property
    def mesh_index(self) -> ClosestPointIndex:
        return self.posed.index

    def set_mesh(self, mesh: TriangleMesh):
        """Re-pose: same topology, new node positions. Embedding and weights carry over."""
        self.posed.set_mesh(mesh)

    # -- branches --------------------------------------------------------

    def object_inputs(self, points: np.ndarray, pose=None):
        q = self.posed.query(points, pose)
        sdf_m = torch.as_tensor(q.signed_distance, dtype=DTYPE)
        code = blend_codes(self.codes, self.posed.template.faces, q.face, q.barycentric)
        return sdf_m, torch.cat([self.sdf_enc(sdf_m[:, None]), code], dim=-1)

    def background_branch(self, points: np.ndarray):
        out = self.background(self.pos_enc(torch.from_numpy(np.array(points, dtype=np.float64))))
        return out[:, 0], out[:, 1:]

    def object_branch(self, points: np.ndarray, pose=None, with_feature: bool = True):
        sdf_m, inp = self.object_inputs(points, pose)
        sdf = sdf_m + self.residual(inp)[:, 0]
        return sdf, (self.object_feature(inp) if with_feature else None), sdf_m

    def decode(self, feature: torch.Tensor, view: torch.Tensor, sdf: torch.Tensor) -> torch.Tensor:
        rgb = self.decoder(torch.cat([feature, self.view_enc(view), sdf[:, None]], dim=-1))
        return RGB_MARGIN + (1 - 2 * RGB_MARGIN) * rgb

    def evaluate(self, points, view=None, pose=None, with_color: bool = True) -> FieldEval:
        pts = _to_points(points)
        sdf_w, feat_w = self.background_branch(pts)
        sdf_o, feat_o, _ = self.object_branch(pts, pose, with_feature=with_color)
        sdf, feature, owner = compose(sdf_w, feat_w, sdf_o, feat_o)
        ev = FieldEval(sdf=sdf, owner=owner, feature=feature, sdf_background=sdf_w, sdf_object=sdf_o)
        if with_color:
            if view is not None:
                view = torch.as_tensor(view, dtype=DTYPE).reshape(-1, 3).expand(len(pts), 3)
                ev.rgb = self.decode(ev.feature, view, sdf)
        return ev

    def sdf(self, points, pose=None) -> torch.Tensor:
        return self.evaluate(points, pose=pose, with_color=False).sdf


class AnalyticScene:
    """Network-free scene: an inward-facing sphere wall plus an optional exact mesh SDF.

    Colours are constant per branch. Used as an oracle for the renderer and losses.
    """

    def __init__(
        self,
        wall_radius: float = 1.0,
        mesh: TriangleMesh | None = None,
        sharpness: float = 200.0,
        wall_rgb=(0.5, 0.5, 0.5),
        object_rgb=(0.8, 0.2, 0.1),
    ):
        self.wall_radius = wall_radius
        self.posed = _PosedMesh(mesh) if mesh is not None else None
        self.sharpness = torch.tensor(float(sharpness), dtype=DTYPE)
        self.wall_rgb = torch.tensor(wall_rgb, dtype=DTYPE)
        self.object_rgb = torch.tensor(object_rgb, dtype=DTYPE)

    @property
    def mesh_index(self):
        return None if self.posed is None else self.posed.index

    def set_mesh(self, mesh: TriangleMesh):
        self.posed.set_mesh(mesh)

    def evaluate(self, points, view=None, pose=None, with_color: bool = True) -> FieldEval:
        pts = _to_points(points)
        sdf_w = torch.as_tensor(self.wall_radius - np.linalg.norm(pts, axis=1), dtype=DTYPE)
        if self.posed is None:
            sdf_o = torch.full_like(sdf_w, math.inf)
        else:
            sdf_o = torch.as_tensor(self.posed.query(pts, pose).signed_distance, dtype=DTYPE)
        obj = sdf_o <= sdf_w
        ev = FieldEval(sdf=torch.where(obj, sdf_o, sdf_w), owner=obj.long(), sdf_background=sdf_w, sdf_object=sdf_o)
        if with_color:
            ev.rgb = torch.where(obj[:, None], self.object_rgb, self.wall_rgb)
        return ev

    def sdf(self, points, pose=None) -> torch.Tensor:
        return self.evaluate(points, pose=pose, with_color=False).sdf


# -- point API -----------------------------------------------------------

def sample_object(model: SceneModel, p, pose=None):
    with torch.no_grad():
        sdf, feat, _ = model.object_branch(_to_points(p), pose)
    return sdf.numpy(), feat.numpy()


def sample_gradient(scene, points, pose=None, h: float = FD_STEP) -> torch.Tensor:
    """Central-difference gradient of the composed SDF; differentiable in the parameters."""
    pts = _to_points(points)
    offsets = np.concatenate([np.eye(3), -np.eye(3)]) * h
    stencil = (pts[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    s = scene.sdf(stencil, pose).reshape(6, -1)
    return ((s[:3] - s[3:]) / (2 * h)).T


def sample_scene(scene, p, pose=None, with_gradient: bool = True) -> FieldSample:
    pts = _to_points(p)
    check_bound(pts)
    with torch.no_grad():
        ev = scene.evaluate(pts, pose=pose, with_color=True)
        grad = sample_gradient(scene, pts, pose).numpy() if with_gradient else None
    feature = ev.feature.numpy() if ev.feature is not None else None
    return FieldSample(ev.sdf.numpy(), feature, ev.owner.numpy(), grad)


def decode_color(model: SceneModel, feature, view, sdf) -> np.ndarray:
    view = unit_view(view)
    with torch.no_grad():
        rgb = model.decode(
            torch.as_tensor(feature, dtype=DTYPE).reshape(-1, model.config.feature_dim),
            torch.as_tensor(view, dtype=DTYPE).reshape(-1, 3),
            torch.as_tensor(sdf, dtype=DTYPE).reshape(-1),
        )
    return rgb.numpy().reshape(np.shape(feature)[:-1] + (3,))
