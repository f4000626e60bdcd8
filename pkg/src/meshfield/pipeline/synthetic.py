"""Procedural capture scene with exact ground truth by ray casting.

A tube sits inside an inward-facing room sphere. The tube's colour is a
function of template coordinates, so it travels with the surface under any
re-pose; it is unlit so that a surface-attached feature field can represent
it exactly. The room has a smooth albedo, diffuse shading and a
view-dependent specular lobe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import ClosestPointIndex, TriangleMesh, bend_nodes, save_obj, tube
from ..renderer import BACKGROUND_PIXEL, MASK_PALETTE, OBJECT_PIXEL, Camera, frame_rays, sphere_bounds
from .io import write_json, write_pfm, write_png

ROOM_RADIUS = 0.95
CAMERA_RADIUS = 0.75
LIGHT = np.array([0.4, -0.3, 0.85]) / np.linalg.norm([0.4, -0.3, 0.85])
TUBE_LENGTH = 0.6


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def object_albedo(template_points: np.ndarray) -> np.ndarray:
    x, y, z = template_points.T
    phi = np.arctan2(z, y)
    r = 0.55 + 0.35 * np.sin(2 * np.pi * x / 0.3)
    g = 0.45 + 0.3 * np.cos(2 * np.pi * x / 0.6 + phi)
    b = 0.4 + 0.25 * np.sin(2 * phi)
    return np.clip(np.stack([r, g, b], axis=1), 0.0, 1.0)


def wall_color(points: np.ndarray, view: np.ndarray) -> np.ndarray:
    d = _unit(points)
    albedo = np.stack(
        [0.45 + 0.2 * d[:, 0], 0.4 + 0.2 * d[:, 1], 0.35 + 0.2 * d[:, 2] + 0.1 * np.sin(3 * np.arctan2(d[:, 1], d[:, 0]))],
        axis=1,
    )
    n = -d
    diffuse = 0.8 + 0.2 * np.clip(n @ LIGHT, 0.0, None)
    refl = view - 2 * np.einsum("ij,ij->i", view, n)[:, None] * n
    # strong enough that ignoring the view costs more than a desk model's fitting error
    spec = 0.4 * np.clip(refl @ LIGHT, 0.0, None) ** 4
    return np.clip(albedo * diffuse[:, None] + spec[:, None], 0.0, 1.0)


@dataclass
class GroundTruth:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    face: np.ndarray  # hit face per pixel, -1 for the wall
    barycentric: np.ndarray


def render_truth(camera: Camera, posed_mesh: TriangleMesh, template: TriangleMesh) -> GroundTruth:
    """Direct ray casting of the procedural scene."""
    H, W = camera.height, camera.width
    o, d = frame_rays(camera)
    _, t_wall, hit_wall = sphere_bounds(o, d, ROOM_RADIUS)
    if not hit_wall.all():
        raise ValueError("synthetic cameras must sit inside the room")
    t_obj, face, bary = ClosestPointIndex(posed_mesh).raycast(o, d)
    on_obj = np.isfinite(t_obj) & (t_obj < t_wall)
    depth = np.where(on_obj, t_obj, t_wall)
    hit = o + depth[:, None] * d

    color = wall_color(hit, d)
    f = face[on_obj]
    tmpl = np.einsum("ni,nij->nj", bary[on_obj], template.nodes[template.faces[f]])
    color[on_obj] = object_albedo(tmpl)

    normal = -_unit(hit)
    tri = posed_mesh.nodes[posed_mesh.faces[f]]
    normal[on_obj] = _unit(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]))
    mask = np.where(on_obj, OBJECT_PIXEL, BACKGROUND_PIXEL).astype(np.uint8)
    return GroundTruth(
        color=color.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        normal=normal.reshape(H, W, 3),
        mask=mask.reshape(H, W),
        face=np.where(on_obj, face, -1).reshape(H, W),
        barycentric=bary.reshape(H, W, 3),
    )


def _rotation(axis, angle):
    axis = _unit(np.asarray(axis, dtype=np.float64))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def capture_poses(rng, n: int) -> list[np.ndarray]:
    poses = []
    for i in range(n):
        T = np.eye(4)
        yaw = 2 * np.pi * i / n + rng.uniform(-0.3, 0.3)
        tilt = rng.uniform(-0.4, 0.4)
        T[:3, :3] = _rotation([0, 0, 1], yaw) @ _rotation([0, 1, 0], tilt)
        T[:3, 3] = rng.uniform(-0.05, 0.05, 3)
        poses.append(T)
    return poses


def ring_cameras(rng, n: int, resolution: int, fov_deg: float = 70.0, phase: float = 0.0) -> list[Camera]:
    cams = []
    for i in range(n):
        az = 2 * np.pi * (i + phase) / n + rng.uniform(-0.15, 0.15)
        el = (0.35 if i % 2 else -0.2) + rng.uniform(-0.1, 0.1)
        eye = CAMERA_RADIUS * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        target = rng.uniform(-0.05, 0.05, 3)
        cams.append(Camera.look_at(eye, target, (0, 0, 1), resolution, resolution, fov_deg))
    return cams


@dataclass
class SyntheticScene:
    template: TriangleMesh
    poses: list
    cameras: list
    test_cameras: list
    reposed: dict = field(default_factory=dict)  # name -> world-frame mesh


def build_scene(seed: int = 0, n_cameras: int = 8, n_poses: int = 4, resolution: int = 64, test_resolution: int = 128):
    rng = np.random.default_rng(seed)
    template = tube(TUBE_LENGTH)
    poses = capture_poses(rng, n_poses)
    cameras = ring_cameras(rng, n_cameras, resolution)
    test_cameras = ring_cameras(rng, 2, test_resolution, phase=0.5)
    base = template.transformed(poses[0])
    shifted = poses[0].copy()
    shifted[0, 3] += 0.1
    bent = template.with_nodes(bend_nodes(template.nodes, angle=1.2, length=TUBE_LENGTH)).transformed(poses[0])
    reposed = {"identity": base, "translated": template.transformed(shifted), "bent": bent}
    return SyntheticScene(template, poses, cameras, test_cameras, reposed)


def make_synthetic(seed: int, out_dir, n_cameras: int = 8, n_poses: int = 4, resolution: int = 64) -> dict:
    """Write a capture dataset, re-posed meshes and their ground truth; return the manifest."""
    out = Path(out_dir)
    scene = build_scene(seed, n_cameras, n_poses, resolution)
    save_obj(scene.template, out / "mesh.obj")
    frames = []
    for c, cam in enumerate(scene.cameras):
        cam.save(_mkparent(out / "cameras" / f"cam{c}.json"))
    for p, pose in enumerate(scene.poses):
        posed = scene.template.transformed(pose)
        for c, cam in enumerate(scene.cameras):
            fid = f"p{p}_c{c}"
            gt = render_truth(cam, posed, scene.template)
            write_png(out / "frames" / f"{fid}.color.png", gt.color)
            write_pfm(out / "frames" / f"{fid}.depth.pfm", gt.depth)
            write_pfm(out / "frames" / f"{fid}.normal.pfm", gt.normal)
            write_png(out / "frames" / f"{fid}.mask.png", MASK_PALETTE[gt.mask])
            frames.append({
                "id": fid,
                "camera": f"cameras/cam{c}.json",
                "color": f"frames/{fid}.color.png",
                "depth": f"frames/{fid}.depth.pfm",
                "pose": [float(v) for v in pose.ravel()],
            })
    manifest = {"mesh": "mesh.obj", "scale": 1.0, "seed": seed, "frames": frames}
    write_json(out / "manifest.json", manifest)

    tests = []
    for c, cam in enumerate(scene.test_cameras):
        cam.save(_mkparent(out / "test_cameras" / f"test{c}.json"))
        tests.append(f"test_cameras/test{c}.json")
    for name, mesh in scene.reposed.items():
        save_obj(mesh, out / "reposed" / f"{name}.obj")
        for c, cam in enumerate(scene.test_cameras):
            gt = render_truth(cam, mesh, scene.template)
            stem = out / "reposed" / "truth" / name / f"test{c}"
            write_png(_mkparent(stem.with_suffix(".color.png")), gt.color)
            write_png(stem.with_suffix(".mask.png"), MASK_PALETTE[gt.mask])
            write_pfm(stem.with_suffix(".depth.pfm"), gt.depth)
    write_json(out / "reposed" / "index.json", {"meshes": sorted(scene.reposed), "cameras": tests})
    return manifest


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path
