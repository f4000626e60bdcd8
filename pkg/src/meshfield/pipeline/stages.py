"""Rendering stage: frame files, re-posed dataset generation and the ablation harness."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from ..geometry import ClosestPointIndex, TriangleMesh, load_mesh
from ..renderer import MASK_PALETTE, OBJECT_PIXEL, Camera, RenderConfig, RenderedFrame, frame_rays, render_frame
from ..spectral import make_embedding
from ..trainer import TrainConfig, build_model, evaluate, load_model, train
from .dataset import load_manifest
from .io import read_json, write_json, write_pfm, write_png

PLANES = ("color.png", "depth.pfm", "normal.pfm", "mask.png", "meta.json")


def write_frame(frame: RenderedFrame, out_dir: Path, stem: str, meta: dict) -> dict:
    out_dir = Path(out_dir)
    files = {p.split(".")[0]: f"{stem}.{p}" for p in PLANES}
    write_png(out_dir / files["color"], frame.color)
    write_pfm(out_dir / files["depth"], frame.depth)
    write_pfm(out_dir / files["normal"], frame.normal)
    write_png(out_dir / files["mask"], MASK_PALETTE[frame.mask])
    write_json(out_dir / files["meta"], meta)
    return files


def render_to_files(scene, camera: Camera, config: RenderConfig, out_dir: Path, stem: str, pose=None) -> dict:
    frame = render_frame(scene, camera, config, pose=pose)
    meta = {
        "camera": camera.to_dict(),
        "render": dataclasses.asdict(config),
        "pose": None if pose is None else [float(v) for v in np.asarray(pose).ravel()],
        "mask_palette": {"outside_bound": 0, "background": 128, "object": 255},
        "depth": "distance along the ray; 0 outside the scene bound",
        "valid_fraction": float(frame.valid.mean()),
    }
    return write_frame(frame, out_dir, stem, meta)


def _mesh_entries(job: dict, root: Path):
    for i, entry in enumerate(job.get("meshes", [])):
        if isinstance(entry, str):
            entry = {"id": Path(entry).stem, "path": entry}
        yield entry.get("id", f"pose{i}"), root / entry["path"]


def generate(job_path, out_dir) -> dict:
    """Render every (re-posed mesh, camera) pair of a job into ``out_dir/<pose>/<camera>.*``.

    All meshes are checked against the checkpoint topology before anything is rendered.
    The checkpoint and embedding are only read.
    """
    job_path = Path(job_path)
    job = read_json(job_path)
    root = job_path.parent
    ckpt = root / job["checkpoint"]
    if not ckpt.is_file():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    model, _, _ = load_model(ckpt)
    template = model.posed.template

    meshes = []
    for pose_id, path in _mesh_entries(job, root):
        mesh = load_mesh(path)
        if not mesh.same_topology(template):
            raise ValueError(
                f"topology mismatch for {path}: {mesh.n_nodes} nodes / {mesh.n_faces} faces, "
                f"checkpoint has {template.n_nodes} / {template.n_faces}"
            )
        meshes.append((pose_id, mesh))
    if not meshes:
        raise ValueError(f"{job_path}: job lists no meshes")
    cameras = [(Path(c).stem, Camera.load(root / c)) for c in job.get("cameras", [])]
    if not cameras:
        raise ValueError(f"{job_path}: job lists no cameras")
    config = RenderConfig(**job.get("render", {}))

    out = Path(out_dir)
    frames = []
    for pose_id, mesh in meshes:
        model.set_mesh(mesh)  # one index build per pose, shared by its cameras
        for cam_id, cam in cameras:
            files = render_to_files(model, cam, config, out / pose_id, cam_id)
            frames.append({"pose": pose_id, "camera": cam_id, **{k: f"{pose_id}/{v}" for k, v in files.items()}})
    index = {"checkpoint": str(ckpt), "render": dataclasses.asdict(config), "frames": frames}
    write_json(out / "index.json", index)
    return index


def pattern_correlation(
    camera: Camera,
    mesh_before: TriangleMesh,
    mesh_after: TriangleMesh,
    color_before: np.ndarray,
    color_after: np.ndarray,
    depth_tol: float = 1e-2,
) -> tuple[float, int]:
    """Pearson correlation of colours at corresponding surface points of two renders.

    Each object pixel of the ``after`` image is traced to its (face, barycentric)
    surface point, mapped to the same surface point on ``mesh_before`` and
    projected into the ``before`` image; pairs whose point is occluded there are
    dropped. Returns the correlation and the number of pairs.
    """
    H, W = camera.height, camera.width
    o, d = frame_rays(camera)
    t_after, face, bary = ClosestPointIndex(mesh_after).raycast(o, d)
    hit = np.isfinite(t_after)
    p_before = np.einsum("ni,nij->nj", bary[hit], mesh_before.nodes[mesh_before.faces[face[hit]]])
    uv = camera.project(p_before)
    col = np.floor(uv[:, 0]).astype(int)
    row = np.floor(uv[:, 1]).astype(int)
    inside = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    t_before, _, _ = ClosestPointIndex(mesh_before).raycast(o, d)
    pix = np.where(inside, row * W + col, 0)
    dist = np.linalg.norm(p_before - camera.center, axis=1)
    visible = inside & (np.abs(t_before[pix] - dist) < depth_tol)
    a = color_after.reshape(-1, 3)[np.flatnonzero(hit)[visible]]
    b = color_before.reshape(-1, 3)[pix[visible]]
    if len(a) < 2:
        return float("nan"), len(a)
    return float(np.corrcoef(a.ravel(), b.ravel())[0, 1]), len(a)


def mask_iou(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """IoU of the object label between two masks (boolean, labels or palette values)."""
    def obj(m):
        m = np.asarray(m)
        if m.dtype == bool:
            return m
        return m == (MASK_PALETTE[OBJECT_PIXEL] if m.max() > OBJECT_PIXEL else OBJECT_PIXEL)

    a, b = obj(pred_mask), obj(truth_mask)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


def run_ablation(manifest_path, out_dir, base: TrainConfig, kinds, probs, seeds, eval_stride: int = 1) -> dict:
    """Train and evaluate every (embedding kind, augmentation probability, seed) on one frame set."""
    data, _ = load_manifest(manifest_path)
    frames = data.frames[:: max(eval_stride, 1)]
    out = Path(out_dir)
    runs = []
    for kind in kinds:
        for p in probs:
            for seed in seeds:
                cfg = dataclasses.replace(base, embedding_kind=kind, augment_p=p, seed=seed)
                name = f"{kind}_p{p:g}_s{seed}"
                emb = make_embedding(data.mesh, kind, cfg.embedding_k, seed)
                model = build_model(data.mesh, emb, cfg)
                train(model, data, cfg, out / name, embedding_seed=seed)
                report = evaluate(model, frames, RenderConfig(n_samples=cfg.eval_samples, normals=False, seed=seed))
                write_json(out / name / "report.json", report.to_dict())
                runs.append({"run": name, "kind": kind, "augment_p": p, "seed": seed, "report": report.to_dict()})
    summary = {"frames": [f.name for f in frames], "runs": runs}
    write_json(out / "summary.json", summary)
    return summary
