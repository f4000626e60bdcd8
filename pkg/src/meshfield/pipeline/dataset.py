"""Scene manifests: loading, validation and scale normalisation."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..geometry import load_mesh
from ..renderer import Camera
from ..trainer import CaptureDataset, Frame, check_rigid
from .io import read_json, read_pfm, read_png


class ManifestError(ValueError):
    pass


def _resolve(root: Path, rel: str, what: str) -> Path:
    p = root / rel
    if not p.is_file():
        raise ManifestError(f"{what}: missing file {p}")
    return p


def load_manifest(path) -> tuple[CaptureDataset, dict]:
    """Read and validate a manifest; world content is multiplied by the manifest ``scale``."""
    path = Path(path)
    try:
        manifest = read_json(path)
    except (OSError, ValueError) as e:
        raise ManifestError(f"{path}: cannot read manifest ({e})") from None
    root = path.parent
    for key in ("mesh", "frames"):
        if key not in manifest:
            raise ManifestError(f"{path}: missing field {key!r}")
    scale = float(manifest.get("scale", 1.0))
    if not scale > 0:
        raise ManifestError(f"{path}: scale must be positive")
    mesh = load_mesh(_resolve(root, manifest["mesh"], "mesh"))
    mesh = mesh.with_nodes(mesh.nodes * scale)

    frames = []
    for i, entry in enumerate(manifest["frames"]):
        name = entry.get("id", f"frame{i}")
        try:
            cam = Camera.load(_resolve(root, entry["camera"], f"frame {name} camera"))
            color = read_png(_resolve(root, entry["color"], f"frame {name} color"))
            depth = read_pfm(_resolve(root, entry["depth"], f"frame {name} depth")).astype(np.float64)
            pose = np.asarray(entry["pose"], dtype=np.float64).reshape(4, 4)
            check_rigid(pose, f"frame {name}")
        except KeyError as e:
            raise ManifestError(f"frame {name}: missing field {e.args[0]!r}") from None
        except ValueError as e:
            raise ManifestError(str(e) if str(e).startswith("frame") else f"frame {name}: {e}") from None
        if color.ndim == 2:
            color = np.repeat(color[..., None], 3, axis=2)
        frames.append(Frame(name, _scaled_camera(cam, scale), color, depth * scale, _scaled_pose(pose, scale)))
    try:
        return CaptureDataset(mesh, frames), manifest
    except ValueError as e:
        raise ManifestError(str(e)) from None


def _scaled_pose(pose: np.ndarray, scale: float) -> np.ndarray:
    out = pose.copy()
    out[:3, 3] *= scale
    return out


def _scaled_camera(cam: Camera, scale: float) -> Camera:
    if scale == 1.0:
        return cam
    T = cam.camera_from_world.copy()
    T[:3, 3] *= scale
    return Camera(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, T)
