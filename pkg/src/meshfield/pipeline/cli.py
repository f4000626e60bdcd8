"""Command-line entry point: ``meshfield <embed|train|render|generate|eval|synth|ablate> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..geometry import MeshError, load_mesh
from ..renderer import Camera, RenderConfig
from ..spectral import KINDS, PositionalEmbedding, SpectralError, make_embedding
from ..trainer import NumericError, TrainConfig, build_model, evaluate, load_model, train
from .dataset import load_manifest
from .io import parse_key_values, write_json
from .stages import generate, render_to_files, run_ablation
from .synthetic import make_synthetic

log = logging.getLogger("meshfield")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _load_config(args) -> TrainConfig:
    base = TrainConfig.profile(args.profile)
    if args.config:
        path = Path(args.config)
        base = TrainConfig.from_strings(parse_key_values(path.read_text(), str(path)), base)
    return base


def cmd_embed(args) -> int:
    mesh = load_mesh(args.mesh)
    emb = make_embedding(mesh, args.kind, args.k, args.seed)
    emb.save(args.out)
    if emb.eigenvalues is not None:
        ev = emb.eigenvalues
        print(f"laplacian embedding n={emb.n} k={emb.k}; eigenvalues {ev[0]:.6g} .. {ev[-1]:.6g}")
    else:
        print(f"{emb.kind} embedding n={emb.n} k={emb.k} seed={emb.seed}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    data, manifest = load_manifest(args.manifest)
    if args.embedding or manifest.get("embedding"):
        src = Path(args.embedding) if args.embedding else Path(args.manifest).parent / manifest["embedding"]
        emb = PositionalEmbedding.load(src)
    else:
        emb = make_embedding(data.mesh, config.embedding_kind, config.embedding_k, config.seed)
    model = build_model(data.mesh, emb, config)

    def progress(row):
        if row["iteration"] % args.log_every == 0:
            log.info("iter %(iteration)d total %(total).5f color %(color).5f depth %(depth).5f", row)

    result = train(model, data, config, args.out, resume=args.resume, embedding_seed=emb.seed, progress=progress)
    frames = data.frames[:: max(args.eval_stride, 1)]
    report = evaluate(model, frames, RenderConfig(n_samples=config.eval_samples, normals=False, seed=config.seed))
    write_json(Path(args.out) / "report.json", report.to_dict())
    print(f"trained {result.iterations} iterations; PSNR {report.psnr.mean:.2f} dB, "
          f"geometric error {report.geometric_error.mean:.4f}")
    return EXIT_OK


def _render_config(args) -> RenderConfig:
    return RenderConfig(n_samples=args.samples, seed=args.seed, stratified=not args.no_stratify)


def cmd_render(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    camera = Camera.load(args.camera)
    pose = None
    if args.pose:
        pose = np.asarray([float(v) for v in args.pose.replace(",", " ").split()], dtype=np.float64).reshape(4, 4)
    render_to_files(model, camera, _render_config(args), Path(args.out), Path(args.camera).stem, pose=pose)
    return EXIT_OK


def cmd_generate(args) -> int:
    index = generate(args.job, args.out)
    print(f"wrote {len(index['frames'])} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta, _ = load_model(args.checkpoint)
    data, _ = load_manifest(args.manifest)
    frames = data.frames[:: max(args.stride, 1)]
    report = evaluate(model, frames, RenderConfig(n_samples=args.samples, normals=False, seed=args.seed))
    write_json(args.out, report.to_dict())
    print(f"PSNR {report.psnr.mean:.2f} ± {report.psnr.std:.2f} dB; SSIM {report.ssim.mean:.3f} ± "
          f"{report.ssim.std:.3f}; geometric error {report.geometric_error.mean:.4f} ± {report.geometric_error.std:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    manifest = make_synthetic(args.seed, args.out, n_cameras=args.cameras, n_poses=args.poses, resolution=args.resolution)
    print(f"wrote {len(manifest['frames'])} frames to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    kinds = args.kinds.split(",")
    probs = [float(p) for p in args.probs.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    summary = run_ablation(args.manifest, args.out, config, kinds, probs, seeds, eval_stride=args.eval_stride)
    for row in summary["runs"]:
        print(f"{row['run']}: PSNR {row['report']['PSNR']['mean']:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshfield", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("embed", help="compute a per-node positional embedding")
    s.add_argument("mesh")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--kind", choices=KINDS, default="laplacian")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    def training_options(s):
        s.add_argument("manifest")
        s.add_argument("--out", required=True)
        s.add_argument("--profile", choices=("paper", "desk", "tiny"), default="desk")
        s.add_argument("--config", help="key = value file overriding profile values")
        s.add_argument("--eval-stride", type=int, default=1, help="evaluate every n-th frame")

    s = sub.add_parser("train", help="fit the scene model to a capture manifest")
    training_options(s)
    s.add_argument("--embedding", help="embedding file (default: computed from the config)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train)

    def render_options(s):
        s.add_argument("--samples", type=int, default=128)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--no-stratify", action="store_true")

    s = sub.add_parser("render", help="render one camera from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("camera")
    s.add_argument("--out", required=True)
    s.add_argument("--pose", help="16 row-major floats placing the template")
    render_options(s)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("generate", help="render re-posed meshes into a labelled dataset")
    s.add_argument("job")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", help="PSNR / SSIM / geometric error over manifest frames")
    s.add_argument("checkpoint")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=1)
    render_options(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write the procedural capture scene")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--cameras", type=int, default=8)
    s.add_argument("--poses", type=int, default=4)
    s.add_argument("--resolution", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ablate", help="train and evaluate an embedding-kind x augmentation matrix")
    training_options(s)
    s.add_argument("--kinds", default=",".join(KINDS))
    s.add_argument("--probs", default="0.3")
    s.add_argument("--seeds", default="0")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, MeshError, SpectralError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
