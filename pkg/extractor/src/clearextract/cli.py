"""clear-extract: images | descriptors | tsne."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clear-extract",
        description="Encode images and descriptor texts into CLEB + manifest",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_img = sub.add_parser("images", help="encode an image tree")
    p_img.add_argument("root", help="folder-per-class image root")
    p_desc = sub.add_parser("descriptors", help="encode per-class descriptor files")
    p_desc.add_argument("files", nargs="+", help="descriptor .txt/.json files")
    p_tsne = sub.add_parser("tsne", help="plot the pool with selected concepts")
    p_tsne.add_argument("pool", help="descriptor CLEB file")
    p_tsne.add_argument("--selection", default=None, help="selection report JSON")

    for p, needs_backend in ((p_img, True), (p_desc, True), (p_tsne, False)):
        p.add_argument("--out", required=True, help="output directory or file")
        p.add_argument("--seed", type=int, default=0)
        if needs_backend:
            p.add_argument("--backend", choices=["clip", "hash"], default="clip")
            p.add_argument("--model", default="clip-ViT-B-32")
            p.add_argument("--device", default="cpu")
            p.add_argument("--batch", type=int, default=64)
            p.add_argument("--dim", type=int, default=512,
                           help="embedding width for the hash backend")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    from .cleb import ExtractError
    from .extract import ExtractJob, extract_descriptors, extract_images
    from .encoders import make_encoder
    from .tsne import tsne_plot

    try:
        if args.command == "tsne":
            out = Path(args.out)
            if out.suffix == "":
                out.mkdir(parents=True, exist_ok=True)
                out = out / "descriptors_tsne.png"
            result = tsne_plot(args.pool, args.selection, out, seed=args.seed)
        else:
            job = ExtractJob(
                out_dir=Path(args.out), seed=args.seed, backend=args.backend,
                model=args.model, device=args.device, batch_size=args.batch,
                dim=args.dim,
            )
            encoder = make_encoder(job.backend, job.model, job.device,
                                   job.batch_size, job.dim)
            if args.command == "images":
                result = extract_images(args.root, job, encoder)
            else:
                result = extract_descriptors([Path(f) for f in args.files], job, encoder)
    except ExtractError as e:
        sys.stderr.write(json.dumps({"error": "extract", "message": str(e)}) + "\n")
        return 1

    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
