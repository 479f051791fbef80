"""Synthetic desk-scale datasets: seeded colored shapes with template captions.

Every caption's first noun is the shape word, so the mask builder is
guaranteed to find a removable word, and every image is a deterministic
function of the seed.  Used by the offline test suite and by the
fixture benchmark of the evaluate command.

Run directly to write a fixture to disk::

    python3 -m cirmask.fixtures out_dir --pairs 256 --resolution 8 --seed 7
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ["circle", "square", "triangle", "ring", "cross", "diamond", "stripe", "dot"]

COLORS = {
    "red": (220, 50, 47), "green": (64, 160, 43), "blue": (38, 110, 210),
    "yellow": (228, 190, 20), "purple": (150, 60, 180), "orange": (235, 130, 30),
    "white": (238, 238, 230), "black": (25, 25, 28),
}

BACKGROUNDS = {
    "gray": (110, 115, 120), "teal": (30, 140, 140), "brown": (130, 90, 50),
    "pink": (230, 140, 170), "navy": (30, 40, 90),
}

CAPTION_TEMPLATES = [
    "a {color} {shape} on a {bg} background",
    "the {color} {shape} sits on a {bg} field",
    "one {color} {shape} over a {bg} backdrop",
]


def render_shape(shape: str, color: str, background: str, resolution: int,
                 jitter: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Draw one shape as a uint8 RGB array via coordinate-grid masks."""
    res = resolution
    cy = res / 2 - 0.5 + jitter[0] * res / 8
    cx = res / 2 - 0.5 + jitter[1] * res / 8
    r = res * 0.3
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        mask = dy ** 2 + dx ** 2 <= r ** 2
    elif shape == "square":
        mask = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif shape == "triangle":
        mask = (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    elif shape == "ring":
        d2 = dy ** 2 + dx ** 2
        mask = (d2 <= r ** 2) & (d2 >= (r * 0.5) ** 2)
    elif shape == "cross":
        w = max(res / 8, 1.0)
        mask = ((np.abs(dy) <= w) | (np.abs(dx) <= w)) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif shape == "diamond":
        mask = np.abs(dy) + np.abs(dx) <= r
    elif shape == "stripe":
        mask = np.abs(dy) <= max(res / 8, 1.0)
    elif shape == "dot":
        mask = dy ** 2 + dx ** 2 <= (r * 0.45) ** 2
    else:
        raise ValueError(f"unknown shape '{shape}'")
    img = np.empty((res, res, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[background]
    img[mask] = COLORS[color]
    return img


def generate_pair_fixture(out_dir: str | Path, count: int = 256, resolution: int = 8,
                          seed: int = 0) -> Path:
    """Write ``count`` image files plus a ``manifest.tsv`` of captions."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    shape_names = sorted(SHAPES)
    color_names = sorted(COLORS)
    bg_names = sorted(BACKGROUNDS)
    lines = []
    for i in range(count):
        shape = shape_names[int(rng.integers(len(shape_names)))]
        color = color_names[int(rng.integers(len(color_names)))]
        bg = bg_names[int(rng.integers(len(bg_names)))]
        template = CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))]
        jitter = tuple(rng.uniform(-1, 1, size=2))
        img = render_shape(shape, color, bg, resolution, jitter)
        rel = f"images/{i:05d}.png"
        Image.fromarray(img).save(out_dir / rel)
        caption = template.format(color=color, shape=shape, bg=bg)
        lines.append(f"{caption}\t{rel}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def generate_triplet_fixture(out_dir: str | Path, triplet_count: int = 40,
                             resolution: int = 8, seed: int = 0,
                             with_subsets: bool = True) -> Path:
    """Write a small retrieval benchmark in the fixture layout.

    Each query asks for the query image's shape in a different color;
    the gallery holds every (shape, color) combination on a fixed
    background, so exactly one gallery image is the right answer.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    gallery: dict[str, str] = {}
    ids = []
    for shape in sorted(SHAPES):
        for color in sorted(COLORS):
            gid = f"{shape}-{color}"
            rel = f"images/{gid}.png"
            Image.fromarray(render_shape(shape, color, "gray", resolution)).save(out_dir / rel)
            gallery[gid] = rel
            ids.append(gid)
    triplets = []
    color_names = sorted(COLORS)
    for _ in range(triplet_count):
        shape = sorted(SHAPES)[int(rng.integers(len(SHAPES)))]
        src, dst = rng.choice(len(color_names), size=2, replace=False)
        reference = f"{shape}-{color_names[src]}"
        target = f"{shape}-{color_names[dst]}"
        entry = {
            "query_image": gallery[reference],
            "query_text": f"change the color to {color_names[dst]}",
            "target_id": target,
            "reference_id": reference,
        }
        if with_subsets:
            decoys = [i for i in ids if i != target]
            picks = list(rng.choice(len(decoys), size=5, replace=False))
            subset = [target] + [decoys[int(p)] for p in picks]
            entry["subset_ids"] = [subset[int(j)] for j in rng.permutation(6)]
        triplets.append(entry)
    path = out_dir / "triplets.json"
    path.write_text(json.dumps({"gallery": gallery, "triplets": triplets}, indent=1),
                    encoding="utf-8")
    return path


def main(argv=None):
    parser = argparse.ArgumentParser(description="generate a synthetic shape fixture")
    parser.add_argument("out_dir")
    parser.add_argument("--pairs", type=int, default=256)
    parser.add_argument("--triplets", type=int, default=0)
    parser.add_argument("--resolution", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if args.pairs:
        manifest = generate_pair_fixture(args.out_dir, args.pairs, args.resolution, args.seed)
        print(f"wrote {manifest}")
    if args.triplets:
        path = generate_triplet_fixture(Path(args.out_dir) / "benchmark", args.triplets,
                                        args.resolution, args.seed)
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
