"""Dataset ingestion: caption/image pair manifests and CIR triplet benchmarks.

Training data arrives as a tab-separated manifest of caption and image
path, one pair per line (the distribution format of large web-scraped
pair sets).  Evaluation data arrives as triplet benchmarks in the
published CIRR and FashionIQ JSON layouts, or in this package's own
small fixture layout.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, InvalidInputError

CACHE_ENV_VAR = "CIRMASK_CACHE"


@dataclass
class PairRecord:
    image_path: Path
    caption: str


@dataclass
class DropRecord:
    locator: str
    reason: str


@dataclass
class PairDataset:
    records: list[PairRecord]
    drops: list[DropRecord] = field(default_factory=list)
    manifest: Path | None = None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx: int) -> PairRecord:
        return self.records[idx]


@dataclass
class EvalTriplet:
    query_image: Path | None
    query_text: str
    target_id: str
    subset_ids: list[str] | None = None
    category: str | None = None
    reference_id: str | None = None


def load_pairs(manifest: str | Path, limit: int | None = None) -> PairDataset:
    """Read a ``caption<TAB>image_path`` manifest.

    Records whose image path does not resolve are dropped and counted;
    a missing manifest is fatal.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise ConfigError(f"pair manifest not found: {manifest}")
    records: list[PairRecord] = []
    drops: list[DropRecord] = []
    with open(manifest, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if limit is not None and limit > 0 and len(records) >= limit:
                break
            if "\t" not in line:
                drops.append(DropRecord(f"{manifest}:{line_no}", "no tab separator"))
                continue
            caption, locator = line.split("\t", 1)
            caption, locator = caption.strip(), locator.strip()
            if not caption or not locator:
                drops.append(DropRecord(f"{manifest}:{line_no}", "empty caption or path"))
                continue
            path = Path(locator)
            if not path.is_absolute():
                path = manifest.parent / path
            if not path.exists():
                drops.append(DropRecord(locator, "image path does not exist"))
                continue
            records.append(PairRecord(image_path=path, caption=caption))
    return PairDataset(records=records, drops=drops, manifest=manifest)


def _read_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"benchmark file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path} at line {exc.lineno}: {exc.msg}") from exc


def _resolve_gallery_images(root: Path, names_to_paths: dict[str, str]) -> dict[str, Path]:
    return {name: (root / rel if not Path(rel).is_absolute() else Path(rel))
            for name, rel in names_to_paths.items()}


def _load_cirr(root: Path, split: str) -> tuple[list[EvalTriplet], dict[str, Path]]:
    captions = _read_json(root / f"cap.rc2.{split}.json")
    splits = _read_json(root / f"split.rc2.{split}.json")
    gallery = _resolve_gallery_images(root, splits)
    triplets = []
    for entry in captions:
        members = entry.get("img_set", {}).get("members")
        reference = entry["reference"]
        triplets.append(EvalTriplet(
            query_image=gallery.get(reference),
            query_text=entry["caption"],
            target_id=entry["target_hard"],
            subset_ids=list(members) if members else None,
            reference_id=reference,
        ))
    return triplets, gallery


def _load_fashioniq(root: Path, split: str, category: str | None
                    ) -> tuple[list[EvalTriplet], dict[str, Path]]:
    categories = [category] if category else ["dress", "shirt", "toptee"]
    triplets: list[EvalTriplet] = []
    gallery: dict[str, Path] = {}
    for cat in categories:
        names = _read_json(root / f"split.{cat}.{split}.json")
        cat_gallery = {name: root / "images" / f"{name}.png" for name in names}
        for name, path in cat_gallery.items():
            if not path.exists():
                alt = root / "images" / f"{name}.jpg"
                cat_gallery[name] = alt
        gallery.update(cat_gallery)
        for entry in _read_json(root / f"cap.{cat}.{split}.json"):
            text = " and ".join(c.strip() for c in entry["captions"] if c.strip())
            triplets.append(EvalTriplet(
                query_image=cat_gallery.get(entry["candidate"]),
                query_text=text,
                target_id=entry["target"],
                category=cat,
                reference_id=entry["candidate"],
            ))
    return triplets, gallery


def _load_fixture(root: Path) -> tuple[list[EvalTriplet], dict[str, Path]]:
    data = _read_json(root / "triplets.json")
    gallery = _resolve_gallery_images(root, data["gallery"])
    triplets = [EvalTriplet(
        query_image=root / t["query_image"],
        query_text=t["query_text"],
        target_id=t["target_id"],
        subset_ids=t.get("subset_ids"),
        category=t.get("category"),
        reference_id=t.get("reference_id"),
    ) for t in data["triplets"]]
    return triplets, gallery


def load_triplets(root: str | Path, fmt: str, split: str = "val",
                  category: str | None = None
                  ) -> tuple[list[EvalTriplet], dict[str, Path]]:
    """Load a triplet benchmark in one of the supported layouts."""
    root = Path(root)
    if not root.exists():
        raise ConfigError(f"benchmark directory not found: {root}")
    if fmt == "cirr":
        return _load_cirr(root, split)
    if fmt == "fashioniq":
        return _load_fashioniq(root, split, category)
    if fmt == "fixture":
        return _load_fixture(root)
    raise ConfigError(f"benchmark format must be 'cirr', 'fashioniq', or 'fixture'; got '{fmt}'")


def preprocess_image(source: bytes | str | Path | Image.Image, backbone) -> np.ndarray:
    """Decode, resize, center-crop, and channel-normalize one image.

    Output is (H, W, 3) float32 at the backbone's resolution, normalized
    with its published mean and std.  Undecodable input raises
    ``InvalidInputError`` so callers can drop and count the record.
    """
    try:
        if isinstance(source, Image.Image):
            img = source
        elif isinstance(source, bytes):
            img = Image.open(io.BytesIO(source))
        else:
            img = Image.open(source)
        img = img.convert("RGB")
    except Exception as exc:
        raise InvalidInputError(f"cannot decode image: {exc}") from exc
    res = backbone.image_resolution
    w, h = img.size
    scale = res / min(w, h)
    if (w, h) != (res, res):
        img = img.resize((max(res, round(w * scale)), max(res, round(h * scale))),
                         Image.BICUBIC)
        w, h = img.size
        left, top = (w - res) // 2, (h - res) // 2
        img = img.crop((left, top, left + res, top + res))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    mean = np.asarray(backbone.pixel_mean, dtype=np.float32)
    std = np.asarray(backbone.pixel_std, dtype=np.float32)
    return (arr - mean) / std


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle for one epoch; changes with the epoch index."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_batches(dataset: PairDataset, batch_size: int, seed: int, epoch: int):
    """Yield lists of records in seeded, epoch-dependent order."""
    if batch_size < 1:
        raise InvalidInputError("batch size must be at least 1")
    order = epoch_order(len(dataset), seed, epoch)
    for start in range(0, len(order), batch_size):
        yield [dataset[int(i)] for i in order[start:start + batch_size]]


def cache_root(explicit: str | Path | None = None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(CACHE_ENV_VAR, Path.home() / ".cache" / "cirmask"))


def ingest_manifest(manifest_in: str | Path, manifest_out: str | Path,
                    cache_dir: str | Path | None = None) -> dict[str, int]:
    """Materialize a manifest's images into the local cache.

    Remote URLs are downloaded, local paths copied; either way the
    output manifest points at immutable cached files named by the
    SHA-256 of their source locator.  Returns fetch/copy/failure counts.
    """
    manifest_in = Path(manifest_in)
    if not manifest_in.exists():
        raise ConfigError(f"pair manifest not found: {manifest_in}")
    cache = cache_root(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    counts = {"fetched": 0, "copied": 0, "cached": 0, "failed": 0}
    lines_out = []
    with open(manifest_in, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip() or "\t" not in line:
                continue
            caption, locator = line.split("\t", 1)
            locator = locator.strip()
            dest = cache / f"{hashlib.sha256(locator.encode('utf-8')).hexdigest()}.img"
            if dest.exists():
                counts["cached"] += 1
            elif locator.startswith(("http://", "https://")):
                try:
                    import requests
                    resp = requests.get(locator, timeout=30)
                    resp.raise_for_status()
                    dest.write_bytes(resp.content)
                    counts["fetched"] += 1
                except Exception:
                    counts["failed"] += 1
                    continue
            else:
                src = Path(locator)
                if not src.is_absolute():
                    src = manifest_in.parent / src
                if not src.exists():
                    counts["failed"] += 1
                    continue
                shutil.copyfile(src, dest)
                counts["copied"] += 1
            lines_out.append(f"{caption}\t{dest}")
    manifest_out = Path(manifest_out)
    manifest_out.parent.mkdir(parents=True, exist_ok=True)
    manifest_out.write_text("\n".join(lines_out) + ("\n" if lines_out else ""),
                            encoding="utf-8")
    return counts
