"""Retrieval evaluation: query embedding, ranking, and recall metrics.

Queries combine the inverted pseudo word of the query image with the
modification text in a fixed template; candidates are ranked by cosine
similarity against a pre-encoded gallery index.  Recall@k counts the
queries whose target lands in the top k; the subset variant re-ranks
only a query's curated candidate set.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone, ImageBatch
from .data import EvalTriplet, preprocess_image
from .errors import InvalidInputError, QueryTooLong, StaleIndexError
from .inversion import InversionNetwork, build_inference_query, invert

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10, 50)
SUBSET_KS = (1, 2, 3)


@dataclass
class GalleryIndex:
    ids: list[str]
    features: np.ndarray  # (G, D) float32, unit rows
    fingerprint: str

    def __post_init__(self):
        if len(self.ids) != len(set(self.ids)):
            raise InvalidInputError("gallery ids must be unique")

    def __len__(self):
        return len(self.ids)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, ids=np.array(self.ids), features=self.features,
                 fingerprint=np.array(self.fingerprint))
        return path

    @classmethod
    def load(cls, path: str | Path, backbone: Backbone | None = None) -> "GalleryIndex":
        data = np.load(Path(path), allow_pickle=False)
        index = cls(ids=[str(i) for i in data["ids"]],
                    features=data["features"],
                    fingerprint=str(data["fingerprint"]))
        if backbone is not None and index.fingerprint != backbone.checksum():
            raise StaleIndexError(
                f"index at {path} was built with a different backbone; rebuild it"
            )
        return index


@dataclass
class RecallReport:
    metrics: dict[str, float]
    query_count: int
    per_category: dict[str, dict[str, float]] | None = None
    excluded: int = 0

    def as_dict(self) -> dict:
        out = {"metrics": self.metrics, "query_count": self.query_count,
               "excluded": self.excluded}
        if self.per_category:
            out["per_category"] = self.per_category
        return out


def build_index(gallery: dict[str, Path], backbone: Backbone,
                batch_size: int = 64) -> GalleryIndex:
    """Encode every gallery image; ids are kept in sorted order."""
    if not gallery:
        raise InvalidInputError("cannot index an empty gallery")
    ids = sorted(gallery)
    rows = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        pixels = np.stack([preprocess_image(gallery[i], backbone) for i in chunk])
        rows.append(backbone.encode_image(ImageBatch(pixels)).numpy())
    return GalleryIndex(ids=ids, features=np.concatenate(rows).astype(np.float32),
                        fingerprint=backbone.checksum())


def embed_query(triplet: EvalTriplet, net: InversionNetwork,
                backbone: Backbone) -> np.ndarray:
    """Invert the query image and splice it into the retrieval template.

    Query text that does not fit the context is shortened word by word
    with a warning.
    """
    pixels = preprocess_image(triplet.query_image, backbone)[None]
    feats = backbone.encode_image(ImageBatch(pixels))
    pseudo = invert(feats, net)[0]
    words = triplet.query_text.split()
    while True:
        try:
            query = build_inference_query(backbone, pseudo, " ".join(words))
            break
        except QueryTooLong:
            if not words:
                raise
            words = words[:-1]
            log.warning("query text truncated to %d words for target %s",
                        len(words), triplet.target_id)
    out = backbone.encode_embedded(query.embedded, query.end_position)
    return out.numpy()[0]


def rank(query: np.ndarray, index: GalleryIndex, k: int) -> list[str]:
    """Top-k gallery ids by descending inner product, ties by ascending id."""
    if k > len(index):
        log.warning("k=%d exceeds gallery size %d; clamping", k, len(index))
        k = len(index)
    scores = index.features @ np.asarray(query, dtype=np.float32)
    order = np.lexsort((np.array(index.ids), -scores))
    return [index.ids[int(i)] for i in order[:k]]


def recall_at_k(rankings: list[list[str]], triplets: list[EvalTriplet], k: int) -> float:
    """Percentage of queries whose target appears in the top k."""
    if not triplets:
        raise InvalidInputError("recall over zero queries is undefined")
    if len(rankings) != len(triplets):
        raise InvalidInputError("one ranking required per triplet")
    hits = sum(1 for ranked, t in zip(rankings, triplets) if t.target_id in ranked[:k])
    return 100.0 * hits / len(triplets)


def recall_subset_at_k(rankings: list[list[str]], triplets: list[EvalTriplet],
                       k: int) -> tuple[float, int]:
    """Recall@k within each query's curated candidate subset.

    The full ranking restricted to the subset preserves the similarity
    order, so no re-scoring is needed.  Triplets without a subset are
    excluded and counted; returns (percentage, excluded count).
    """
    hits, counted, excluded = 0, 0, 0
    for ranked, triplet in zip(rankings, triplets):
        if not triplet.subset_ids:
            excluded += 1
            continue
        members = set(triplet.subset_ids)
        restricted = [gid for gid in ranked if gid in members]
        counted += 1
        if triplet.target_id in restricted[:k]:
            hits += 1
    if counted == 0:
        raise InvalidInputError("no triplets carry candidate subsets")
    return 100.0 * hits / counted, excluded


def evaluate_benchmark(triplets: list[EvalTriplet], gallery: dict[str, Path],
                       net: InversionNetwork, backbone: Backbone,
                       ks: tuple[int, ...] = DEFAULT_KS,
                       subset_ks: tuple[int, ...] = SUBSET_KS,
                       exclude_query: bool = False,
                       index: GalleryIndex | None = None) -> RecallReport:
    """Embed every query, rank the gallery, and compute all recalls."""
    if not triplets:
        raise InvalidInputError("benchmark has no triplets")
    index = index or build_index(gallery, backbone)
    rankings = []
    for triplet in triplets:
        ranked = rank(embed_query(triplet, net, backbone), index, len(index))
        if exclude_query and triplet.reference_id:
            ranked = [gid for gid in ranked if gid != triplet.reference_id]
        rankings.append(ranked)
    metrics = {f"R@{k}": recall_at_k(rankings, triplets, k) for k in ks}
    has_subsets = any(t.subset_ids for t in triplets)
    excluded = 0
    if has_subsets:
        for k in subset_ks:
            value, excluded = recall_subset_at_k(rankings, triplets, k)
            metrics[f"Rs@{k}"] = value
    categories = sorted({t.category for t in triplets if t.category})
    per_category = None
    if categories:
        per_category = {}
        for cat in categories:
            pairs = [(r, t) for r, t in zip(rankings, triplets) if t.category == cat]
            cat_rankings, cat_triplets = [list(x) for x in zip(*pairs)]
            per_category[cat] = {f"R@{k}": recall_at_k(cat_rankings, cat_triplets, k)
                                 for k in ks}
    return RecallReport(metrics=metrics, query_count=len(triplets),
                        per_category=per_category, excluded=excluded)


def format_report_table(rows: list[tuple[str, RecallReport]]) -> str:
    """Aligned text table, one row per label (e.g. per tau value)."""
    if not rows:
        return "(no results)"
    metric_names = list(rows[0][1].metrics)
    header = ["run"] + metric_names + ["queries"]
    body = [[label] + [f"{report.metrics[m]:.1f}" for m in metric_names]
            + [str(report.query_count)] for label, report in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def report_table_csv(rows: list[tuple[str, RecallReport]]) -> str:
    if not rows:
        return ""
    metric_names = list(rows[0][1].metrics)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["run"] + metric_names + ["queries"])
    for label, report in rows:
        writer.writerow([label] + [f"{report.metrics[m]:.4f}" for m in metric_names]
                        + [report.query_count])
    return buf.getvalue()


def run_tau_ablation(taus: list[float], base_config, benchmark_root: str | Path,
                     benchmark_format: str = "fixture", split: str = "val",
                     backbone: Backbone | None = None,
                     out_dir: str | Path | None = None
                     ) -> list[tuple[float, RecallReport]]:
    """Train one model per threshold and evaluate each on the benchmark.

    Emits the results as an aligned text table and a CSV file when
    ``out_dir`` is given.
    """
    import dataclasses

    from .data import load_triplets
    from .inversion import load_checkpoint
    from .training import train

    results: list[tuple[float, RecallReport]] = []
    triplets, gallery = load_triplets(benchmark_root, benchmark_format, split)
    for tau in taus:
        config = dataclasses.replace(
            base_config, tau=tau,
            checkpoint_dir=str(Path(base_config.checkpoint_dir) / f"tau_{tau:g}"))
        from .backbone import create_backbone
        bb = backbone or create_backbone(config.backbone, config.weights_path)
        report = train(config, backbone=bb)
        net, _ = load_checkpoint(report.final_checkpoint, bb)
        results.append((tau, evaluate_benchmark(triplets, gallery, net, bb)))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = [(f"tau={tau:g}", rep) for tau, rep in results]
        (out_dir / "tau_ablation.txt").write_text(format_report_table(rows) + "\n",
                                                  encoding="utf-8")
        (out_dir / "tau_ablation.csv").write_text(report_table_csv(rows), encoding="utf-8")
        (out_dir / "tau_ablation.json").write_text(
            json.dumps({f"{tau:g}": rep.as_dict() for tau, rep in results}, indent=1),
            encoding="utf-8")
    return results


def emit_result_grid(triplets: list[EvalTriplet], rankings: list[list[str]],
                     gallery: dict[str, Path], out_path: str | Path,
                     top: int = 3) -> Path:
    """Render queries beside their top retrievals, target outlined.

    One row per query: the query image, then the top retrieved images
    left to right.  The ground-truth image gets a green frame, a wrong
    first hit a red one.  Unreadable images render as gray placeholders.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not triplets:
        raise InvalidInputError("nothing to render")
    rows, cols = len(triplets), top + 1
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows), squeeze=False)

    def show(ax, path, title, frame=None):
        try:
            from PIL import Image
            ax.imshow(Image.open(path).convert("RGB"))
        except Exception:
            ax.imshow(np.full((32, 32, 3), 0.6))
        ax.set_title(title, fontsize=7)
        ax.set_xticks([]), ax.set_yticks([])
        for spine in ax.spines.values():
            spine.set_visible(frame is not None)
            if frame:
                spine.set_color(frame)
                spine.set_linewidth(3)

    for r, (triplet, ranked) in enumerate(zip(triplets, rankings)):
        text = triplet.query_text if len(triplet.query_text) < 40 \
            else triplet.query_text[:37] + "..."
        show(axes[r][0], triplet.query_image, f"query: {text}")
        for c, gid in enumerate(ranked[:top], start=1):
            hit = gid == triplet.target_id
            frame = "green" if hit else ("red" if c == 1 else None)
            show(axes[r][c], gallery[gid], f"#{c} {gid}", frame)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
