"""Command-line entry point.

One executable with subcommands; every run writes its fully resolved
config, provenance, and seed into a timestamped run directory so any
result can be reproduced from the echoed file.

Exit codes: 0 success, 1 expected failure (message on stderr), 2 usage
or configuration error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import SCHEMA, ResolvedConfig, resolve_config, train_config_from
from .errors import CirmaskError, ConfigError

log = logging.getLogger("cirmask")

SUBCOMMANDS = ("train", "evaluate", "retrieve", "preview-mask", "ablate-tau", "ingest")


def _split_overrides(args: list[str]) -> tuple[list[str], dict[str, str]]:
    """Pull ``--dotted.key value`` pairs out of the argument list."""
    rest, overrides = [], {}
    i = 0
    while i < len(args):
        token = args[i]
        if token.startswith("--") and "." in token:
            key = token[2:]
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            if i + 1 >= len(args):
                raise ConfigError(f"override '--{key}' needs a value")
            overrides[key] = args[i + 1]
            i += 2
        else:
            rest.append(token)
            i += 1
    return rest, overrides


def _make_run_dir(resolved: ResolvedConfig, argv: list[str]) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    run_dir = Path(resolved.get("output.dir")) / f"{stamp}-{resolved.hash()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved.echo(run_dir / "resolved_config.yaml")
    resolved.echo_provenance(run_dir / "config_provenance.yaml")
    meta = {"version": __version__, "argv": argv, "seed": resolved.get("seed"),
            "config_hash": resolved.hash(), "timestamp": stamp}
    with open(run_dir / "meta.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(meta, fh)
    return run_dir


def _backbone_from(resolved: ResolvedConfig):
    from .backbone import create_backbone
    return create_backbone(resolved.get("backbone.name"),
                           resolved.get("backbone.weights_path") or None,
                           seed=resolved.get("seed"))


def _cmd_train(args, overrides, argv) -> int:
    from .training import train
    resolved = resolve_config(args.config, overrides)
    run_dir = _make_run_dir(resolved, argv)
    config = train_config_from(resolved, checkpoint_dir=str(run_dir / "checkpoints"),
                               log_path=str(run_dir / "train_log.jsonl"))
    report = train(config, backbone=_backbone_from(resolved))
    summary = {
        "steps": report.steps,
        "epoch_loss_means": report.epoch_loss_means,
        "skip_counts": report.skip_counts,
        "dropped_records": report.drop_count,
        "wall_time_s": round(report.wall_time, 2),
        "final_checkpoint": str(report.final_checkpoint),
        "backbone_checksum": report.backbone_checksum,
    }
    with open(run_dir / "train_report.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
    print(f"run dir: {run_dir}")
    print(f"final checkpoint: {report.final_checkpoint}")
    print(f"epoch mean losses: {[round(m, 4) for m in report.epoch_loss_means]}")
    return 0


def _benchmark_for(args, resolved: ResolvedConfig, run_dir: Path):
    from .data import load_triplets
    root = args.benchmark_root or resolved.get("data.benchmark_root")
    if not root and args.benchmark == "fixture":
        from .fixtures import generate_triplet_fixture
        root = run_dir / "fixture-benchmark"
        generate_triplet_fixture(root, seed=resolved.get("seed"))
    if not root:
        raise ConfigError("data.benchmark_root (or --benchmark-root) is required")
    return load_triplets(root, args.benchmark, args.split, getattr(args, "category", None))


def _cmd_evaluate(args, overrides, argv) -> int:
    from .evaluation import evaluate_benchmark, format_report_table
    from .inversion import load_checkpoint
    if not args.checkpoint:
        raise ConfigError("missing required key '--checkpoint' (path to a trained model)")
    resolved = resolve_config(args.config, overrides)
    run_dir = _make_run_dir(resolved, argv)
    backbone = _backbone_from(resolved)
    net, _ = load_checkpoint(args.checkpoint, backbone)
    triplets, gallery = _benchmark_for(args, resolved, run_dir)
    ks = tuple(int(k) for k in args.k.split(","))
    exclude = args.exclude_query or (args.benchmark == "cirr" and not args.keep_query)
    report = evaluate_benchmark(triplets, gallery, net, backbone, ks=ks,
                                exclude_query=exclude)
    table = format_report_table([(args.benchmark, report)])
    print(table)
    if report.per_category:
        for cat, metrics in report.per_category.items():
            print(f"  {cat}: " + "  ".join(f"{k}={v:.1f}" for k, v in metrics.items()))
    with open(run_dir / "eval_report.json", "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=1)
    (run_dir / "eval_report.txt").write_text(table + "\n", encoding="utf-8")
    print(f"report written to {run_dir}")
    return 0


def _cmd_retrieve(args, overrides, argv) -> int:
    from .data import EvalTriplet
    from .evaluation import build_index, emit_result_grid, embed_query, rank
    from .inversion import load_checkpoint
    if not args.checkpoint:
        raise ConfigError("missing required key '--checkpoint' (path to a trained model)")
    resolved = resolve_config(args.config, overrides)
    run_dir = _make_run_dir(resolved, argv)
    backbone = _backbone_from(resolved)
    net, _ = load_checkpoint(args.checkpoint, backbone)
    gallery_dir = Path(args.gallery)
    if not gallery_dir.is_dir():
        raise ConfigError(f"--gallery must be a directory of images, got {gallery_dir}")
    gallery = {p.stem: p for p in sorted(gallery_dir.iterdir())
               if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".webp")}
    if not gallery:
        raise CirmaskError(f"no images found under {gallery_dir}")
    index = build_index(gallery, backbone)
    triplet = EvalTriplet(query_image=Path(args.image), query_text=args.text,
                          target_id="")
    vector = embed_query(triplet, net, backbone)
    ranked = rank(vector, index, min(args.top, len(index)))
    scores = dict(zip(index.ids, index.features @ vector))
    for place, gid in enumerate(ranked, start=1):
        print(f"{place:3d}. {gid}  score={scores[gid]:.4f}")
    if args.grid:
        emit_result_grid([triplet], [ranked], gallery, run_dir / args.grid, top=args.top)
        print(f"grid written to {run_dir / args.grid}")
    return 0


def _cmd_preview_mask(args, overrides, argv) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data import load_pairs, preprocess_image
    from .masking import build_bundle, create_relevance_provider, split_masks
    from .tagging import get_tagger

    resolved = resolve_config(args.config, overrides)
    run_dir = _make_run_dir(resolved, argv)
    backbone = _backbone_from(resolved)
    provider = create_relevance_provider(resolved.get("mask.relevance_provider"),
                                         seed=resolved.get("seed"),
                                         weights_path=resolved.get("backbone.weights_path") or None)
    tagger = get_tagger(resolved.get("mask.pos_tagger"))
    tau = resolved.get("mask.tau")

    if args.manifest:
        dataset = load_pairs(args.manifest, limit=max(args.count * 2, args.count + 2))
        samples = [(r.image_path, r.caption) for r in dataset.records[:args.count]]
    elif args.image and args.caption:
        samples = [(Path(args.image), args.caption)]
    else:
        raise ConfigError("preview-mask needs --manifest or both --image and --caption")

    rng = np.random.default_rng(resolved.get("seed"))
    rows = len(samples)
    fig, axes = plt.subplots(rows, 3, figsize=(8, 2.8 * rows), squeeze=False)
    rendered = 0
    for r, (path, caption) in enumerate(samples):
        pixels = preprocess_image(path, backbone)
        partner = pixels[::-1, ::-1].copy() if len(samples) == 1 else \
            preprocess_image(samples[int(rng.integers(len(samples)))][0], backbone)
        tokens = backbone.tokenize(caption)
        bundle = build_bundle(pixels, tokens, caption, partner, 0, provider, tau, tagger)
        relevance = provider.relevance_map(pixels, bundle.removed.word)
        masks = split_masks(relevance, tau)

        def undo(img):
            mean = np.asarray(backbone.pixel_mean)
            std = np.asarray(backbone.pixel_std)
            return np.clip(img * std + mean, 0, 1)

        axes[r][0].imshow(undo(pixels))
        axes[r][0].set_title(caption, fontsize=7)
        axes[r][1].imshow(relevance.scores, cmap="viridis", vmin=0, vmax=1)
        axes[r][1].set_title(f"relevance: {bundle.removed.word!r} "
                             f"(kept {int(masks.relevant.sum())}/{masks.relevant.size})",
                             fontsize=7)
        axes[r][2].imshow(undo(bundle.masked_image))
        axes[r][2].set_title("masked: " + " ".join(bundle.masked_tokens.words), fontsize=7)
        for ax in axes[r]:
            ax.set_xticks([]), ax.set_yticks([])
        rendered += 1
    fig.tight_layout()
    out = run_dir / args.out
    fig.savefig(out, dpi=110)
    plt.close(fig)
    print(f"wrote {out} ({rendered} samples, tau={tau})")
    return 0


def _cmd_ablate_tau(args, overrides, argv) -> int:
    from .evaluation import format_report_table, run_tau_ablation
    resolved = resolve_config(args.config, overrides)
    run_dir = _make_run_dir(resolved, argv)
    try:
        taus = [float(t) for t in args.taus.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--taus must be comma-separated floats, got {args.taus!r}") from None
    if not taus:
        raise ConfigError("--taus must name at least one threshold")
    for tau in taus:
        if not 0.0 <= tau <= 1.0:
            raise ConfigError(f"tau values must lie in [0, 1]; got {tau}")
    root = args.benchmark_root or resolved.get("data.benchmark_root")
    if not root and args.benchmark == "fixture":
        from .fixtures import generate_triplet_fixture
        root = run_dir / "fixture-benchmark"
        generate_triplet_fixture(root, seed=resolved.get("seed"))
    config = train_config_from(resolved, checkpoint_dir=str(run_dir / "checkpoints"))
    results = run_tau_ablation(taus, config, root, args.benchmark, args.split,
                               backbone=_backbone_from(resolved), out_dir=run_dir)
    print(format_report_table([(f"tau={t:g}", rep) for t, rep in results]))
    print(f"tables written to {run_dir}")
    return 0


def _cmd_ingest(args, overrides, argv) -> int:
    from .data import ingest_manifest
    del overrides, argv
    counts = ingest_manifest(args.manifest, args.out, args.cache_dir)
    print("  ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cirmask",
        description="composed image retrieval from masked image-text pair training")
    parser.add_argument("--version", action="version", version=f"cirmask {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="|".join(SUBCOMMANDS))

    p_train = sub.add_parser("train", help="train the inversion network")
    p_train.add_argument("--config", default=None)

    p_eval = sub.add_parser("evaluate", help="compute recall on a benchmark")
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--benchmark", choices=("cirr", "fashioniq", "fixture"),
                        default="fixture")
    p_eval.add_argument("--split", default="val")
    p_eval.add_argument("--category", default=None)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--benchmark-root", default=None)
    p_eval.add_argument("--k", default="1,5,10,50")
    p_eval.add_argument("--exclude-query", action="store_true",
                        help="drop each query's own image from its ranking")
    p_eval.add_argument("--keep-query", action="store_true",
                        help="keep the query image even for cirr")

    p_retr = sub.add_parser("retrieve", help="rank a gallery for one query")
    p_retr.add_argument("--config", default=None)
    p_retr.add_argument("--checkpoint", default=None)
    p_retr.add_argument("--image", required=True)
    p_retr.add_argument("--text", required=True)
    p_retr.add_argument("--gallery", required=True)
    p_retr.add_argument("--top", type=int, default=10)
    p_retr.add_argument("--grid", default=None, help="also render a result grid image")

    p_prev = sub.add_parser("preview-mask", help="visualize the masking pipeline")
    p_prev.add_argument("--config", default=None)
    p_prev.add_argument("--image", default=None)
    p_prev.add_argument("--caption", default=None)
    p_prev.add_argument("--manifest", default=None)
    p_prev.add_argument("--count", type=int, default=4)
    p_prev.add_argument("--out", default="mask_preview.png")

    p_abl = sub.add_parser("ablate-tau", help="train and evaluate over a tau grid")
    p_abl.add_argument("--config", default=None)
    p_abl.add_argument("--taus", default="0.2,0.3,0.4")
    p_abl.add_argument("--benchmark", choices=("cirr", "fashioniq", "fixture"),
                       default="fixture")
    p_abl.add_argument("--split", default="val")
    p_abl.add_argument("--benchmark-root", default=None)

    p_ing = sub.add_parser("ingest", help="materialize manifest images into the cache")
    p_ing.add_argument("--manifest", required=True)
    p_ing.add_argument("--out", required=True)
    p_ing.add_argument("--cache-dir", default=None)
    return parser


_HANDLERS = {
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "retrieve": _cmd_retrieve,
    "preview-mask": _cmd_preview_mask,
    "ablate-tau": _cmd_ablate_tau,
    "ingest": _cmd_ingest,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        cleaned, overrides = _split_overrides(argv)
        args = parser.parse_args(cleaned)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        return _HANDLERS[args.command](args, overrides, argv)
    except SystemExit as exc:  # argparse handles usage errors itself
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CirmaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():  # console_scripts hook
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
