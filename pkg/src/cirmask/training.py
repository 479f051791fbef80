"""End-to-end training of the inversion network.

One step runs the whole chain: build masked image-text pairs for the
batch, encode the masked images, invert them to pseudo words, compose
and encode the queries, then take one optimizer step on the combined
contrastive loss.  Only the inversion network is updated; the backbone
is frozen, and a weight checksum taken before and after training must
match.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, FeatureBatch, ImageBatch, create_backbone
from .data import PairDataset, iter_batches, load_pairs, preprocess_image
from .errors import (CirmaskError, ConfigError, InvalidInputError,
                     NoMaskableWord, RelevanceUnavailable)
from .inversion import (InversionNetwork, build_prompt_query, compose_query,
                        invert, load_checkpoint, save_checkpoint)
from .losses import LossBundle, original_loss, query_target_loss, total_loss
from .masking import assign_partners, build_bundle, create_relevance_provider
from .tagging import get_tagger

log = logging.getLogger(__name__)

SKIP_REASONS = ("no_noun", "relevance_failed", "undecodable")


@dataclass
class TrainConfig:
    manifest: str
    checkpoint_dir: str
    batch_size: int = 128
    epochs: int = 10
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    alpha: float = 0.5
    tau: float = 0.3
    seed: int = 0
    backbone: str = "stub"
    weights_path: str | None = None
    relevance_provider: str = "stub"
    pos_tagger: str = "builtin"
    limit: int | None = None
    temperature: float | None = None  # None = the backbone's own scale
    hidden_dim: int | None = 3072     # None = 4 x embedding width
    dropout: float = 0.0
    grad_clip: float = 0.0
    log_path: str | None = None
    resume: str | None = None
    config_hash: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be at least 1")


@dataclass
class TrainReport:
    history: list[dict] = field(default_factory=list)
    epoch_loss_means: list[float] = field(default_factory=list)
    skip_counts: list[dict[str, int]] = field(default_factory=list)
    drop_count: int = 0
    wall_time: float = 0.0
    steps: int = 0
    final_checkpoint: Path | None = None
    backbone_checksum: str = ""


def train_step(images: np.ndarray, captions: list[str], net: InversionNetwork,
               backbone: Backbone, provider, tagger, optimizer, *,
               tau: float, alpha: float, temperature: float,
               grad_clip: float = 0.0,
               partner_rng: np.random.Generator | None = None
               ) -> tuple[LossBundle | None, dict[str, int]]:
    """One optimizer step over a preprocessed batch.

    Samples without a maskable noun or without a relevance map are
    skipped and counted; if nothing survives, the step is skipped with
    a warning and ``None`` is returned.
    """
    n = len(captions)
    skips = {reason: 0 for reason in SKIP_REASONS}
    partners = assign_partners(n, partner_rng)
    bundles, survivors = [], []
    for i, caption in enumerate(captions):
        tokens = backbone.tokenize(caption)
        try:
            bundle = build_bundle(images[i], tokens, caption, images[partners[i]],
                                  int(partners[i]), provider, tau, tagger)
        except NoMaskableWord as exc:
            skips["no_noun"] += 1
            log.debug("skipping sample %d: %s", i, exc)
            continue
        except RelevanceUnavailable as exc:
            skips["relevance_failed"] += 1
            log.debug("skipping sample %d: %s", i, exc)
            continue
        bundles.append(bundle)
        survivors.append(i)
    if not bundles:
        log.warning("entire batch unmaskable; skipping step")
        return None, skips

    masked_feats = backbone.encode_image(
        ImageBatch(np.stack([b.masked_image for b in bundles])))
    masked_pseudo = invert(masked_feats, net)
    queries = [compose_query(backbone, b.masked_tokens, masked_pseudo[j],
                             b.removed.token_position)
               for j, b in enumerate(bundles)]
    composed = backbone.encode_embedded([q.embedded for q in queries],
                                        [q.end_position for q in queries])

    image_feats = backbone.encode_image(ImageBatch(images[survivors]))
    qt = query_target_loss(image_feats, composed, temperature)

    pseudo = invert(image_feats, net)
    prompts = [build_prompt_query(backbone, pseudo[j]) for j in range(len(survivors))]
    prompt_feats = backbone.encode_embedded([p.embedded for p in prompts],
                                            [p.end_position for p in prompts])
    org = original_loss(image_feats, prompt_feats, temperature)

    bundle = total_loss(qt, org, alpha)
    optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(net.parameters(), grad_clip)
    optimizer.step()
    return bundle, skips


def _load_batch_images(records, backbone) -> tuple[np.ndarray | None, list[str], int]:
    pixels, captions, dropped = [], [], 0
    for rec in records:
        try:
            pixels.append(preprocess_image(rec.image_path, backbone))
        except InvalidInputError as exc:
            log.warning("dropping %s: %s", rec.image_path, exc)
            dropped += 1
            continue
        captions.append(rec.caption)
    if not pixels:
        return None, [], dropped
    return np.stack(pixels), captions, dropped


def train(config: TrainConfig, backbone: Backbone | None = None,
          dataset: PairDataset | None = None) -> TrainReport:
    """Run the full training loop and return its report.

    Deterministic given the config: data order, partner assignment, and
    network initialization all derive from ``config.seed``, so two runs
    with the same config produce identical checkpoints.
    """
    started = time.time()
    backbone = backbone or create_backbone(config.backbone, config.weights_path)
    dataset = dataset or load_pairs(config.manifest, config.limit)
    if len(dataset) == 0:
        raise ConfigError(f"no usable records in {config.manifest}")
    provider = create_relevance_provider(config.relevance_provider, seed=config.seed,
                                         weights_path=config.weights_path)
    tagger = get_tagger(config.pos_tagger)
    temperature = config.temperature or backbone.temperature

    ckpt_dir = Path(config.checkpoint_dir)
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        probe = ckpt_dir / ".write-probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"checkpoint dir not writable: {ckpt_dir} ({exc})") from exc

    net = InversionNetwork(backbone.feature_width, backbone.embed_width,
                           config.hidden_dim, dropout=config.dropout, seed=config.seed)
    optimizer = torch.optim.AdamW(net.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    start_epoch, global_step = 0, 0
    if config.resume:
        net, payload = load_checkpoint(config.resume, backbone)
        optimizer = torch.optim.AdamW(net.parameters(), lr=config.learning_rate,
                                      weight_decay=config.weight_decay)
        if "optimizer_state" in payload:
            optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"]
        global_step = payload["step"]
        log.info("resumed from %s at epoch %d, step %d", config.resume,
                 start_epoch, global_step)

    checksum_before = backbone.checksum()
    report = TrainReport(backbone_checksum=checksum_before)
    log_file = open(config.log_path, "a", encoding="utf-8") if config.log_path else None

    try:
        for epoch in range(start_epoch, config.epochs):
            epoch_totals: list[float] = []
            epoch_skips = {reason: 0 for reason in SKIP_REASONS}
            for records in iter_batches(dataset, config.batch_size, config.seed, epoch):
                images, captions, dropped = _load_batch_images(records, backbone)
                epoch_skips["undecodable"] += dropped
                report.drop_count += dropped
                if images is None:
                    continue
                partner_rng = np.random.default_rng([config.seed, epoch, global_step])
                bundle, skips = train_step(
                    images, captions, net, backbone, provider, tagger, optimizer,
                    tau=config.tau, alpha=config.alpha, temperature=temperature,
                    grad_clip=config.grad_clip, partner_rng=partner_rng)
                for reason, count in skips.items():
                    epoch_skips[reason] += count
                if bundle is None:
                    continue
                global_step += 1
                record = {"step": global_step, "epoch": epoch, **bundle.as_dict()}
                report.history.append(record)
                epoch_totals.append(record["total"])
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
            report.skip_counts.append(epoch_skips)
            mean_total = float(np.mean(epoch_totals)) if epoch_totals else float("nan")
            report.epoch_loss_means.append(mean_total)
            skipped = sum(epoch_skips.values())
            log.info("epoch %d: mean total %.4f over %d steps (%d samples skipped)",
                     epoch, mean_total, len(epoch_totals), skipped)
            report.final_checkpoint = save_checkpoint(
                ckpt_dir / f"epoch_{epoch:03d}.pt", net,
                backbone_name=backbone.name, config_hash=config.config_hash,
                epoch=epoch + 1, step=global_step, optimizer=optimizer)
            save_checkpoint(ckpt_dir / "latest.pt", net, backbone_name=backbone.name,
                            config_hash=config.config_hash, epoch=epoch + 1,
                            step=global_step, optimizer=optimizer)
    finally:
        if log_file:
            log_file.close()

    checksum_after = backbone.checksum()
    if checksum_after != checksum_before:
        raise CirmaskError("backbone weights changed during training")
    report.steps = global_step
    report.wall_time = time.time() - started
    return report
