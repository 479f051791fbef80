"""Masked image-text pair construction.

One training sample is masked in two complementary ways: the first noun
is deleted from the caption, and the image keeps only the patches whose
relevance to that noun clears a threshold, with everything else filled
in from a partner image of the same batch.  The caption then lacks the
word while the image retains the matching visual evidence, which is the
query/target asymmetry the retrieval loss trains on.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import TokenSequence
from .errors import (ConfigError, InvalidInputError, NoMaskableWord,
                     RelevanceUnavailable)
from .tagging import get_tagger


@dataclass
class RemovedWord:
    word: str
    word_index: int      # position among caption words
    token_position: int  # first token of the word's span
    token_count: int     # span length in tokens


@dataclass
class RelevanceMap:
    scores: np.ndarray  # (P, P) floats in [0, 1]
    word: str

    @property
    def grid(self) -> int:
        return self.scores.shape[0]


@dataclass
class BinaryMasks:
    relevant: np.ndarray    # (P, P) uint8
    irrelevant: np.ndarray  # complement of relevant


@dataclass
class MaskedPairBundle:
    masked_image: np.ndarray  # (H, W, 3)
    masked_tokens: TokenSequence
    removed: RemovedWord
    partner_index: int


def select_first_noun(text: str, tokens: TokenSequence, tagger=None) -> RemovedWord:
    """Pick the first word the tagger marks as a noun, with its token span.

    Raises ``NoMaskableWord`` when the caption has none (the sample is
    skipped and counted upstream rather than substituted).
    """
    if not text or not text.split():
        raise InvalidInputError("caption has no words")
    tagger = tagger or get_tagger()
    tags = tagger.tag(tokens.words)
    for idx, tag in enumerate(tags):
        if tag == "NOUN" and idx in tokens.word_spans:
            pos, count = tokens.word_spans[idx]
            return RemovedWord(word=tokens.words[idx], word_index=idx,
                               token_position=pos, token_count=count)
    raise NoMaskableWord(f"no noun found in: {text!r}")


def mask_text(tokens: TokenSequence, removed: RemovedWord) -> TokenSequence:
    """Delete the removed word's token span and close the gap.

    Word spans after the gap shift left; word indices past the removed
    word drop by one.  The removal position is kept on ``removed`` so
    the pseudo word can later be inserted exactly where the word was.
    """
    pos, count = removed.token_position, removed.token_count
    if pos < 1 or count < 1 or pos + count > tokens.length - 1:
        raise InvalidInputError(f"token span ({pos}, {count}) out of sequence bounds")
    ids = np.concatenate([tokens.ids[:pos], tokens.ids[pos + count:],
                          np.full(count, tokens.pad_id, dtype=tokens.ids.dtype)])
    spans: dict[int, tuple[int, int]] = {}
    words: list[str] = []
    for idx in sorted(tokens.word_spans):
        if idx == removed.word_index:
            continue
        first, n = tokens.word_spans[idx]
        if first > pos:
            first -= count
        spans[idx if idx < removed.word_index else idx - 1] = (first, n)
        words.append(tokens.words[idx])
    return TokenSequence(ids=ids, length=tokens.length - count, word_spans=spans,
                         words=words, truncated=tokens.truncated, pad_id=tokens.pad_id)


def _minmax(scores: np.ndarray) -> np.ndarray:
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo <= 1e-12:
        return np.zeros_like(scores, dtype=np.float64)
    return (scores - lo) / (hi - lo)


class StubRelevance:
    """Deterministic pseudo-relevance from a stable hash of (image, word).

    Good enough to exercise every masking path without a vision model;
    the same inputs always produce the same map.
    """

    def __init__(self, seed: int = 0, grid: int = 4):
        self.seed = seed
        self.grid = grid

    def relevance_map(self, image: np.ndarray, word: str) -> RelevanceMap:
        if not word:
            raise InvalidInputError("relevance word must be non-empty")
        fingerprint = zlib.crc32(np.ascontiguousarray(image, dtype=np.float32).tobytes())
        key = zlib.crc32(word.lower().encode("utf-8"), fingerprint)
        rng = np.random.default_rng([self.seed, key])
        scores = _minmax(rng.random((self.grid, self.grid)))
        return RelevanceMap(scores=scores, word=word)


class GradientAttentionRelevance:
    """Word-conditioned patch relevance from a frozen CLIP vision tower.

    Scores each patch by gradient-weighted attention of the final
    transformer block: the similarity between the image and the text
    "a photo of <word>" is differentiated with respect to the last
    block's attention map, the (gradient * attention) product is
    clamped to non-negative and averaged over heads, and the row of the
    class token gives one score per patch.
    """

    prompt = "a photo of {}"

    def __init__(self, backbone):
        # Needs eager attention so attention maps stay in the autograd graph.
        self.backbone = backbone
        self.model = backbone.model
        self.grid = backbone.patch_grid

    def relevance_map(self, image: np.ndarray, word: str) -> RelevanceMap:
        if not word:
            raise InvalidInputError("relevance word must be non-empty")
        try:
            tokens = self.backbone.tokenize(self.prompt.format(word))
            text_feat = self.backbone.encode_text(tokens).vectors
            pixels = torch.as_tensor(image, dtype=torch.float32)[None].permute(0, 3, 1, 2)
            # weights are frozen, so the pixels must carry the autograd graph
            pixels = pixels.requires_grad_(True)
            out = self.model.vision_model(pixel_values=pixels, output_attentions=True)
            image_feat = self.model.visual_projection(out.pooler_output)
            image_feat = image_feat / image_feat.norm(dim=-1, keepdim=True)
            sim = (image_feat * text_feat).sum()
            attn = out.attentions[-1]
            grad = torch.autograd.grad(sim, attn)[0]
            cam = (grad * attn).clamp(min=0).mean(dim=1)  # average heads
            patch_scores = cam[0, 0, 1:]  # class-token row, patch columns
        except Exception as exc:
            raise RelevanceUnavailable(f"relevance failed for word {word!r}: {exc}") from exc
        scores = _minmax(patch_scores.detach().numpy().reshape(self.grid, self.grid))
        return RelevanceMap(scores=scores, word=word)


def create_relevance_provider(name: str, backbone=None, seed: int = 0,
                              weights_path: str | None = None):
    """Build the provider selected by ``mask.relevance_provider``."""
    if name == "stub":
        return StubRelevance(seed=seed)
    if name == "gradient-attention":
        if backbone is None:
            from .backbone import ClipBackbone
            backbone = ClipBackbone.from_pretrained("vit-b-32", weights_path,
                                                    eager_attention=True)
        return GradientAttentionRelevance(backbone)
    raise ConfigError(
        f"mask.relevance_provider must be 'stub' or 'gradient-attention'; got '{name}'"
    )


def split_masks(relevance: RelevanceMap, tau: float) -> BinaryMasks:
    """Threshold the map into complementary relevant/irrelevant masks.

    The comparison is inclusive, so tau = 0 marks everything relevant
    (image untouched downstream) and tau just above the maximum marks
    nothing.
    """
    if not (0.0 <= tau <= 1.0):
        raise ConfigError(f"mask.tau must be within [0, 1]; got {tau}")
    relevant = (relevance.scores >= tau).astype(np.uint8)
    return BinaryMasks(relevant=relevant, irrelevant=1 - relevant)


def mix_images(own: np.ndarray, partner: np.ndarray, masks: BinaryMasks) -> np.ndarray:
    """Compose a masked image patch by patch.

    Patches keep the pixels of ``own`` where the mask is relevant and
    take the partner's pixels elsewhere, so the output preserves the
    regions tied to the removed word and replaces the rest.
    """
    if own.shape != partner.shape:
        raise InvalidInputError(f"image shapes differ: {own.shape} vs {partner.shape}")
    h, w = own.shape[:2]
    p = masks.relevant.shape[0]
    if h % p or w % p:
        raise InvalidInputError(f"image size {h}x{w} is not divisible by patch grid {p}")
    keep = np.kron(masks.relevant, np.ones((h // p, w // p), dtype=own.dtype))
    if own.ndim == 3:
        keep = keep[:, :, None]
    return own * keep + partner * (1 - keep)


def assign_partners(n: int, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Random derangement pairing each sample with another batch member.

    Sattolo's algorithm yields a uniformly random cyclic permutation,
    which has no fixed points for n > 1.  A batch of one maps to itself
    (masked regions then fall back to the sample's own pixels).
    """
    if n < 1:
        raise InvalidInputError("batch size must be at least 1")
    if n == 1:
        return np.array([0])
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def build_bundle(image: np.ndarray, tokens: TokenSequence, caption: str,
                 partner_image: np.ndarray, partner_index: int,
                 provider, tau: float, tagger=None) -> MaskedPairBundle:
    """Run the full per-sample masking chain.

    Propagates ``NoMaskableWord`` / ``RelevanceUnavailable`` so callers
    can skip and count the sample.
    """
    removed = select_first_noun(caption, tokens, tagger)
    relevance = provider.relevance_map(image, removed.word)
    masks = split_masks(relevance, tau)
    masked_image = mix_images(image, partner_image, masks)
    masked_tokens = mask_text(tokens, removed)
    return MaskedPairBundle(masked_image=masked_image, masked_tokens=masked_tokens,
                            removed=removed, partner_index=partner_index)
