"""Frozen dual-encoder backbones behind one interface.

Every backbone exposes four encoding entry points: images to features,
text to features, text to token ids, and, crucially, a token-embedding
sequence to features.  The last one is what lets a pseudo word (a raw
embedding vector that has no token id) travel through the text encoder,
so gradients can flow from a retrieval loss back into the network that
produced the pseudo word.  Backbone weights are always frozen.

Two implementations ship here:

* ``StubBackbone``: tiny seeded random encoders (16-dim features, 8 px
  images, 16-token context).  Deterministic, differentiable, and fast,
  so the whole algorithmic test suite runs without model downloads.
* ``ClipBackbone``: a frozen CLIP dual encoder loaded through
  ``transformers``, with the text tower's forward pass replicated from
  the embedding level up so arbitrary rows can be injected.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ContractViolation, InvalidInputError

NORM_TOLERANCE = 1e-5

# CLIP's published preprocessing statistics.
CLIP_PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)

_CLIP_WEIGHT_IDS = {
    "vit-l-14": "openai/clip-vit-large-patch14",
    "vit-b-32": "openai/clip-vit-base-patch32",
}


@dataclass
class ImageBatch:
    """N preprocessed images, channels last, already mean/std normalized."""

    pixels: np.ndarray  # (N, H, W, 3) float32

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise InvalidInputError(f"expected (N, H, W, 3) pixels, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise InvalidInputError("empty image batch")
        self.pixels = arr

    def __len__(self):
        return self.pixels.shape[0]


@dataclass
class TokenSequence:
    """Token ids padded to the context length, plus word-level span info.

    ``word_spans`` maps each caption word index to its (first token
    position, token count) span, so a whole word can be removed or
    replaced even when it occupies several tokens.  Position 0 is the
    start symbol; the end symbol sits at ``length - 1``; everything
    after it is padding.
    """

    ids: np.ndarray  # (context_length,) int64
    length: int
    word_spans: dict[int, tuple[int, int]] = field(default_factory=dict)
    words: list[str] = field(default_factory=list)
    truncated: bool = False
    pad_id: int = 0

    @property
    def end_position(self) -> int:
        return self.length - 1


@dataclass
class EmbeddedSequence:
    """Pre-transformer token embeddings, one row per context position."""

    embeddings: torch.Tensor  # (context_length, D^W)
    length: int

    @property
    def end_position(self) -> int:
        return self.length - 1


@dataclass
class FeatureBatch:
    """N feature vectors in the shared image-text space."""

    vectors: torch.Tensor  # (N, D)
    normalized: bool = True

    def __len__(self):
        return self.vectors.shape[0]

    def require_normalized(self):
        if not self.normalized:
            raise ContractViolation("feature batch is not marked normalized")
        norms = self.vectors.detach().norm(dim=-1)
        if not torch.all((norms - 1.0).abs() <= NORM_TOLERANCE):
            raise ContractViolation(
                f"feature rows are not unit-normalized (norms in "
                f"[{norms.min().item():.6f}, {norms.max().item():.6f}])"
            )

    def numpy(self) -> np.ndarray:
        return self.vectors.detach().cpu().numpy()


def _l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class Backbone:
    """Shared behaviour for frozen dual encoders.

    Subclasses provide ``_encode_word`` (word -> token ids) plus the
    actual encoders; tokenization, span bookkeeping, and checksumming
    live here.
    """

    name: str = "backbone"
    context_length: int
    image_resolution: int
    embed_width: int    # token-embedding width D^W
    feature_width: int  # shared-space feature width D
    sos_id: int
    eos_id: int
    pad_id: int
    temperature: float
    pixel_mean: tuple[float, float, float]
    pixel_std: tuple[float, float, float]

    # -- tokenization ---------------------------------------------------

    def _encode_word(self, word: str) -> list[int]:
        raise NotImplementedError

    def tokenize(self, text: str) -> TokenSequence:
        """Tokenize whitespace-separated words, keeping per-word spans.

        Words are encoded one at a time and concatenated, which makes
        ``word_spans`` exact by construction.  Whole words that do not
        fit in the context are dropped and the sequence is flagged
        truncated.
        """
        if not text or not text.strip():
            raise InvalidInputError("cannot tokenize empty text")
        words = text.split()
        ids = [self.sos_id]
        spans: dict[int, tuple[int, int]] = {}
        kept: list[str] = []
        truncated = False
        for idx, word in enumerate(words):
            piece = self._encode_word(word)
            if len(ids) + len(piece) + 1 > self.context_length:
                truncated = True
                break
            spans[idx] = (len(ids), len(piece))
            ids.extend(piece)
            kept.append(word)
        ids.append(self.eos_id)
        length = len(ids)
        padded = np.full(self.context_length, self.pad_id, dtype=np.int64)
        padded[:length] = ids
        return TokenSequence(ids=padded, length=length, word_spans=spans,
                             words=kept, truncated=truncated, pad_id=self.pad_id)

    # -- encoding -------------------------------------------------------

    def _embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def embed_tokens(self, tokens: TokenSequence) -> EmbeddedSequence:
        """Look up the embedding-table row for every token position.

        No positional encoding is applied here; the encoder adds it
        internally, so rows can be freely swapped beforehand.
        """
        ids = torch.as_tensor(tokens.ids, dtype=torch.long)
        with torch.no_grad():
            rows = self._embed_ids(ids)
        return EmbeddedSequence(embeddings=rows, length=tokens.length)

    def encode_image(self, batch: ImageBatch) -> FeatureBatch:
        res = self.image_resolution
        _, h, w, _ = batch.pixels.shape
        if h != res or w != res:
            raise ConfigError(
                f"backbone '{self.name}' expects {res}x{res} input images, got {h}x{w}"
            )
        with torch.no_grad():
            feats = self._encode_image_tensor(torch.as_tensor(batch.pixels))
        return FeatureBatch(vectors=_l2_normalize(feats), normalized=True)

    def _encode_image_tensor(self, pixels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, tokens: TokenSequence | list[TokenSequence]) -> FeatureBatch:
        seqs = [tokens] if isinstance(tokens, TokenSequence) else list(tokens)
        ids = torch.as_tensor(np.stack([t.ids for t in seqs]), dtype=torch.long)
        ends = torch.as_tensor([t.end_position for t in seqs], dtype=torch.long)
        with torch.no_grad():
            feats = self._encode_text_ids(ids, ends)
        return FeatureBatch(vectors=_l2_normalize(feats), normalized=True)

    def _encode_text_ids(self, ids: torch.Tensor, ends: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_embedded(
        self,
        seq: EmbeddedSequence | list[EmbeddedSequence],
        end_position: int | list[int],
    ) -> FeatureBatch:
        """Encode token-embedding sequences, pooling at the end symbol.

        This path stays differentiable with respect to the input rows,
        so an injected pseudo-word row receives gradient even though
        the backbone weights themselves are frozen.
        """
        seqs = [seq] if isinstance(seq, EmbeddedSequence) else list(seq)
        ends = [end_position] if isinstance(end_position, int) else list(end_position)
        if len(ends) != len(seqs):
            raise InvalidInputError("one end position required per sequence")
        for s, e in zip(seqs, ends):
            if not (0 < e < s.embeddings.shape[0]):
                raise InvalidInputError(
                    f"end position {e} out of range for context {s.embeddings.shape[0]}"
                )
        stacked = torch.stack([s.embeddings for s in seqs])
        ends_t = torch.as_tensor(ends, dtype=torch.long)
        feats = self._encode_embedded_tensor(stacked, ends_t)
        return FeatureBatch(vectors=_l2_normalize(feats), normalized=True)

    def _encode_embedded_tensor(self, embeds: torch.Tensor, ends: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    # -- bookkeeping ------------------------------------------------------

    def weight_tensors(self) -> list[torch.Tensor]:
        raise NotImplementedError

    def checksum(self) -> str:
        """SHA-256 over all backbone weights; must not change during training."""
        digest = hashlib.sha256()
        for t in self.weight_tensors():
            digest.update(t.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


class StubBackbone(Backbone):
    """Seeded random dual encoder with tiny dimensions.

    The text core adds fixed position embeddings, averages the active
    rows through a tanh mixing layer, combines that with the row at the
    end symbol, and projects to the feature space.  Every active row
    influences the output, which is what the splice/gradient contracts
    need.  All weights come from one seeded generator and never change.
    """

    name = "stub"
    pixel_mean = (0.5, 0.5, 0.5)
    pixel_std = (0.5, 0.5, 0.5)

    def __init__(self, seed: int = 0, embed_width: int = 16, feature_width: int = 16,
                 context_length: int = 16, resolution: int = 8, vocab_size: int = 512,
                 dtype: torch.dtype = torch.float32):
        self.seed = seed
        self.embed_width = embed_width
        self.feature_width = feature_width
        self.context_length = context_length
        self.image_resolution = resolution
        self.vocab_size = vocab_size
        self.dtype = dtype
        self.sos_id = 1
        self.eos_id = 2
        self.pad_id = 0
        self.temperature = 0.07
        self.word_chunk = 4  # characters per token; longer words span several tokens

        gen = torch.Generator().manual_seed(seed)

        def draw(*shape, scale=1.0):
            return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale).to(dtype)

        pixel_dim = resolution * resolution * 3
        self.table = draw(vocab_size, embed_width)
        self.positions = draw(context_length, embed_width)
        self.w_img = draw(pixel_dim, feature_width, scale=pixel_dim ** -0.5)
        self.b_img = draw(feature_width, scale=0.5)
        self.w_mix = draw(embed_width, embed_width, scale=embed_width ** -0.5)
        self.w_out = draw(embed_width, feature_width, scale=embed_width ** -0.5)

    def to_dtype(self, dtype: torch.dtype) -> "StubBackbone":
        """Same weights in another precision (float64 for gradient checks)."""
        clone = StubBackbone(seed=self.seed, embed_width=self.embed_width,
                             feature_width=self.feature_width,
                             context_length=self.context_length,
                             resolution=self.image_resolution,
                             vocab_size=self.vocab_size, dtype=dtype)
        return clone

    def _encode_word(self, word: str) -> list[int]:
        word = word.lower()
        chunks = [word[i:i + self.word_chunk] for i in range(0, len(word), self.word_chunk)]
        span = self.vocab_size - 3
        return [3 + zlib.crc32(c.encode("utf-8")) % span for c in chunks]

    def _embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table[ids]

    def _encode_image_tensor(self, pixels: torch.Tensor) -> torch.Tensor:
        flat = pixels.reshape(pixels.shape[0], -1).to(self.dtype)
        return flat @ self.w_img + self.b_img

    def _text_core(self, embeds: torch.Tensor, ends: torch.Tensor) -> torch.Tensor:
        n, ctx, _ = embeds.shape
        x = embeds.to(self.dtype) + self.positions[:ctx]
        active = (torch.arange(ctx)[None, :] <= ends[:, None]).to(self.dtype)
        x = x * active[:, :, None]
        mixed = torch.tanh((x.sum(dim=1) / (ends + 1)[:, None].to(self.dtype)) @ self.w_mix)
        pooled = x[torch.arange(n), ends]
        return (pooled + mixed) @ self.w_out

    def _encode_text_ids(self, ids: torch.Tensor, ends: torch.Tensor) -> torch.Tensor:
        return self._text_core(self.table[ids], ends)

    def _encode_embedded_tensor(self, embeds: torch.Tensor, ends: torch.Tensor) -> torch.Tensor:
        return self._text_core(embeds, ends)

    def weight_tensors(self) -> list[torch.Tensor]:
        return [self.table, self.positions, self.w_img, self.b_img, self.w_mix, self.w_out]


class ClipBackbone(Backbone):
    """Frozen CLIP dual encoder adapted through ``transformers``.

    ``encode_text`` goes through the library's own forward pass, while
    ``encode_embedded`` rebuilds the same computation from the embedding
    level (position embeddings, causal self-attention, final layer norm,
    pooling at the end symbol, text projection).  The two must agree to
    1e-5 on plain token sequences; tests pin that equivalence.
    """

    def __init__(self, model, tokenizer=None, name: str = "clip"):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.name = name
        text_cfg = model.config.text_config
        vision_cfg = model.config.vision_config
        self.context_length = text_cfg.max_position_embeddings
        self.embed_width = text_cfg.hidden_size
        self.feature_width = model.config.projection_dim
        self.image_resolution = vision_cfg.image_size
        self.patch_grid = vision_cfg.image_size // vision_cfg.patch_size
        self.sos_id = text_cfg.bos_token_id
        self.eos_id = text_cfg.eos_token_id
        self.pad_id = 0  # pad with id 0 after the end symbol, matching the original model
        self.temperature = float(1.0 / self.model.logit_scale.exp().item())
        self.pixel_mean = CLIP_PIXEL_MEAN
        self.pixel_std = CLIP_PIXEL_STD

    @classmethod
    def from_pretrained(cls, name: str, weights_path: str | None = None,
                        eager_attention: bool = False) -> "ClipBackbone":
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover
            raise ConfigError("the 'transformers' package is required for CLIP backbones") from exc
        source = weights_path or _CLIP_WEIGHT_IDS.get(name)
        if source is None:
            raise ConfigError(f"unknown backbone '{name}' and no backbone.weights_path given")
        kwargs = {"attn_implementation": "eager"} if eager_attention else {}
        try:
            model = CLIPModel.from_pretrained(source, **kwargs)
            tokenizer = CLIPTokenizer.from_pretrained(source)
        except Exception as exc:
            raise ConfigError(
                f"could not load CLIP weights from '{source}'; set backbone.weights_path "
                f"to a local directory with the model files ({exc})"
            ) from exc
        return cls(model, tokenizer, name=name)

    def _encode_word(self, word: str) -> list[int]:
        if self.tokenizer is None:
            raise ConfigError(f"backbone '{self.name}' was built without a tokenizer")
        return self.tokenizer.encode(word, add_special_tokens=False)

    def _embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.model.text_model.embeddings.token_embedding(ids)

    def _encode_image_tensor(self, pixels: torch.Tensor) -> torch.Tensor:
        nchw = pixels.permute(0, 3, 1, 2).contiguous().float()
        return self.model.get_image_features(pixel_values=nchw).pooler_output

    def _encode_text_ids(self, ids: torch.Tensor, ends: torch.Tensor) -> torch.Tensor:
        del ends  # the library pools at the end symbol on its own
        return self.model.get_text_features(input_ids=ids).pooler_output

    def _encode_embedded_tensor(self, embeds: torch.Tensor, ends: torch.Tensor) -> torch.Tensor:
        from transformers.masking_utils import create_causal_mask

        tm = self.model.text_model
        hidden = tm.embeddings(inputs_embeds=embeds.float())
        mask = create_causal_mask(config=tm.config, inputs_embeds=hidden,
                                  attention_mask=None, past_key_values=None)
        encoded = tm.encoder(inputs_embeds=hidden, attention_mask=mask,
                             is_causal=True).last_hidden_state
        pooled = tm.final_layer_norm(encoded)[torch.arange(embeds.shape[0]), ends]
        return self.model.text_projection(pooled)

    def weight_tensors(self) -> list[torch.Tensor]:
        return [p for _, p in sorted(self.model.state_dict().items())]


def create_backbone(name: str, weights_path: str | None = None, seed: int = 0) -> Backbone:
    """Build the backbone selected by ``backbone.name``."""
    if name == "stub":
        return StubBackbone(seed=seed)
    if name in _CLIP_WEIGHT_IDS:
        return ClipBackbone.from_pretrained(name, weights_path)
    raise ConfigError(f"backbone.name must be one of 'stub', 'vit-l-14', 'vit-b-32'; got '{name}'")
