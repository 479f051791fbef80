"""The trainable inversion network and query composition.

The inversion network maps an image feature to a pseudo word: a single
embedding vector that occupies one token slot in the text encoder.
Composition splices that vector into a token-embedding sequence, either
where a removed word used to sit, after a generic prompt, or inside the
retrieval template used at inference time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .backbone import Backbone, EmbeddedSequence, FeatureBatch, TokenSequence
from .errors import CheckpointError, ConfigError, InvalidInputError, QueryTooLong

CHECKPOINT_FORMAT = "cirmask-checkpoint/1"
PROMPT_TEMPLATE = "a photo of"


class QuerySource(enum.Enum):
    MASKED_PAIR = "masked_pair"
    PROMPT = "prompt"
    INFERENCE = "inference"


@dataclass
class ComposedQuery:
    """An embedded sequence with exactly one injected pseudo-word row."""

    embedded: EmbeddedSequence
    pseudo_position: int
    source: QuerySource

    @property
    def end_position(self) -> int:
        return self.embedded.end_position


class InversionNetwork(nn.Module):
    """Three fully connected layers mapping image features to pseudo words.

    Hidden width defaults to four times the output width when not set
    explicitly.  Initialization is the usual fan-in scaled uniform, but
    drawn from an explicit generator so runs are reproducible.
    """

    def __init__(self, input_dim: int, output_dim: int, hidden_dim: int | None = None,
                 dropout: float = 0.0, seed: int = 0):
        super().__init__()
        hidden_dim = hidden_dim or 4 * output_dim
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        self.dropout_rate = dropout
        self.fc1 = nn.Linear(input_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, hidden_dim)
        self.fc3 = nn.Linear(hidden_dim, output_dim)
        self.act = nn.GELU()
        self.drop = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self._seeded_init(seed)

    def _seeded_init(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for layer in (self.fc1, self.fc2, self.fc3):
            fan_in = layer.weight.shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.drop(self.act(self.fc1(x)))
        h = self.drop(self.act(self.fc2(h)))
        return self.fc3(h)


def invert(features: FeatureBatch, net: InversionNetwork) -> torch.Tensor:
    """Map a feature batch to pseudo words, one per row."""
    if features.vectors.shape[-1] != net.input_dim:
        raise ConfigError(
            f"inversion network expects {net.input_dim}-dim features, "
            f"got {features.vectors.shape[-1]}"
        )
    return net(features.vectors)


def compose_query(backbone: Backbone, masked_tokens: TokenSequence,
                  pseudo: torch.Tensor, position: int,
                  source: QuerySource = QuerySource.MASKED_PAIR) -> ComposedQuery:
    """Insert a pseudo word into an embedded sequence at ``position``.

    The insertion splices and shifts: the sequence grows by one row, so
    a query composed over a masked caption ends up the same length as
    the original caption when the removed word was a single token.
    """
    if pseudo.ndim != 1 or pseudo.shape[0] != backbone.embed_width:
        raise InvalidInputError(
            f"pseudo word must be a {backbone.embed_width}-dim vector, got {tuple(pseudo.shape)}"
        )
    if not (1 <= position <= masked_tokens.length - 1):
        raise InvalidInputError(
            f"insert position {position} outside sequence (length {masked_tokens.length})"
        )
    new_length = masked_tokens.length + 1
    if new_length > backbone.context_length:
        raise QueryTooLong(
            f"composing would need {new_length} positions, context is {backbone.context_length}"
        )
    base = backbone.embed_tokens(masked_tokens).embeddings
    rows = torch.cat([base[:position], pseudo.to(base.dtype)[None], base[position:-1]])
    return ComposedQuery(embedded=EmbeddedSequence(embeddings=rows, length=new_length),
                         pseudo_position=position, source=source)


def build_prompt_query(backbone: Backbone, pseudo: torch.Tensor) -> ComposedQuery:
    """Compose "a photo of <pseudo>", the alignment prompt for training."""
    tokens = backbone.tokenize(PROMPT_TEMPLATE)
    query = compose_query(backbone, tokens, pseudo, tokens.end_position,
                          source=QuerySource.PROMPT)
    return query


def build_inference_query(backbone: Backbone, pseudo: torch.Tensor,
                          query_text: str) -> ComposedQuery:
    """Compose the retrieval query "a photo of <pseudo> , <query text>"."""
    text = query_text.strip()
    full = f"{PROMPT_TEMPLATE} ," if not text else f"{PROMPT_TEMPLATE} , {text}"
    tokens = backbone.tokenize(full)
    if tokens.truncated:
        raise QueryTooLong(f"query text does not fit the context: {query_text!r}")
    comma_position = tokens.word_spans[3][0]
    return compose_query(backbone, tokens, pseudo, comma_position,
                         source=QuerySource.INFERENCE)


def save_checkpoint(path: str | Path, net: InversionNetwork, *, backbone_name: str,
                    config_hash: str = "", epoch: int = 0, step: int = 0,
                    optimizer: torch.optim.Optimizer | None = None) -> Path:
    """Write a self-describing checkpoint for the inversion network."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "state_dict": net.state_dict(),
        "input_dim": net.input_dim,
        "hidden_dim": net.hidden_dim,
        "output_dim": net.output_dim,
        "dropout": net.dropout_rate,
        "backbone": backbone_name,
        "config_hash": config_hash,
        "epoch": epoch,
        "step": step,
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, backbone: Backbone | None = None
                    ) -> tuple[InversionNetwork, dict]:
    """Load a checkpoint, optionally validating dims against a backbone."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a recognized checkpoint file: {path}")
    if backbone is not None:
        if (payload["input_dim"] != backbone.feature_width
                or payload["output_dim"] != backbone.embed_width):
            raise CheckpointError(
                f"checkpoint dims ({payload['input_dim']}->{payload['output_dim']}) do not "
                f"match backbone '{backbone.name}' "
                f"({backbone.feature_width}->{backbone.embed_width})"
            )
    net = InversionNetwork(payload["input_dim"], payload["output_dim"],
                           payload["hidden_dim"], dropout=payload.get("dropout", 0.0))
    net.load_state_dict(payload["state_dict"])
    return net, payload
