import json
from pathlib import Path

import numpy as np
import pytest
import torch

from cirmask.backbone import StubBackbone


@pytest.fixture
def stub():
    return StubBackbone(seed=0)


@pytest.fixture(scope="session")
def pair_fixture_dir(tmp_path_factory):
    """A small seeded shape dataset shared across tests."""
    from cirmask.fixtures import generate_pair_fixture
    root = tmp_path_factory.mktemp("pairs")
    generate_pair_fixture(root, count=48, resolution=8, seed=7)
    return root


@pytest.fixture(scope="session")
def triplet_fixture_dir(tmp_path_factory):
    from cirmask.fixtures import generate_triplet_fixture
    root = tmp_path_factory.mktemp("bench")
    generate_triplet_fixture(root, triplet_count=24, resolution=8, seed=3)
    return root


def build_tiny_clip(seed: int = 0, image_size: int = 32, patch_size: int = 16,
                    eager: bool = False):
    """A randomly initialized CLIP model small enough for unit tests.

    Exercises the real transformers code paths (tokenizer aside) without
    any download.
    """
    from transformers import CLIPConfig, CLIPModel
    config = CLIPConfig(
        text_config={
            "hidden_size": 32, "intermediate_size": 64, "num_hidden_layers": 2,
            "num_attention_heads": 2, "max_position_embeddings": 24,
            "vocab_size": 256, "bos_token_id": 254, "eos_token_id": 255,
            "pad_token_id": 0,
        },
        vision_config={
            "hidden_size": 32, "intermediate_size": 64, "num_hidden_layers": 2,
            "num_attention_heads": 2, "image_size": image_size,
            "patch_size": patch_size,
        },
        projection_dim=24,
    )
    if eager:
        config._attn_implementation = "eager"
        config.text_config._attn_implementation = "eager"
        config.vision_config._attn_implementation = "eager"
    torch.manual_seed(seed)
    return CLIPModel(config).eval()


def build_toy_clip_tokenizer(tmp_path: Path, words: list[str]):
    """Handcraft vocab/merges files so CLIPTokenizer works offline.

    Every listed word becomes a single token; unknown words fall back to
    character-level pieces.
    """
    from transformers import CLIPTokenizer
    vocab: dict[str, int] = {}
    for c in sorted(set("abcdefghijklmnopqrstuvwxyz0123456789,.")):
        vocab.setdefault(c, len(vocab))
        vocab.setdefault(c + "</w>", len(vocab))
    merges: list[tuple[str, str]] = []
    for word in words:
        pieces = list(word[:-1]) + [word[-1] + "</w>"]
        while len(pieces) > 1:
            pair = (pieces[0], pieces[1])
            if pair not in merges:
                merges.append(pair)
            pieces = [pieces[0] + pieces[1]] + pieces[2:]
            vocab.setdefault(pieces[0], len(vocab))
    vocab.setdefault("<|startoftext|>", len(vocab))
    vocab.setdefault("<|endoftext|>", len(vocab))
    (tmp_path / "vocab.json").write_text(json.dumps(vocab), encoding="utf-8")
    lines = ["#version: 0.2"] + [f"{a} {b}" for a, b in merges]
    (tmp_path / "merges.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return CLIPTokenizer(str(tmp_path / "vocab.json"), str(tmp_path / "merges.txt"))


def finite_difference_grads(params, loss_fn, h: float = 1e-4, sample: int | None = None,
                            rng: np.random.Generator | None = None):
    """Central-difference gradients, elementwise, as an autograd oracle.

    Yields (analytic, numeric) pairs; callers assert relative agreement.
    ``sample`` limits how many coordinates per tensor are probed.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        grad = p.grad.detach().view(-1)
        flat = p.data.view(-1)
        count = flat.numel()
        idxs = range(count) if sample is None else \
            rng.choice(count, size=min(sample, count), replace=False)
        for idx in idxs:
            idx = int(idx)
            orig = flat[idx].item()
            flat[idx] = orig + h
            plus = loss_fn()
            flat[idx] = orig - h
            minus = loss_fn()
            flat[idx] = orig
            yield grad[idx].item(), (plus - minus) / (2 * h)


def max_relative_error(pairs, floor: float = 1e-6) -> float:
    worst = 0.0
    for analytic, numeric in pairs:
        denom = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
