"""Masking pipeline: noun selection, text/image masking, partner assignment."""

import numpy as np
import pytest
import torch

from cirmask.backbone import StubBackbone
from cirmask.errors import (ConfigError, InvalidInputError, NoMaskableWord,
                            RelevanceUnavailable)
from cirmask.masking import (BinaryMasks, GradientAttentionRelevance,
                             RelevanceMap, StubRelevance, assign_partners,
                             build_bundle, create_relevance_provider,
                             mask_text, mix_images, select_first_noun,
                             split_masks)
from cirmask.tagging import LexiconTagger, get_tagger

from conftest import build_tiny_clip, build_toy_clip_tokenizer


class TestSelectFirstNoun:
    def test_leading_noun(self, stub):
        text = "penguins on a pebble beach"
        removed = select_first_noun(text, stub.tokenize(text))
        assert removed.word == "penguins"
        assert removed.word_index == 0
        assert removed.token_position == 1

    def test_no_noun_raises(self, stub):
        with pytest.raises(NoMaskableWord):
            select_first_noun("run fast", stub.tokenize("run fast"))

    def test_bundled_tagger_snapshot(self, stub):
        # pinned output of the bundled tagger for a noun-later caption
        text = "on a pebble beach"
        removed = select_first_noun(text, stub.tokenize(text))
        assert removed.word == "pebble"
        assert removed.word_index == 2

    def test_empty_caption(self, stub):
        with pytest.raises(InvalidInputError):
            select_first_noun("", stub.tokenize("placeholder"))


class TestLexiconTagger:
    def test_function_words_and_verbs_excluded(self):
        tagger = LexiconTagger()
        tags = tagger.tag(["the", "dog", "is", "running", "quickly"])
        assert tags == ["OTHER", "NOUN", "OTHER", "OTHER", "OTHER"]

    def test_punctuation_stripped(self):
        assert LexiconTagger().tag(["beach.", ",", "42"]) == ["NOUN", "OTHER", "OTHER"]

    def test_ly_nouns_kept(self):
        assert LexiconTagger().tag(["butterfly", "slowly"]) == ["NOUN", "OTHER"]

    def test_unknown_tagger_rejected(self):
        with pytest.raises(ConfigError):
            get_tagger("stanford")


class TestMaskText:
    def test_removal_matches_retokenization(self, stub):
        text = "penguins on a pebble beach"
        toks = stub.tokenize(text)
        removed = select_first_noun(text, toks)
        masked = mask_text(toks, removed)
        again = stub.tokenize("on a pebble beach")
        assert np.array_equal(masked.ids, again.ids)
        assert masked.word_spans == again.word_spans
        assert masked.words == again.words
        assert len(masked.word_spans) == len(toks.word_spans) - 1

    def test_removing_only_word(self, stub):
        toks = stub.tokenize("cat")
        removed = select_first_noun("cat", toks)
        masked = mask_text(toks, removed)
        assert masked.length == 2
        assert masked.ids[0] == stub.sos_id
        assert masked.ids[1] == stub.eos_id
        assert masked.words == []

    def test_splice_back_restores_embedded_sequence(self, stub):
        text = "a dog under the tree"
        toks = stub.tokenize(text)
        removed = select_first_noun(text, toks)
        masked = mask_text(toks, removed)
        original = stub.embed_tokens(toks).embeddings
        base = stub.embed_tokens(masked).embeddings
        span = original[removed.token_position:
                        removed.token_position + removed.token_count]
        rebuilt = torch.cat([base[:removed.token_position], span,
                             base[removed.token_position:-removed.token_count]])
        assert torch.equal(rebuilt, original)

    def test_out_of_bounds_span(self, stub):
        from cirmask.masking import RemovedWord
        toks = stub.tokenize("a dog")
        with pytest.raises(InvalidInputError):
            mask_text(toks, RemovedWord("dog", 1, toks.length - 1, 2))


class TestRelevanceProviders:
    def test_stub_is_deterministic(self):
        provider = StubRelevance(seed=4, grid=4)
        img = np.random.default_rng(0).normal(size=(8, 8, 3)).astype(np.float32)
        a = provider.relevance_map(img, "dog")
        b = provider.relevance_map(img, "dog")
        assert np.array_equal(a.scores, b.scores)
        c = provider.relevance_map(img, "cat")
        assert not np.array_equal(a.scores, c.scores)

    def test_stub_range(self):
        provider = StubRelevance(seed=0, grid=7)
        img = np.zeros((14, 14, 3), dtype=np.float32)
        scores = provider.relevance_map(img, "dog").scores
        assert scores.shape == (7, 7)
        assert scores.min() >= 0.0 and scores.max() <= 1.0

    def test_empty_word_rejected(self):
        with pytest.raises(InvalidInputError):
            StubRelevance().relevance_map(np.zeros((8, 8, 3), dtype=np.float32), "")

    def test_constant_map_normalizes_to_zero(self):
        from cirmask.masking import _minmax
        assert np.all(_minmax(np.full((3, 3), 0.7)) == 0.0)

    def test_gradient_attention_grid_formula(self):
        # 224 px images with 32 px patches split into a 7x7 grid
        from cirmask.backbone import ClipBackbone
        model = build_tiny_clip(seed=0, image_size=224, patch_size=32, eager=True)
        backbone = ClipBackbone(model, tokenizer=None, name="tiny-b32")
        provider = GradientAttentionRelevance(backbone)
        assert provider.grid == 7

    def test_gradient_attention_map(self, tmp_path):
        from cirmask.backbone import ClipBackbone
        model = build_tiny_clip(seed=0, image_size=32, patch_size=16, eager=True)
        tok = build_toy_clip_tokenizer(tmp_path, ["a", "photo", "of", "dog"])
        backbone = ClipBackbone(model, tokenizer=tok, name="tiny-b32")
        backbone.sos_id, backbone.eos_id = tok.bos_token_id, tok.eos_token_id
        provider = GradientAttentionRelevance(backbone)
        img = np.random.default_rng(0).normal(size=(32, 32, 3)).astype(np.float32)
        rmap = provider.relevance_map(img, "dog")
        assert rmap.scores.shape == (2, 2)
        assert np.isfinite(rmap.scores).all()
        assert rmap.scores.min() >= 0.0 and rmap.scores.max() <= 1.0
        again = provider.relevance_map(img, "dog")
        assert np.array_equal(rmap.scores, again.scores)

    def test_unknown_provider(self):
        with pytest.raises(ConfigError):
            create_relevance_provider("grad-cam")


class TestSplitMasks:
    def test_given_grid(self):
        rmap = RelevanceMap(np.array([[0.1, 0.4], [0.3, 0.9]]), word="w")
        masks = split_masks(rmap, 0.3)
        assert np.array_equal(masks.relevant, [[0, 1], [1, 1]])
        assert np.array_equal(masks.irrelevant, [[1, 0], [0, 0]])

    def test_tau_zero_keeps_everything(self):
        rmap = RelevanceMap(np.random.default_rng(0).random((4, 4)), word="w")
        assert split_masks(rmap, 0.0).relevant.all()

    def test_tau_one_with_submaximal_scores(self):
        rmap = RelevanceMap(np.full((3, 3), 0.6), word="w")
        masks = split_masks(rmap, 1.0)
        assert not masks.relevant.any()
        assert masks.irrelevant.all()

    def test_invalid_tau(self):
        rmap = RelevanceMap(np.zeros((2, 2)), word="w")
        for tau in (-0.1, 1.5):
            with pytest.raises(ConfigError):
                split_masks(rmap, tau)

    def test_complementarity_and_monotonicity(self):
        rng = np.random.default_rng(42)
        taus = np.round(np.arange(0.0, 1.01, 0.1), 2)
        for _ in range(50):
            rmap = RelevanceMap(rng.random((7, 7)), word="w")
            previous = None
            for tau in taus:
                masks = split_masks(rmap, float(tau))
                assert np.array_equal(masks.relevant + masks.irrelevant,
                                      np.ones((7, 7), dtype=np.uint8))
                if previous is not None:
                    # raising tau can only shrink the relevant set
                    assert np.all(previous >= masks.relevant)
                previous = masks.relevant


class TestMixImages:
    def _masks(self, relevant):
        relevant = np.asarray(relevant, dtype=np.uint8)
        return BinaryMasks(relevant=relevant, irrelevant=1 - relevant)

    def test_identities(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 8, 3)).astype(np.float32)
        y = rng.normal(size=(8, 8, 3)).astype(np.float32)
        ones = self._masks(np.ones((4, 4)))
        zeros = self._masks(np.zeros((4, 4)))
        some = self._masks(rng.integers(0, 2, size=(4, 4)))
        assert np.array_equal(mix_images(x, y, ones), x)
        assert np.array_equal(mix_images(x, y, zeros), y)
        assert np.array_equal(mix_images(x, x, some), x)

    def test_single_relevant_patch(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 8, 3)).astype(np.float32)
        y = rng.normal(size=(8, 8, 3)).astype(np.float32)
        relevant = np.zeros((4, 4), dtype=np.uint8)
        relevant[1, 2] = 1
        mixed = mix_images(x, y, self._masks(relevant))
        # pixel-by-pixel oracle: one 2x2 block from x, everything else y
        expected = y.copy()
        expected[2:4, 4:6] = x[2:4, 4:6]
        assert np.array_equal(mixed, expected)

    def test_every_pixel_from_one_input(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.normal(size=(8, 8, 3)).astype(np.float32)
            y = rng.normal(size=(8, 8, 3)).astype(np.float32)
            masks = self._masks(rng.integers(0, 2, size=(2, 2)))
            mixed = mix_images(x, y, masks)
            from_x = np.all(mixed == x, axis=-1)
            from_y = np.all(mixed == y, axis=-1)
            assert np.all(from_x | from_y)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            mix_images(np.zeros((8, 8, 3)), np.zeros((4, 4, 3)),
                       self._masks(np.ones((2, 2))))

    def test_indivisible_grid(self):
        with pytest.raises(InvalidInputError):
            mix_images(np.zeros((9, 9, 3)), np.zeros((9, 9, 3)),
                       self._masks(np.ones((2, 2))))


class TestAssignPartners:
    def test_singleton(self):
        assert assign_partners(1, 0).tolist() == [0]

    def test_derangement(self):
        for seed in range(20):
            perm = assign_partners(6, seed)
            assert sorted(perm.tolist()) == list(range(6))
            assert all(perm[i] != i for i in range(6))

    def test_pairs_are_deranged_too(self):
        perm = assign_partners(2, 0)
        assert perm.tolist() == [1, 0]

    def test_seeded_reproducibility(self):
        assert np.array_equal(assign_partners(16, 9), assign_partners(16, 9))
        assert not np.array_equal(assign_partners(16, 9), assign_partners(16, 10))


class TestBuildBundle:
    def test_full_chain(self, stub):
        rng = np.random.default_rng(0)
        image = rng.normal(size=(8, 8, 3)).astype(np.float32)
        partner = rng.normal(size=(8, 8, 3)).astype(np.float32)
        caption = "a dog under the tree"
        tokens = stub.tokenize(caption)
        bundle = build_bundle(image, tokens, caption, partner, 3,
                              StubRelevance(seed=0), tau=0.3)
        assert bundle.removed.word == "dog"
        assert bundle.partner_index == 3
        assert bundle.masked_image.shape == image.shape
        assert len(bundle.masked_tokens.word_spans) == len(tokens.word_spans) - 1

    def test_relevance_failure_propagates(self, stub):
        class FailingProvider:
            grid = 4

            def relevance_map(self, image, word):
                raise RelevanceUnavailable("backend down")

        caption = "a dog under the tree"
        tokens = stub.tokenize(caption)
        img = np.zeros((8, 8, 3), dtype=np.float32)
        with pytest.raises(RelevanceUnavailable):
            build_bundle(img, tokens, caption, img, 0, FailingProvider(), 0.3)
