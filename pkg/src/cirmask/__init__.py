"""Zero-shot composed image retrieval trained on masked image-text pairs."""

__version__ = "0.1.0"

from .backbone import (Backbone, ClipBackbone, EmbeddedSequence, FeatureBatch,
                       ImageBatch, StubBackbone, TokenSequence, create_backbone)
from .inversion import (ComposedQuery, InversionNetwork, build_inference_query,
                        build_prompt_query, compose_query, invert,
                        load_checkpoint, save_checkpoint)
from .losses import (LossBundle, original_loss, query_target_loss,
                     symmetric_info_nce, total_loss)
from .masking import (BinaryMasks, MaskedPairBundle, RelevanceMap, RemovedWord,
                      assign_partners, build_bundle, mask_text, mix_images,
                      select_first_noun, split_masks)

__all__ = [
    "Backbone", "ClipBackbone", "StubBackbone", "create_backbone",
    "ImageBatch", "TokenSequence", "EmbeddedSequence", "FeatureBatch",
    "RemovedWord", "RelevanceMap", "BinaryMasks", "MaskedPairBundle",
    "select_first_noun", "mask_text", "split_masks", "mix_images",
    "assign_partners", "build_bundle",
    "InversionNetwork", "ComposedQuery", "invert", "compose_query",
    "build_prompt_query", "build_inference_query",
    "save_checkpoint", "load_checkpoint",
    "LossBundle", "symmetric_info_nce", "query_target_loss", "original_loss",
    "total_loss",
    "__version__",
]
