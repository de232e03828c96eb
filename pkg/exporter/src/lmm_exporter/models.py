"""Checkpoint loading for the vision encoder and the language model.

Accepts Hugging Face model ids/paths, or the built-in ``tiny`` spec which
constructs small deterministically-initialized models so the whole
extraction path runs without downloaded weights.  Extraction is
inference-only: no weights are ever modified.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from transformers import (AutoModelForCausalLM, AutoTokenizer, CLIPVisionConfig,
                          CLIPVisionModel, LlamaConfig, LlamaForCausalLM)


class CheckpointLoadError(Exception):
    pass


@dataclass
class ExporterConfig:
    vision: str = "tiny"       # HF id/path or "tiny"
    lm: str = "tiny"
    seed: int = 0
    interval_s: float = 6.0    # frames-per-video sampling interval
    max_tokens: int = 64       # fixed greedy generation budget
    device: str = "cpu"


TINY_VISION = dict(hidden_size=64, intermediate_size=128, num_hidden_layers=2,
                   num_attention_heads=4, image_size=32, patch_size=8,
                   projection_dim=32)
TINY_LM = dict(hidden_size=96, intermediate_size=192, num_hidden_layers=3,
               num_attention_heads=4, num_key_value_heads=4, vocab_size=512,
               max_position_embeddings=512)


class ByteTokenizer:
    """Fallback tokenizer for the tiny LM: UTF-8 bytes folded into the vocab."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def encode(self, text: str) -> list[int]:
        return [b % self.vocab_size for b in text.encode("utf-8")]


def load_vision(spec: str, seed: int) -> CLIPVisionModel:
    try:
        if spec == "tiny":
            torch.manual_seed(seed ^ 0x56495349)  # "VISI"
            model = CLIPVisionModel(CLIPVisionConfig(**TINY_VISION))
        else:
            model = CLIPVisionModel.from_pretrained(spec)
    except Exception as exc:  # noqa: BLE001 - surface a typed error
        raise CheckpointLoadError(f"vision checkpoint {spec!r}: {exc}") from exc
    model.eval()
    return model


def load_lm(spec: str, seed: int):
    try:
        if spec == "tiny":
            torch.manual_seed(seed ^ 0x4C4C4D00)  # "LLM"
            model = LlamaForCausalLM(LlamaConfig(**TINY_LM))
            tokenizer = ByteTokenizer(TINY_LM["vocab_size"])
        else:
            model = AutoModelForCausalLM.from_pretrained(spec)
            tokenizer = AutoTokenizer.from_pretrained(spec)
    except CheckpointLoadError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise CheckpointLoadError(f"language checkpoint {spec!r}: {exc}") from exc
    model.eval()
    return model, tokenizer
