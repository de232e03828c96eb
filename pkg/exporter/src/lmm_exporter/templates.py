"""Forgery-reasoning instruction templates with a seeded sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

DEFAULT_TEMPLATES = (
    "Examine this video frame closely. Is it a real photograph or generated "
    "by an AI model? Explain the visual evidence.",
    "Look for synthesis artifacts in this frame: unnatural textures, "
    "inconsistent lighting, or distorted structures. Is it authentic?",
    "Does this frame show signs of diffusion-model generation, such as "
    "over-smooth regions or implausible details? Answer and justify.",
    "Assess the authenticity of this image. Point out any regions whose "
    "color, depth, or shape looks fabricated.",
    "You are a forensic analyst. Decide whether this frame was captured by "
    "a camera or synthesized, and list the clues.",
    "Inspect edges, reflections, and fine structure in this frame. Report "
    "whether they are consistent with real footage.",
    "Is the content of this frame physically plausible? Identify anything "
    "that suggests generative manipulation.",
    "判断这张视频帧是真实拍摄还是模型生成，并说明理由。",
)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class InstructionTemplate:
    """Prompt set with deterministic per-key sampling."""

    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    seed: int = 0

    def sample(self, key: str) -> tuple[int, str]:
        idx = (_fnv1a64(f"{self.seed}:{key}")) % len(self.templates)
        return idx, self.templates[idx]
