"""Feature extraction: frames -> (pooled vision feature, LM hidden states).

Per sampled frame: the vision encoder pools a global feature; its token
states are projected into the language model's embedding space, a sampled
instruction prompt is appended, and the LM greedily generates a fixed
64-token budget.  The last-layer hidden state of each generated token
forms the LM feature rows (generated-token states only; the choice is
recorded in the prompts sidecar header).
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import torch

from .adapters import DimAdapter, VisualTokenProjector
from .mmdv import Clip, DecodeError, read_clip
from .mmfr_format import (LM_DIM, LM_TOKENS, VISION_DIM, FeatureRecord,
                          frame_key, write_records)
from .models import ByteTokenizer, ExporterConfig, load_lm, load_vision
from .templates import InstructionTemplate

CLIP_MEAN = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(1, 3, 1, 1)
CLIP_STD = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(1, 3, 1, 1)


def grid_timestamps(duration_s: float, interval_s: float) -> list[float]:
    out = [0.0]
    t = interval_s
    while t < duration_s:
        out.append(t)
        t += interval_s
    return out


def _pixels(frame: np.ndarray, image_size: int) -> torch.Tensor:
    x = torch.from_numpy(frame).permute(2, 0, 1).unsqueeze(0).float()
    if x.shape[-1] != image_size or x.shape[-2] != image_size:
        x = torch.nn.functional.interpolate(x, size=(image_size, image_size),
                                            mode="bilinear", align_corners=False)
    return (x - CLIP_MEAN) / CLIP_STD


class Extractor:
    def __init__(self, cfg: ExporterConfig):
        self.cfg = cfg
        self.vision = load_vision(cfg.vision, cfg.seed)
        self.lm, self.tokenizer = load_lm(cfg.lm, cfg.seed)
        vision_dim = self.vision.config.hidden_size
        lm_dim = self.lm.config.hidden_size
        self.visual_proj = VisualTokenProjector(vision_dim, lm_dim, cfg.seed)
        self.adapt_vision = DimAdapter(vision_dim, VISION_DIM, cfg.seed ^ 0x0001)
        self.adapt_lm = DimAdapter(lm_dim, LM_DIM, cfg.seed ^ 0x0002)
        self.templates = InstructionTemplate(seed=cfg.seed)

    def _encode_prompt(self, text: str) -> torch.Tensor:
        if isinstance(self.tokenizer, ByteTokenizer):
            ids = self.tokenizer.encode(text)
        else:
            ids = self.tokenizer.encode(text, add_special_tokens=True)
        return torch.tensor([ids], dtype=torch.long)

    @torch.no_grad()
    def frame_features(self, frame: np.ndarray, key: str
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[int, str]]:
        """Returns (vision 1024, lm 64x4096, per-layer pooled states, prompt)."""
        pixels = _pixels(frame, self.vision.config.image_size)
        enc = self.vision(pixel_values=pixels)
        pooled = enc.pooler_output[0]                     # (vision_dim,)
        visual_embeds = self.visual_proj(enc.last_hidden_state)  # (1, S, lm_dim)

        prompt_idx, prompt = self.templates.sample(key)
        prompt_ids = self._encode_prompt(prompt)
        prompt_embeds = self.lm.get_input_embeddings()(prompt_ids)
        inputs_embeds = torch.cat([visual_embeds, prompt_embeds], dim=1)

        gen = self.lm.generate(inputs_embeds=inputs_embeds,
                               max_new_tokens=self.cfg.max_tokens,
                               min_new_tokens=self.cfg.max_tokens,
                               do_sample=False, num_beams=1,
                               output_hidden_states=True,
                               return_dict_in_generate=True,
                               pad_token_id=0)
        # last-layer state at the position producing each generated token
        last_rows = [step[-1][0, -1, :] for step in gen.hidden_states]
        layer_count = len(gen.hidden_states[0])
        per_layer = torch.stack(
            [torch.stack([step[layer][0, -1, :] for step in gen.hidden_states]).mean(dim=0)
             for layer in range(layer_count)])          # (layers+1, lm_dim)

        rows = torch.stack(last_rows)                    # (n_generated, lm_dim)
        rows = rows[:LM_TOKENS]
        if rows.shape[0] < LM_TOKENS:                    # pad short generations
            pad = torch.zeros(LM_TOKENS - rows.shape[0], rows.shape[1])
            rows = torch.cat([rows, pad], dim=0)

        fv = self.adapt_vision(pooled).numpy().astype(np.float32)
        fl = self.adapt_lm(rows).numpy().astype(np.float32)
        return fv, fl, per_layer.numpy().astype(np.float32), (prompt_idx, prompt)


def collect_frames(clip: Clip, interval_s: float) -> list[tuple[float, np.ndarray]]:
    out = []
    for t in grid_timestamps(clip.duration_s, interval_s):
        idx = min(int(round(t * clip.fps)), clip.frames.shape[0] - 1)
        out.append((t, clip.frames[idx]))
    return out


def extract(video_paths: list[str | Path], cfg: ExporterConfig, out_path: str | Path
            ) -> tuple[int, list[str]]:
    """Write one feature record per sampled frame; returns (count, warnings)."""
    extractor = Extractor(cfg)
    records: list[FeatureRecord] = []
    prompt_rows: list[str] = []
    warnings: list[str] = []
    for path in video_paths:
        try:
            clip = read_clip(path)
        except DecodeError as exc:
            warnings.append(f"skipped {path}: {exc}")
            print(f"warning: skipped {path}: {exc}", file=sys.stderr)
            continue
        for t, frame in collect_frames(clip, cfg.interval_s):
            key = frame_key(clip.id, t)
            fv, fl, _, (prompt_idx, prompt) = extractor.frame_features(frame, key)
            records.append(FeatureRecord(frame_key=key, vision_feat=fv, lm_feat=fl))
            prompt_rows.append(f"{key}\t{prompt_idx}\t{prompt}")
    write_records(records, out_path)
    sidecar = Path(str(out_path) + ".prompts.tsv")
    header = ("# prompts sampled per record; LM feature rows are last-layer "
              "hidden states of generated tokens only (greedy, fixed 64-token "
              "budget), padded with zeros on early stop\n")
    sidecar.write_text(header + "\n".join(prompt_rows) + "\n", encoding="utf-8")
    return len(records), warnings


def layer_dump(video_paths: list[str | Path], cfg: ExporterConfig,
               out_dir: str | Path) -> tuple[int, list[str]]:
    """Write per-layer feature CSVs (id,label,f_0..): one file per LM layer,
    embeddings first; row vectors are mean-pooled generated-token states."""
    extractor = Extractor(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows_per_layer: dict[int, list[str]] = {}
    warnings: list[str] = []
    n_frames = 0
    for path in video_paths:
        try:
            clip = read_clip(path)
        except DecodeError as exc:
            warnings.append(f"skipped {path}: {exc}")
            print(f"warning: skipped {path}: {exc}", file=sys.stderr)
            continue
        for t, frame in collect_frames(clip, cfg.interval_s):
            key = frame_key(clip.id, t)
            _, _, per_layer, _ = extractor.frame_features(frame, key)
            n_frames += 1
            for layer in range(per_layer.shape[0]):
                rows_per_layer.setdefault(layer, []).append(
                    f"{key},{clip.label}," +
                    ",".join(f"{v:.6g}" for v in per_layer[layer]))
    width = extractor.lm.config.hidden_size
    header = "id,label," + ",".join(f"f_{i}" for i in range(width))
    for layer, rows in rows_per_layer.items():
        out = out_dir / f"layer{layer:02d}.csv"
        out.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return n_frames, warnings
