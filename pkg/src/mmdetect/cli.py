"""Single executable exposing the full pipeline as subcommands.

Exit codes: 0 success, 1 usage error (message on stderr), 2 runtime
failure.  Partially written outputs are removed on failure.  The env var
MMDET_THREADS caps worker counts (0/absent = hardware default).
"""

from __future__ import annotations

import argparse
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluate, trainer
from .config import resolve_config
from .corpus import (LoadedCorpus, build_real_corpus, extend_with_fakes,
                     load_manifest, perturb, read_clip, save_manifest,
                     write_clip)
from .errors import BadParam, MmdetectError
from .mmfr import (MockConfig, MockProvider, cache_timestamps, frame_key,
                   mock_provider, write_features)
from .vqvae import VqVaeConfig, load_vqvae, save_vqvae, train_vqvae


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


class OutputGuard:
    """Removes outputs this run created if the command fails midway."""

    def __init__(self):
        self.created: list[Path] = []

    def track_file(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self.created.append(path)
        return path

    def track_dir(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self.created.append(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def cleanup(self):
        for path in reversed(self.created):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()


def _add(sub, name, help_text):
    p = sub.add_parser(name, help=help_text,
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    return p


def build_parser() -> _Parser:
    parser = _Parser(prog="mmdetect",
                     description="diffusion-video forgery detector pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = _add(sub, "gen-corpus", "generate the procedural real-video corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train", type=int, default=140, help="train-split clip count")
    p.add_argument("--test", type=int, default=60, help="test-split clip count")
    p.add_argument("--frames", type=int, default=16, help="frames per clip")
    p.add_argument("--size", type=int, default=32, help="frame height/width")
    p.add_argument("--fps", type=float, default=8.0)

    p = _add(sub, "train-vqvae", "train the reconstruction VQ-VAE on real frames")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--codebook-size", type=int, default=64)
    p.add_argument("--beta", type=float, default=0.25)
    p.add_argument("--lr", type=float, default=1e-3)

    p = _add(sub, "gen-fakes", "reconstruct real clips into the fake half")
    p.add_argument("--corpus", required=True, help="real corpus directory")
    p.add_argument("--vqvae", required=True, help="vqvae checkpoint")
    p.add_argument("--jitter", type=float, default=0.2,
                   help="per-cell latent replacement probability")
    p.add_argument("--out", required=True, help="output directory (merged manifest)")
    p.add_argument("--seed", type=int, default=0)

    p = _add(sub, "train", "stage-2 end-to-end detector training")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", required=True, help="best-validation checkpoint path")
    p.add_argument("--final-out", help="also write the final-step checkpoint here")
    p.add_argument("--metrics", help="write step,loss,val_auc CSV here")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--corpus", help="override corpus manifest path")
    p.add_argument("--vqvae", help="override vqvae checkpoint path")

    p = _add(sub, "eval", "score a split and report AUC per seed")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seeds", default="1,100,999,1234,9999",
                   help="comma-separated evaluation seeds")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--split", default="test")
    p.add_argument("--stride", type=int, help="clip window stride (default clip_len)")
    p.add_argument("--tag", default="none", help="perturbation tag for the rows")
    p.add_argument("--dump-features", metavar="PREFIX",
                   help="write per-video branch features to PREFIX_st.csv / PREFIX_mmfr.csv")

    p = _add(sub, "perturb", "write a perturbed copy of a corpus")
    p.add_argument("--in", dest="src", required=True, help="corpus directory")
    p.add_argument("--kind", required=True, choices=["blur", "resize", "rotate", "mixed"])
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=3.0, help="gaussian blur sigma")
    p.add_argument("--ratio", type=float, default=0.7, help="resize ratio")
    p.add_argument("--angle", type=int, default=90, help="rotation angle (multiple of 90)")

    p = _add(sub, "ablate", "train/evaluate one module combination across seeds")
    p.add_argument("--flags", default="", help="subset of recon,iafa,mmfr,fusion")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", required=True, help="AUC table CSV path")
    p.add_argument("--seeds", default="1,100,999,1234,9999")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--corpus", help="override corpus manifest path")
    p.add_argument("--vqvae", help="override vqvae checkpoint path")

    p = _add(sub, "probe", "k-means clustering accuracy on feature CSVs")
    p.add_argument("--features", required=True,
                   help="feature CSV, comma-separated CSVs, or a directory of CSVs")
    p.add_argument("--out", required=True, help="probe CSV path")
    p.add_argument("--seed", type=int, default=0)

    p = _add(sub, "export-features-mock", "write mock features in the MMFR file format")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", type=float, required=True, help="mock signal strength")
    p.add_argument("--out", required=True, help="feature file path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--interval", type=float, default=6.0, help="cache grid seconds")

    return parser


# --- command bodies ------------------------------------------------------------------


def _manifest_path(corpus_arg: str) -> Path:
    path = Path(corpus_arg)
    return path if path.is_file() else path / "manifest.tsv"


def cmd_gen_corpus(args, guard: OutputGuard):
    out = guard.track_dir(args.out)
    entries = build_real_corpus(seed=args.seed, out_dir=out, n_train=args.train,
                                n_test=args.test, n_frames=args.frames,
                                size=args.size, fps=args.fps)
    print(f"wrote {len(entries)} real clips + manifest under {out}")


def cmd_train_vqvae(args, guard: OutputGuard):
    manifest = _manifest_path(args.corpus)
    corpus = LoadedCorpus.from_manifest(manifest)
    frames = [c.frames for e, c in corpus.split("train") if e.label == "real"]
    if not frames:
        raise BadParam("corpus has no train-split real clips")
    cfg = VqVaeConfig(seed=args.seed, max_steps=args.steps,
                      batch_size=args.batch_size, latent_dim=args.latent_dim,
                      codebook_size=args.codebook_size, beta=args.beta, lr=args.lr)
    model, curve = train_vqvae(np.concatenate(frames), cfg)
    out = guard.track_file(args.out)
    save_vqvae(model, out)
    print(f"trained vqvae for {len(curve)} steps, loss {curve[0]:.4f} -> {curve[-1]:.4f}")
    print(f"wrote {out}")


def cmd_gen_fakes(args, guard: OutputGuard):
    model = load_vqvae(args.vqvae)
    out = guard.track_dir(args.out)
    entries = extend_with_fakes(Path(args.corpus), model, jitter=args.jitter,
                                out_dir=out, seed=args.seed)
    n_fake = sum(1 for e in entries if e.label == "fake")
    print(f"wrote {n_fake} fake clips + merged manifest under {out}")


def _resolved_config(args):
    overrides: dict = {}
    for item in args.set:
        if "=" not in item:
            raise BadParam(f"--set expects KEY=VALUE, got {item!r}")
        key, _, val = item.partition("=")
        overrides[key.strip()] = val.strip()
    for key in ("seed", "corpus", "vqvae"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    cfg = resolve_config(args.config, overrides)
    if not cfg.corpus:
        raise BadParam("corpus manifest required (config key corpus= or --corpus)")
    for line in sorted(f"{k}={v}" for k, v in vars(cfg).items()):
        print(f"config: {line}")
    return cfg


def cmd_train(args, guard: OutputGuard):
    from .checkpoint import save_checkpoint

    cfg = _resolved_config(args)
    corpus = LoadedCorpus.from_manifest(_manifest_path(cfg.corpus))
    vqvae = load_vqvae(cfg.vqvae) if (cfg.vqvae and cfg.use_recon) else None
    result = trainer.train(cfg, corpus, vqvae, quiet=False)
    out = guard.track_file(args.out)
    save_checkpoint(result.best_state, out)
    print(f"best validation AUC {result.best_val_auc:.4f}; wrote {out}")
    if args.final_out:
        save_checkpoint(result.final_state, guard.track_file(args.final_out))
    if args.metrics:
        trainer.write_metrics_csv(result.metrics, guard.track_file(args.metrics))


def cmd_eval(args, guard: OutputGuard):
    detector, vqvae, cfg = trainer.load_detector(args.ckpt)
    corpus = LoadedCorpus.from_manifest(_manifest_path(args.manifest))
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise BadParam("need at least one seed")
    recon_cache = (trainer.build_recon_cache(vqvae, corpus)
                   if cfg.use_recon else None)

    def run(seed: int) -> dict[str, float]:
        provider = None
        if cfg.use_mmfr:
            if cfg.provider == "mock":
                provider = MockProvider(MockConfig(seed=cfg.seed,
                                                   signal_strength=cfg.sigma,
                                                   noise_seed=seed),
                                        interval_s=cfg.interval_s)
            else:
                provider = trainer.make_provider(cfg)
        table = evaluate.score_split(corpus, detector, vqvae, provider, cfg,
                                     split=args.split, seed=seed,
                                     perturbation=args.tag,
                                     recon_cache=recon_cache)
        return evaluate.auc_by_generator(table)

    rows, summary = (evaluate.multi_seed_report(run, seeds) if len(seeds) > 1
                     else ([(t, seeds[0], v) for t, v in sorted(run(seeds[0]).items())],
                           {t: (v, 0.0) for t, v in run(seeds[0]).items()}))
    out = guard.track_file(args.out)
    evaluate.write_report_csv(rows, out)
    summary_path = guard.track_file(Path(args.out).with_name(
        Path(args.out).stem + "_summary.csv"))
    evaluate.write_summary_csv(summary, summary_path)
    for tag, (mean, std) in sorted(summary.items()):
        print(f"{tag}: AUC {mean:.4f} +- {std:.4f}")
    if args.dump_features:
        _dump_branch_features(args.dump_features, corpus, detector, vqvae, cfg,
                              args.split, recon_cache, guard)


def _dump_branch_features(prefix, corpus, detector, vqvae, cfg, split,
                          recon_cache, guard: OutputGuard):
    from .autodiff import no_grad
    from .mmfr import project_batch

    provider = trainer.make_provider(cfg) if cfg.use_mmfr else None
    ids, labels, st_rows, mm_rows = [], [], [], []
    for entry, clip in corpus.split(split):
        frames = clip.frames[None, :cfg.clip_len]
        recon = None
        if cfg.use_recon:
            rf = recon_cache.get(clip.id) if recon_cache else \
                vqvae.reconstruct_frames(clip.frames)
            recon = rf[None, :cfg.clip_len]
        with no_grad():
            feats = detector.iafa.forward(frames,
                                          recon if cfg.use_recon else frames)
            st_rows.append(feats.data[0].mean(axis=0))
            if cfg.use_mmfr:
                rec = provider.for_clip(clip.id, entry.label,
                                        cfg.clip_len / 2.0 / clip.fps,
                                        clip.duration_s)
                mm = project_batch([rec], detector.projector)
                mm_rows.append(mm.data[0].mean(axis=0))
        ids.append(clip.id)
        labels.append(entry.label)
    st_path = guard.track_file(f"{prefix}_st.csv")
    evaluate.write_features_csv(ids, labels, np.stack(st_rows), st_path)
    print(f"wrote {st_path}")
    if mm_rows:
        mm_path = guard.track_file(f"{prefix}_mmfr.csv")
        evaluate.write_features_csv(ids, labels, np.stack(mm_rows), mm_path)
        print(f"wrote {mm_path}")


def cmd_perturb(args, guard: OutputGuard):
    src = Path(args.src)
    entries = load_manifest(src / "manifest.tsv")
    out = guard.track_dir(args.out)
    new_entries = []
    for e in entries:
        clip = read_clip(src / e.path)
        warped = perturb(clip, args.kind, sigma=args.sigma, ratio=args.ratio,
                         angle=args.angle)
        rel = Path(e.path).name
        write_clip(warped, out / rel)
        new_entries.append(type(e)(path=rel, label=e.label, split=e.split,
                                   generator=e.generator))
    save_manifest(new_entries, out / "manifest.tsv")
    print(f"wrote {len(new_entries)} {args.kind}-perturbed clips under {out}")


def cmd_ablate(args, guard: OutputGuard):
    cfg = _resolved_config(args)
    flags = [f.strip() for f in args.flags.split(",") if f.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    corpus = LoadedCorpus.from_manifest(_manifest_path(cfg.corpus))
    fl = evaluate.validate_flags(flags)
    vqvae = load_vqvae(cfg.vqvae) if (cfg.vqvae and "recon" in fl) else None
    rows, summary = evaluate.ablation_run(flags, corpus, seeds, cfg, vqvae)
    out = guard.track_file(args.out)
    evaluate.write_report_csv(rows, out)
    for tag, (mean, std) in summary.items():
        print(f"{tag}: AUC {mean:.4f} +- {std:.4f} over seeds {seeds}")


def cmd_probe(args, guard: OutputGuard):
    root = Path(args.features)
    if root.is_dir():
        paths = sorted(root.glob("*.csv"))
    else:
        paths = [Path(p) for p in args.features.split(",")]
    if not paths:
        raise BadParam(f"no feature CSVs found at {args.features!r}")
    features = {}
    for path in paths:
        _, labels, x = evaluate.read_features_csv(path)
        features[path.stem] = (x, labels)
    accs = evaluate.layer_probe(features, seed=args.seed)
    out = guard.track_file(args.out)
    lines = ["layer,accuracy"] + [f"{k},{v:.6f}" for k, v in sorted(accs.items())]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for k, v in sorted(accs.items()):
        print(f"{k}: {v:.4f}")


def cmd_export_features_mock(args, guard: OutputGuard):
    entries = load_manifest(Path(args.manifest))
    base = Path(args.manifest).parent
    cfg = MockConfig(seed=args.seed, signal_strength=args.sigma)
    records = []
    for e in entries:
        clip = read_clip(base / e.path)
        for t in cache_timestamps(clip.duration_s, args.interval):
            records.append(mock_provider(frame_key(clip.id, t), e.label, cfg))
    out = guard.track_file(args.out)
    write_features(records, out)
    print(f"wrote {len(records)} records to {out}")


_COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-vqvae": cmd_train_vqvae,
    "gen-fakes": cmd_gen_fakes,
    "train": cmd_train,
    "eval": cmd_eval,
    "perturb": cmd_perturb,
    "ablate": cmd_ablate,
    "probe": cmd_probe,
    "export-features-mock": cmd_export_features_mock,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    guard = OutputGuard()
    try:
        _COMMANDS[args.command](args, guard)
        return 0
    except (MmdetectError, OSError, ValueError) as exc:
        guard.cleanup()
        print(f"mmdetect {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
