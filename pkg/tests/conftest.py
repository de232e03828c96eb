import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    """Small end-to-end fixture: real corpus + trained VQ-VAE + fakes.

    Shared across trainer/eval tests; acceptance builds its own full-size
    world with the benchmark parameters.
    """
    from mmdetect import trainer
    from mmdetect.corpus import LoadedCorpus, build_real_corpus, extend_with_fakes
    from mmdetect.vqvae import VqVaeConfig, train_vqvae

    root = tmp_path_factory.mktemp("tiny_world")
    build_real_corpus(seed=11, out_dir=root, n_train=14, n_test=6, n_frames=16)
    reals = LoadedCorpus.from_manifest(root / "manifest.tsv")
    frames = np.concatenate([c.frames for _, c in reals.split("train")])
    vqvae, _ = train_vqvae(frames, VqVaeConfig(seed=11, max_steps=250))
    extend_with_fakes(root, vqvae, jitter=0.2, out_dir=root, seed=11)
    corpus = LoadedCorpus.from_manifest(root / "manifest.tsv")
    recon_cache = trainer.build_recon_cache(vqvae, corpus)
    return {"root": root, "corpus": corpus, "vqvae": vqvae,
            "recon_cache": recon_cache}
