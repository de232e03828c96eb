import shutil
import subprocess
import sys

import pytest


def detector_cli() -> list[str]:
    """Invocation vector for the detector's installed CLI."""
    exe = shutil.which("mmdetect")
    if exe:
        return [exe]
    return [sys.executable, "-m", "mmdetect.cli"]


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small real+fake corpus produced through the detector CLI."""
    root = tmp_path_factory.mktemp("corpus")
    vq = root / "vqvae.mmdc"
    subprocess.run(detector_cli() + ["gen-corpus", "--seed", "21", "--out", str(root),
                                     "--train", "6", "--test", "4"], check=True)
    subprocess.run(detector_cli() + ["train-vqvae", "--corpus", str(root),
                                     "--out", str(vq), "--steps", "150",
                                     "--seed", "21"], check=True)
    subprocess.run(detector_cli() + ["gen-fakes", "--corpus", str(root),
                                     "--vqvae", str(vq), "--jitter", "0.2",
                                     "--out", str(root), "--seed", "21"], check=True)
    return {"root": root, "vqvae": vq, "manifest": root / "manifest.tsv"}
