import numpy as np
import pytest

from mmdetect import corpus
from mmdetect.corpus import (ManifestEntry, VideoClip, gen_real, load_manifest,
                             perturb, read_clip, save_manifest, write_clip)
from mmdetect.errors import BadMagic, BadParam, InvalidHeader, TruncatedFile
from mmdetect.rng import CounterRng


def random_clip(seed=0, n=4, size=16):
    frames = CounterRng(seed).uniform((n, size, size, 3))
    return VideoClip(frames, id=f"clip{seed}", label="real", fps=8.0)


# --- gen_real -----------------------------------------------------------------

def test_gen_real_deterministic():
    a = gen_real(seed=5, count=3, n_frames=4)
    b = gen_real(seed=5, count=3, n_frames=4)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca.frames, cb.frames)
        assert ca.id == cb.id


def test_gen_real_zero_count():
    assert gen_real(seed=1, count=0) == []


def test_gen_real_motion_bounds():
    clips = gen_real(seed=2, count=5, n_frames=16)
    for clip in clips:
        diffs = np.mean((clip.frames[1:] - clip.frames[:-1]) ** 2,
                        axis=(1, 2, 3))
        mean_mse = float(diffs.mean())
        assert mean_mse > 0.0, "no motion"
        assert mean_mse < 0.1, f"temporal coherence broken: {mean_mse}"


def test_gen_real_range_and_shape():
    clip = gen_real(seed=3, count=1, n_frames=6, size=32)[0]
    assert clip.frames.shape == (6, 32, 32, 3)
    assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0


# --- perturbations --------------------------------------------------------------

def test_rotate_four_times_is_identity():
    clip = random_clip()
    out = clip
    for _ in range(4):
        out = perturb(out, "rotate", angle=90)
    assert np.array_equal(out.frames, clip.frames)


def test_blur_constant_frame_unchanged():
    frames = np.full((2, 16, 16, 3), 0.42, dtype=np.float32)
    clip = VideoClip(frames, id="c", label="real")
    out = perturb(clip, "blur", sigma=3.0)
    assert np.abs(out.frames - 0.42).max() < 1e-6


def test_blur_kernel_normalized():
    k = corpus._gaussian_kernel(3.0)
    assert len(k) == 2 * 9 + 1  # radius ceil(3 sigma)
    assert abs(float(k.sum()) - 1.0) <= 1e-6


def test_resize_vs_opencv_reference():
    cv2 = pytest.importorskip("cv2")
    frames = np.zeros((1, 32, 32, 3), dtype=np.float32)
    frames[0, 13, 21, :] = 1.0
    clip = VideoClip(frames, id="c", label="real")
    ours = perturb(clip, "resize", ratio=0.7).frames[0]
    small = cv2.resize(frames[0], (22, 22), interpolation=cv2.INTER_LINEAR)
    ref = cv2.resize(small, (32, 32), interpolation=cv2.INTER_LINEAR)
    assert abs(float(ours.sum()) - float(ref.sum())) / float(ref.sum()) < 0.05
    # energy lands in the same neighborhood
    oy, ox = np.unravel_index(np.argmax(ours[..., 0]), ours[..., 0].shape)
    ry, rx = np.unravel_index(np.argmax(ref[..., 0]), ref[..., 0].shape)
    assert abs(int(oy) - int(ry)) <= 1 and abs(int(ox) - int(rx)) <= 1


def test_perturb_preserves_shape_and_range():
    clip = random_clip(seed=7)
    for kind in ("blur", "resize", "rotate", "mixed"):
        out = perturb(clip, kind)
        assert out.frames.shape == clip.frames.shape
        assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0


def test_perturb_bad_params():
    clip = random_clip()
    with pytest.raises(BadParam):
        perturb(clip, "blur", sigma=0.0)
    with pytest.raises(BadParam):
        perturb(clip, "resize", ratio=1.5)
    with pytest.raises(BadParam):
        perturb(clip, "rotate", angle=45)
    with pytest.raises(BadParam):
        perturb(clip, "sharpen")


def test_rotate_needs_square_frames():
    frames = CounterRng(1).uniform((2, 8, 16, 3))
    clip = VideoClip(frames, id="c", label="real")
    with pytest.raises(BadParam):
        perturb(clip, "rotate", angle=90)


# --- container ---------------------------------------------------------------------

def test_clip_round_trip_bit_exact(tmp_path):
    clip = random_clip(seed=9)
    p = tmp_path / "clip.mmdv"
    write_clip(clip, p)
    back = read_clip(p)
    assert np.array_equal(back.frames, clip.frames)
    assert back.label == clip.label
    assert back.fps == clip.fps
    assert back.id == "clip"


def test_read_clip_bad_magic(tmp_path):
    p = tmp_path / "x.mmdv"
    p.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(BadMagic):
        read_clip(p)


def test_read_clip_zero_frames_rejected(tmp_path):
    import struct
    p = tmp_path / "z.mmdv"
    p.write_bytes(struct.pack("<4sIIIIIfB", b"MMDV", 1, 0, 4, 4, 3, 8.0, 0))
    with pytest.raises(InvalidHeader):
        read_clip(p)


def test_read_clip_truncated_names_offset(tmp_path):
    clip = random_clip(seed=4, n=2, size=8)
    p = tmp_path / "t.mmdv"
    write_clip(clip, p)
    blob = p.read_bytes()
    p.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(TruncatedFile) as exc:
        read_clip(p)
    assert exc.value.offset == len(blob) // 2
    assert str(len(blob) // 2) in str(exc.value)


# --- manifest -------------------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    clip = random_clip()
    write_clip(clip, tmp_path / "a.mmdv")
    write_clip(clip, tmp_path / "b.mmdv")
    entries = [ManifestEntry("a.mmdv", "real", "train", "procedural"),
               ManifestEntry("b.mmdv", "fake", "test", "vqvae-j0.2")]
    save_manifest(entries, tmp_path / "manifest.tsv")
    back = load_manifest(tmp_path / "manifest.tsv")
    assert back == entries


def test_manifest_rejects_duplicates(tmp_path):
    entries = [ManifestEntry("a.mmdv", "real", "train", "g"),
               ManifestEntry("a.mmdv", "real", "test", "g")]
    with pytest.raises(BadParam):
        save_manifest(entries, tmp_path / "m.tsv")


def test_manifest_missing_file(tmp_path):
    (tmp_path / "m.tsv").write_text("ghost.mmdv\treal\ttrain\tg\n")
    with pytest.raises(InvalidHeader):
        load_manifest(tmp_path / "m.tsv")


def test_clip_rejects_out_of_range_values():
    with pytest.raises(BadParam):
        VideoClip(np.full((1, 4, 4, 3), 1.5, dtype=np.float32), id="x", label="real")
