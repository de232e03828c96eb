import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdetect import evaluate
from mmdetect.config import TrainConfig
from mmdetect.corpus import VideoClip
from mmdetect.errors import (DegenerateFeatures, InvalidCombination,
                             SingleClass, VideoTooShort)
from mmdetect.evaluate import (ScoreRow, ScoreTable, auc, auc_scores,
                               cluster_accuracy, kmeans, layer_probe,
                               multi_seed_report, score_video, validate_flags)
from mmdetect.rng import CounterRng
from mmdetect.trainer import Detector


def brute_force_auc(scores, labels):
    """O(n^2) pairwise oracle: P(fake > real) with ties worth one half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


# --- auc -------------------------------------------------------------------------

def test_auc_perfect_separation():
    scores = np.array([0.9] * 5 + [0.1] * 5)
    labels = np.array([1] * 5 + [0] * 5)
    assert auc_scores(scores, labels) == 1.0


def test_auc_all_ties_half():
    scores = np.full(10, 0.4)
    labels = np.array([1, 0] * 5)
    assert auc_scores(scores, labels) == 0.5


def test_auc_single_class_rejected():
    with pytest.raises(SingleClass):
        auc_scores(np.array([0.1, 0.2]), np.array([1, 1]))


@given(st.integers(0, 2**32), st.integers(2, 100), st.integers(0, 3))
@settings(max_examples=50, deadline=None)
def test_auc_matches_pairwise_oracle(seed, n, tie_level):
    rng = CounterRng(seed)
    labels = rng.randint(2, (n,))
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[0] = 0
    if tie_level == 0:
        scores = rng.uniform((n,)).astype(np.float64)
    else:  # quantized scores force tie groups
        scores = (rng.randint(2 + tie_level, (n,)) / (1 + tie_level)).astype(np.float64)
    got = auc_scores(scores, labels)
    assert got == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)


def test_auc_invariant_under_monotone_transforms():
    rng = CounterRng(3)
    scores = rng.uniform((40,)).astype(np.float64)
    labels = np.array([1, 0] * 20)
    base = auc_scores(scores, labels)
    assert auc_scores(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
    assert auc_scores(3.0 * scores + 7.0, labels) == pytest.approx(base, abs=1e-12)


def test_auc_table_wrapper():
    rows = [ScoreRow("a", "fake", 0.8), ScoreRow("b", "real", 0.2)]
    assert auc(ScoreTable(rows)) == 1.0


# --- score_video -----------------------------------------------------------------------

def fresh_detector(**kw):
    base = dict(seed=2, layers=1, heads=2, dim=16, clip_len=4, n_max=16,
                use_recon=False, use_mmfr=False, use_fusion=False)
    base.update(kw)
    return Detector(TrainConfig(**base))


def make_video(n, seed=0):
    return VideoClip(CounterRng(seed).uniform((n, 32, 32, 3)), id=f"v{seed}",
                     label="real", fps=8.0)


def test_score_video_exact_length_single_window():
    det = fresh_detector()
    video = make_video(4)
    s = score_video(video, det, None, None, clip_len=4)
    assert 0.0 <= s <= 1.0


def test_score_video_constant_model_half():
    det = fresh_detector()  # zero-init classifier -> logit exactly 0
    video = make_video(12, seed=1)
    assert score_video(video, det, None, None, clip_len=4) == 0.5
    # and invariant to stride for the constant model
    assert score_video(video, det, None, None, clip_len=4, stride=1) == 0.5


def test_score_video_window_enumeration_oracle():
    det = fresh_detector()
    det.fusion.classifier.w.data[:] = CounterRng(5).normal((16, 1))
    det.fusion.classifier.b.data[:] = 0.1
    video = make_video(20, seed=2)
    got = score_video(video, det, None, None, clip_len=10, stride=5)
    singles = []
    from mmdetect.autodiff import no_grad
    for start in (0, 5, 10):
        window = video.frames[None, start:start + 10]
        with no_grad():
            logit = det.forward(window, None, None).data
        singles.append(1.0 / (1.0 + np.exp(-float(logit[0]))))
    assert got == pytest.approx(float(np.mean(singles)), abs=1e-7)
    assert len(singles) == 3


def test_score_video_too_short():
    with pytest.raises(VideoTooShort):
        score_video(make_video(3), fresh_detector(), None, None, clip_len=4)


# --- multi-seed report -------------------------------------------------------------------

def test_multi_seed_identical_results_zero_std():
    rows, summary = multi_seed_report(lambda seed: {"all": 0.75}, seeds=(1, 2, 3))
    assert summary["all"] == (0.75, 0.0)
    assert len(rows) == 3


def test_multi_seed_two_value_analytic():
    vals = {1: 0.8, 2: 0.9}
    _, summary = multi_seed_report(lambda seed: {"all": vals[seed]}, seeds=(1, 2))
    mean, std = summary["all"]
    assert mean == pytest.approx(0.85)
    assert std == pytest.approx(0.070710678, abs=1e-8)


def test_multi_seed_matches_float64_reference():
    rng = CounterRng(9)
    vals = {s: float(v) for s, v in zip(range(5), rng.uniform((5,)))}
    _, summary = multi_seed_report(lambda seed: {"all": vals[seed]}, seeds=tuple(range(5)))
    mean, std = summary["all"]
    arr = np.array(list(vals.values()), dtype=np.float64)
    assert abs(mean - arr.mean()) < 1e-9
    assert abs(std - arr.std(ddof=1)) < 1e-9


def test_multi_seed_requires_two_seeds():
    with pytest.raises(ValueError):
        multi_seed_report(lambda s: {"all": 0.5}, seeds=(1,))


# --- k-means probe ------------------------------------------------------------------------

def test_probe_separable_blobs_perfect():
    rng = CounterRng(4)
    a = rng.normal((40, 3)) + np.array([10.0, 0, 0], dtype=np.float32)
    b = rng.normal((40, 3)) - np.array([10.0, 0, 0], dtype=np.float32)
    x = np.concatenate([a, b])
    labels = np.array([0] * 40 + [1] * 40)
    acc = layer_probe({"layer0": (x, labels)})["layer0"]
    assert acc == 1.0


def test_probe_null_features_chance_band():
    rng = CounterRng(5)
    x = rng.normal((200, 8))
    labels = rng.randint(2, (200,))
    acc = layer_probe({"l": (x, labels)})["l"]
    assert 0.5 <= acc <= 0.65


def test_probe_four_point_instance_matches_exhaustive_scan():
    x = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
    labels = np.array([0, 0, 1, 1])
    assign, inertia = kmeans(x, 2, seed=3)
    # exhaustive scan over all 2-partitions with both clusters non-empty
    best_inertia = np.inf
    import itertools
    for bits in itertools.product([0, 1], repeat=4):
        bits = np.array(bits)
        if bits.sum() in (0, 4):
            continue
        total = 0.0
        for j in (0, 1):
            members = x[bits == j]
            total += (((members - members.mean(axis=0)) ** 2).sum())
        best_inertia = min(best_inertia, total)
    assert inertia == pytest.approx(best_inertia, abs=1e-9)
    assert cluster_accuracy(assign, labels) == 1.0


def test_probe_degenerate_features():
    x = np.zeros((10, 4))
    labels = np.array([0, 1] * 5)
    with pytest.raises(DegenerateFeatures):
        layer_probe({"l": (x, labels)})


def test_probe_too_few_samples():
    x = CounterRng(6).normal((3, 4))
    with pytest.raises(DegenerateFeatures):
        layer_probe({"l": (x, np.array([0, 1, 0]))})


def test_kmeans_deterministic():
    x = CounterRng(7).normal((50, 4))
    a1, i1 = kmeans(x, 2, seed=9)
    a2, i2 = kmeans(x, 2, seed=9)
    assert np.array_equal(a1, a2) and i1 == i2


# --- ablation flags -------------------------------------------------------------------------

def test_validate_flags():
    assert validate_flags([]) == frozenset()
    assert validate_flags(["recon", "iafa"]) == frozenset({"recon", "iafa"})
    with pytest.raises(InvalidCombination):
        validate_flags(["fusion"])
    with pytest.raises(InvalidCombination):
        validate_flags(["recon", "bogus"])


def test_flags_tag_ordering():
    from mmdetect.evaluate import flags_tag
    assert flags_tag(frozenset()) == "base"
    assert flags_tag(frozenset({"mmfr", "recon"})) == "recon+mmfr"
    assert flags_tag(frozenset({"fusion", "mmfr", "iafa", "recon"})) == \
        "recon+iafa+mmfr+fusion"


# --- csv round trips ---------------------------------------------------------------------------

def test_report_and_summary_csv(tmp_path):
    rows = [("all", 1, 0.91), ("all", 2, 0.93)]
    evaluate.write_report_csv(rows, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "dataset_tag,seed,auc"
    assert lines[1] == "all,1,0.910000"
    evaluate.write_summary_csv({"all": (0.92, 0.0141)}, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[1] == "all,0.920000,0.014100"


def test_features_csv_round_trip(tmp_path):
    feats = CounterRng(8).normal((3, 4)).astype(np.float64)
    evaluate.write_features_csv(["a", "b", "c"], ["real", "fake", "real"],
                                feats, tmp_path / "f.csv")
    ids, labels, back = evaluate.read_features_csv(tmp_path / "f.csv")
    assert ids == ["a", "b", "c"]
    assert labels.tolist() == [0, 1, 0]
    assert np.allclose(back, feats, atol=1e-5)
