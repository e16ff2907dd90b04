import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hdrcycle.semantics import (EMBED_DIM, FUSED_DIM, SegMask, StandInEncoder, StubSegmenter, cosine_sim, encode,
                                iou_matrix, match_classes, miou, project_and_fuse)

from oracles import brute_force_miou

DATA = Path(__file__).parent / "data"


def mask(labels):
    labels = np.asarray(labels)
    return SegMask(labels, int(labels.max()) + 1)


# -- embeddings ---------------------------------------------------------------

def test_cosine_examples():
    e1 = np.zeros(EMBED_DIM)
    e1[0] = 1
    e2 = np.zeros(EMBED_DIM)
    e2[:2] = 1 / math.sqrt(2)
    assert cosine_sim(e1, e2) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)
    assert cosine_sim(e1, e1) == pytest.approx(1.0)
    e3 = np.zeros(EMBED_DIM)
    e3[1] = 1
    assert cosine_sim(e1, e3) == 0.0
    with pytest.raises(ValueError):
        cosine_sim(e1, np.zeros(EMBED_DIM))


def _ramp():
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    return np.stack([xx, yy, (xx + yy) / 2], -1).astype(np.float32)


def test_standin_encoder_golden_vector():
    e = encode(StandInEncoder(seed=0), _ramp()).numpy()
    assert e.shape == (EMBED_DIM,)
    assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-5)
    golden = np.load(DATA / "standin_ramp_seed0.npy")
    assert np.allclose(e, golden, atol=1e-6)


def test_standin_encoder_deterministic_and_unit(rng):
    imgs = torch.from_numpy(rng.random((5, 3, 64, 48)).astype(np.float32))
    a = StandInEncoder(seed=3)(imgs)
    b = StandInEncoder(seed=3)(imgs)
    assert torch.equal(a, b)
    assert torch.allclose(a.norm(dim=1), torch.ones(5), atol=1e-5)
    # black and constant images still embed to unit vectors
    flat = StandInEncoder()(torch.zeros(2, 3, 16, 16))
    assert torch.allclose(flat.norm(dim=1), torch.ones(2), atol=1e-5)


def test_standin_encoder_is_differentiable():
    img = torch.rand(2, 3, 32, 32, requires_grad=True)
    StandInEncoder()(img)[:, 0].sum().backward()
    assert img.grad is not None and img.grad.abs().sum() > 0


def test_project_and_fuse_linearity(rng):
    proj = torch.nn.Linear(EMBED_DIM, FUSED_DIM, bias=False)
    e1 = torch.from_numpy(rng.standard_normal((2, EMBED_DIM)).astype(np.float32))
    e2 = torch.from_numpy(rng.standard_normal((2, EMBED_DIM)).astype(np.float32))
    with torch.no_grad():
        assert project_and_fuse(proj, e1, e2).shape == (2, FUSED_DIM)
        assert torch.equal(project_and_fuse(proj, e1, torch.zeros_like(e2)), proj(e1))
        assert torch.allclose(project_and_fuse(proj, e1, e1), 2 * proj(e1))
        assert torch.allclose(project_and_fuse(proj, 2.5 * e1, e2), 2.5 * proj(e1) + proj(e2), atol=1e-5)


# -- stub segmenter -----------------------------------------------------------

def test_constant_image_one_class():
    m = StubSegmenter()(np.full((32, 32, 3), 0.4))
    assert m.class_count == 1 and np.all(m.labels == 0)


def test_left_dark_right_bright():
    img = np.zeros((32, 32, 3))
    img[:, 16:] = 0.9
    m = StubSegmenter()(img)
    assert m.class_count == 2
    # direct bucketing oracle: two luminance levels, split at column 16
    assert len(np.unique(m.labels[:, :16])) == 1 and len(np.unique(m.labels[:, 16:])) == 1
    assert m.labels[0, 0] != m.labels[0, 31]


def test_segmenter_deterministic_and_bounded(rng):
    img = rng.random((48, 48, 3))
    a, b = StubSegmenter()(img), StubSegmenter()(img)
    assert np.array_equal(a.labels, b.labels)
    assert 1 <= a.class_count <= 16
    assert a.labels.max() < a.class_count


def test_segmask_validation():
    with pytest.raises(ValueError):
        SegMask(np.array([[0, 3]]), 3)
    with pytest.raises(ValueError):
        SegMask(np.zeros((2, 2), int), 0)


# -- matching and mIoU --------------------------------------------------------

def test_identical_masks(rng):
    a = mask(rng.integers(0, 4, (16, 16)))
    pairs = match_classes(a, a)
    assert all(m == l and iou == 1.0 for l, (m, iou) in pairs.items())
    assert miou(a, a) == 1.0


def test_permutation_recovered(rng):
    a = mask(rng.integers(0, 4, (16, 16)))
    perm = rng.permutation(4)
    b = mask(perm[a.labels])
    pairs = match_classes(a, b)
    assert {l: m for l, (m, _) in pairs.items()} == {l: int(perm[l]) for l in range(4)}
    assert miou(a, b) == pytest.approx(brute_force_miou(a.labels, b.labels)) == pytest.approx(1.0)


def test_single_class_against_partial_support():
    a = mask(np.zeros((10, 10), int))
    labels = np.ones((10, 10), int)
    labels[:, :4] = 0  # 40 of 100 pixels
    b = mask(labels)
    pairs = match_classes(a, b)
    # hand count: |a ∩ b1| = 60, |a ∪ b1| = 100
    assert pairs[0] == (1, pytest.approx(0.6))
    assert miou(a, b) == pytest.approx(0.6 / 2)


def test_one_third_example():
    # fg of each mask covers 100 px, overlapping on 50: |∩| = 50, |∪| = 150
    a = np.zeros((10, 20), int)
    a[:, :10] = 1
    b = np.zeros((10, 20), int)
    b[:, 5:15] = 1
    m, _, _ = iou_matrix(mask(a), mask(b))
    assert m[1, 1] == pytest.approx(1 / 3)
    assert miou(mask(a), mask(b)) == pytest.approx(1 / 3, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, (6, 6), elements=st.integers(0, 3)), arrays(np.int64, (6, 6), elements=st.integers(0, 3)))
def test_optimal_matches_brute_force(a, b):
    ma, mb = mask(a), mask(b)
    best = brute_force_miou(a, b)
    assert miou(ma, mb) == pytest.approx(best, abs=1e-12)
    assert miou(ma, mb, "greedy") <= best + 1e-12
    assert 0.0 <= miou(ma, mb) <= 1.0
    assert miou(ma, mb) == pytest.approx(miou(mb, ma), abs=1e-12)


def test_greedy_can_be_suboptimal():
    # a = [0 0 0 1], b = [0 0 1 0]; hand counts:
    # a0/b0: 2 of 4 -> 1/2, a0/b1: 1 of 3, a1/b0: 1 of 3, a1/b1: 0
    a = np.array([[0, 0, 0, 1]])
    b = np.array([[0, 0, 1, 0]])
    m, _, _ = iou_matrix(mask(a), mask(b))
    assert np.allclose(m, [[1 / 2, 1 / 3], [1 / 3, 0]])
    # greedy grabs 1/2 and leaves a1 with nothing; pairing the off-diagonal wins
    assert miou(mask(a), mask(b), "greedy") == pytest.approx(1 / 4)
    assert miou(mask(a), mask(b)) == pytest.approx(1 / 3)
    assert brute_force_miou(a, b) == pytest.approx(1 / 3)
