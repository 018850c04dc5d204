import numpy as np
import pytest
from hypothesis import given, strategies as st

from handfold import autodiff as ad
from handfold.encoder import Encoder, SetAbstractionConfig, ball_query, group, sample_centroids


def brute_force_ball_query(centroids, points, radius, nsample):
    """Direct transcription of the neighbourhood rule, one centroid at a time."""
    out = []
    for c in centroids:
        d2 = ((points - c) ** 2).sum(axis=1)
        hits = [i for i in range(len(points)) if d2[i] <= radius * radius][:nsample]
        if not hits:
            hits = [int(np.argmin(d2))]
        out.append(hits + [hits[0]] * (nsample - len(hits)))
    return np.array(out)


def test_ball_query_hand_example():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.5, 0, 0], [0.05, 0, 0]])
    nbr = ball_query(np.array([[0.0, 0, 0]]), pts, radius=0.1, nsample=4)
    assert nbr.tolist() == [[0, 1, 3, 0]]  # inclusive radius, scan order, padding with first hit


def test_ball_query_no_hit_uses_nearest():
    pts = np.array([[1.0, 0, 0], [0.6, 0, 0], [2.0, 0, 0]])
    assert ball_query(np.zeros((1, 3)), pts, 0.1, 3).tolist() == [[1, 1, 1]]


def test_ball_query_truncates_to_first_hits():
    pts = np.zeros((10, 3))
    assert ball_query(np.zeros((1, 3)), pts, 0.1, 4).tolist() == [[0, 1, 2, 3]]


@given(st.integers(0, 100_000))
def test_ball_query_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.5, 0.5, (int(rng.integers(1, 80)), 3))
    cen = rng.uniform(-0.6, 0.6, (int(rng.integers(1, 10)), 3))
    r = float(rng.uniform(0.05, 0.6))
    S = int(rng.integers(1, 12))
    assert (ball_query(cen, pts, r, S) == brute_force_ball_query(cen, pts, r, S)).all()


def test_ball_query_errors():
    with pytest.raises(ValueError):
        ball_query(np.zeros((1, 3)), np.zeros((0, 3)), 0.1, 2)
    with pytest.raises(ValueError):
        ball_query(np.zeros((1, 3)), np.zeros((3, 3)), 0.0, 2)


def test_centroids_distinct_when_possible():
    idx = sample_centroids(100, 40, np.random.default_rng(0))
    assert len(set(idx.tolist())) == 40
    idx = sample_centroids(5, 8, np.random.default_rng(0))
    assert len(idx) == 8 and idx.max() < 5


def test_group_relative_coordinates():
    coords = np.array([[[0.0, 0, 0], [1.0, 2, 3], [4.0, 5, 6]]])
    centers = np.array([[[1.0, 1, 1]]])
    nbr = np.array([[[2, 1]]])
    feats = ad.Tensor(np.arange(6.0).reshape(1, 3, 2))
    rel, g = group(coords, feats, centers, nbr)
    assert rel.tolist() == [[[[3, 4, 5], [0, 1, 2]]]]
    assert g.data.tolist() == [[[[4, 5], [2, 3]]]]


SMALL = dict(sa1=SetAbstractionConfig(0.3, 8, 16, (8, 8, 16)), sa2=SetAbstractionConfig(0.5, 8, 8, (16, 16, 32)),
             global_mlp=(16, 16, 32))


def small_encoder(seed=0):
    return Encoder(SMALL["sa1"], SMALL["sa2"], SMALL["global_mlp"], np.random.default_rng(seed))


def test_encoder_shapes():
    rng = np.random.default_rng(0)
    pts, nrm = rng.uniform(-0.5, 0.5, (2, 64, 3)), rng.normal(size=(2, 64, 3))
    levels, g = small_encoder()(pts, nrm, np.random.default_rng(1))
    assert [lv.coords.shape for lv in levels] == [(2, 64, 3), (2, 16, 3), (2, 8, 3)]
    assert [lv.features.shape for lv in levels] == [(2, 64, 3), (2, 16, 16), (2, 8, 32)]
    assert g.shape == (2, 32)


@given(st.integers(0, 100_000))
def test_encoder_permutation_invariance(seed):
    # with every point kept as a centroid candidate and radii covering the cloud,
    # the global feature must not depend on input order
    rng = np.random.default_rng(seed)
    enc = Encoder(SetAbstractionConfig(2.0, 32, 1, (8, 8)), SetAbstractionConfig(2.0, 4, 1, (8,)),
                  (8, 16), np.random.default_rng(0))
    pts, nrm = rng.uniform(-0.5, 0.5, (1, 20, 3)), rng.normal(size=(1, 20, 3))
    perm = rng.permutation(20)
    with ad.precision("float64"):
        # one centroid; pick the same physical point in both orders
        c = int(rng.integers(20))
        _, g1 = enc(pts, nrm, _FixedCentroid(c), training=False)
        _, g2 = enc(pts[:, perm], nrm[:, perm], _FixedCentroid(int(np.argsort(perm)[c])), training=False)
    np.testing.assert_allclose(g1.data, g2.data, atol=1e-12)


class _FixedCentroid:
    """Stand-in generator whose permutation puts a chosen index first."""

    def __init__(self, first):
        self.first = first

    def permutation(self, n):
        rest = [i for i in range(n) if i != self.first] if self.first < n else list(range(n))
        return np.array(([self.first] if self.first < n else []) + rest)

    def integers(self, lo, hi, size):
        return np.zeros(size, dtype=np.int64)


def test_encoder_is_deterministic_under_seed():
    rng = np.random.default_rng(0)
    pts, nrm = rng.uniform(-0.5, 0.5, (2, 64, 3)), rng.normal(size=(2, 64, 3))
    enc = small_encoder()
    a = enc(pts, nrm, np.random.default_rng(4))[1].data
    b = enc(pts, nrm, np.random.default_rng(4))[1].data
    assert a.tobytes() == b.tobytes()
