import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from tripletvoice.errors import EmptySet, SingleSpeaker, ZeroOAD
from tripletvoice.net import Embedding
from tripletvoice.quality import LabeledEmbeddingSet, centroid, compute_quality, silhouette_samples


def random_set(seed, n=30, k=3, dim=4):
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((k, dim)) * 3
    labels = [f"s{i % k}" for i in range(n)]
    x = np.array([centres[i % k] for i in range(n)]) + rng.standard_normal((n, dim))
    return x, labels


def test_centroid_examples():
    v = np.array([[1.5, -2.0]])
    np.testing.assert_array_equal(centroid(v), v[0])
    np.testing.assert_array_equal(centroid(np.array([[0.0, 0.0], [2.0, 0.0]])), [1.0, 0.0])
    with pytest.raises(EmptySet):
        centroid(np.zeros((0, 3)))


def test_centroid_vs_exact_mean():
    x = np.random.default_rng(0).standard_normal((100, 1024)) * 10
    np.testing.assert_allclose(centroid(x), oracles.centroid(x), rtol=1e-6, atol=1e-12)
    emb = [Embedding(r.astype(np.float32)) for r in x[:5]]
    np.testing.assert_allclose(centroid(emb), oracles.centroid(x[:5].astype(np.float32)), rtol=1e-12, atol=1e-12)


def test_hand_geometry():
    groups = {
        "a": np.array([[-1.0, 0.0], [1.0, 0.0]]),
        "b": np.array([[9.0, 0.0], [11.0, 0.0]]),
    }
    r = compute_quality(LabeledEmbeddingSet.from_groups(groups))
    assert r.iad == 1.0
    assert r.oad == 10.0
    assert r.dr == pytest.approx(0.1)


def test_dr_from_table3_pair():
    assert 4.77 / 27.61 == pytest.approx(0.17276, abs=1e-5)
    assert abs(4.77 / 27.61 - 0.1730) <= 5e-4


@pytest.mark.parametrize("seed", range(5))
def test_silhouette_vs_brute_force(seed):
    x, labels = random_set(seed)
    ref = oracles.silhouette(x, labels)
    np.testing.assert_allclose(silhouette_samples(x, labels), ref, atol=1e-9)
    r = compute_quality(LabeledEmbeddingSet(x, labels))
    assert r.msc == pytest.approx(np.mean(ref), abs=1e-9)
    iad, oad = oracles.quality(x, labels)
    assert r.iad == pytest.approx(iad, abs=1e-9)
    assert r.oad == pytest.approx(oad, abs=1e-9)


def test_singleton_cluster_scores_zero():
    x = np.array([[0.0], [0.1], [5.0]])
    s = silhouette_samples(x, ["a", "a", "b"])
    assert s[2] == 0.0
    assert s[:2] == pytest.approx(oracles.silhouette(x, ["a", "a", "b"])[:2])


def test_offset_data_keeps_precision():
    # large common offset stresses the Gram-matrix expansion
    x, labels = random_set(9)
    shifted = x + 1e4
    np.testing.assert_allclose(silhouette_samples(shifted, labels), silhouette_samples(x, labels), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_scale_and_permutation_invariance(seed, c):
    x, labels = random_set(seed, n=18)
    base = compute_quality(LabeledEmbeddingSet(x, labels))
    scaled = compute_quality(LabeledEmbeddingSet(x, labels).scaled(c))
    assert scaled.dr == pytest.approx(base.dr, abs=1e-9)
    assert scaled.msc == pytest.approx(base.msc, abs=1e-9)
    assert scaled.iad == pytest.approx(c * base.iad, rel=1e-9)
    perm = np.random.default_rng(seed).permutation(len(labels))
    shuffled = compute_quality(LabeledEmbeddingSet(x[perm], [labels[i] for i in perm]))
    assert shuffled.dr == pytest.approx(base.dr, abs=1e-12)
    assert shuffled.msc == pytest.approx(base.msc, abs=1e-12)


def test_errors():
    with pytest.raises(SingleSpeaker):
        compute_quality(LabeledEmbeddingSet(np.zeros((3, 2)), ["a"] * 3))
    with pytest.raises(ZeroOAD):
        compute_quality(LabeledEmbeddingSet(np.zeros((4, 2)), ["a", "a", "b", "b"]))
    with pytest.raises(ValueError):
        LabeledEmbeddingSet(np.zeros((3, 2)), ["a", "b"])


def test_report_serialisation():
    x, labels = random_set(1)
    r = compute_quality(LabeledEmbeddingSet(x, labels))
    d = json.loads(r.to_json(extra={"config": {"seed": 1}}))
    assert d["config"] == {"seed": 1}
    assert set(d["per_speaker"]) == {"s0", "s1", "s2"}
    header, row = r.csv_row(prefix={"label": "F"}).splitlines()
    assert header == "label,iad,oad,dr,msc,n_speakers,n_embeddings"
    assert row.startswith("F,") and row.endswith(",3,30")
