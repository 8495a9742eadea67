import math
import threading

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ccpv.errors import DimMismatch, DuplicateIdentity, EmptyGallery, UnknownIdentity, ZeroNormTemplate
from ccpv.matching import (
    GalleryStore,
    MatchRule,
    Pairing,
    SourceChirality,
    TemplatePair,
    aggregate_distances,
    distance,
    enroll,
    four_match,
    four_match_matrix,
    identify,
    verify,
)
from ccpv.model import BackboneConfig
from ccpv.transforms import flip
from oracles import angle_distance, four_match_loop


def test_distance_examples():
    assert distance([1, 0], [1, 0], 1.0) == 0.0
    assert distance([1, 0], [0, 1], 1.0) == pytest.approx(math.pi / 2)
    assert distance([1, 0], [-1, 0], 2.0) == pytest.approx(math.pi / 2)


def test_distance_errors():
    with pytest.raises(ZeroNormTemplate):
        distance([0, 0], [1, 0])
    with pytest.raises(DimMismatch):
        distance([1, 0], [1, 0, 0])


def test_four_match_identical():
    e = np.array([0.6, 0.8])
    r = four_match(TemplatePair(e, e), TemplatePair(e, e))
    assert r.distances == (0.0, 0.0, 0.0, 0.0) and r.aggregate == 0.0


def test_four_match_worked_example():
    g, gf = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    gal, qry = TemplatePair(g, gf), TemplatePair(g.copy(), gf.copy())
    cross = four_match(gal, qry, 1.0, Pairing.CROSS_PRODUCT)
    assert cross.distances == pytest.approx((0.0, math.pi / 2, math.pi / 2, 0.0))
    assert cross.aggregate == pytest.approx(math.pi / 4)
    written = four_match(gal, qry, 1.0, Pairing.AS_WRITTEN)
    assert written.d2 == pytest.approx(math.pi / 2)
    assert written.aggregate == pytest.approx(math.pi / 4)


@settings(max_examples=60)
@given(st.integers(0, 100_000), st.sampled_from(list(Pairing)), st.floats(0.5, 4.0))
def test_four_match_against_scalar_oracle(seed, pairing, beta):
    rng = np.random.default_rng(seed)
    g, gf, q, qf = rng.normal(size=(4, 5))
    r = four_match(TemplatePair(g, gf), TemplatePair(q, qf), beta, pairing)
    expected = four_match_loop(g, gf, q, qf, beta, as_written=pairing is Pairing.AS_WRITTEN)
    assert list(r.distances) == pytest.approx(expected, abs=1e-12)
    assert r.aggregate == pytest.approx(sum(expected) / 4, abs=1e-12)


def test_four_match_matrix_agrees_with_pairwise():
    rng = np.random.default_rng(4)
    g, gf, q, qf = (rng.normal(size=(n, 6)) for n in (3, 3, 5, 5))
    for pairing in Pairing:
        for rule in MatchRule:
            agg, d = four_match_matrix(g, gf, q, qf, 1.5, pairing, rule)
            for i in range(3):
                for j in range(5):
                    r = four_match(TemplatePair(g[i], gf[i]), TemplatePair(q[j], qf[j]), 1.5, pairing, rule)
                    assert agg[i, j] == pytest.approx(r.aggregate, abs=1e-12)
                    assert d[:, i, j] == pytest.approx(r.distances, abs=1e-12)


def test_aggregate_rules():
    d = (0.1, 0.2, 0.3, 0.4)
    assert aggregate_distances(d, MatchRule.MEAN4) == pytest.approx(0.25)
    assert aggregate_distances(d, MatchRule.COMPETITION) == 0.1
    assert aggregate_distances(d, MatchRule.SINGLE) == 0.1
    for rule in MatchRule:
        assert aggregate_distances((0.7,) * 4, rule) == pytest.approx(0.7)


def _store_with(model, images, ids):
    store = GalleryStore(model.cfg.embedding_dim, beta=1.0)
    for ident, img in zip(ids, images):
        enroll(store, ident, img, model, chirality="L")
    return store


def _images(n, side=32, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((side, side)) for _ in range(n)]


def test_enroll_stores_unit_norm_pair(tiny_model):
    store = GalleryStore(8)
    img = _images(1)[0]
    enroll(store, "alice", img, tiny_model)
    assert len(store) == 1
    pair = store.get("alice")
    assert np.linalg.norm(pair.original) == pytest.approx(1, abs=1e-5)
    assert np.linalg.norm(pair.flipped) == pytest.approx(1, abs=1e-5)
    with pytest.raises(DuplicateIdentity):
        enroll(store, "alice", img, tiny_model)
    enroll(store, "alice", flip(img), tiny_model, overwrite=True)
    np.testing.assert_allclose(store.get("alice").original, pair.flipped, atol=1e-6)


def test_gallery_persist_round_trip(tmp_path, tiny_model):
    store = _store_with(tiny_model, _images(3), ["a", "bé", "c"])
    store.beta = 2.0
    path = store.save(tmp_path / "g.bin")
    back = GalleryStore.load(path)
    assert back.dim == 8 and back.beta == 2.0 and back.identities() == ["a", "bé", "c"]
    for ident in store.identities():
        np.testing.assert_allclose(back.get(ident).original, store.get(ident).original, atol=1e-6)
        np.testing.assert_allclose(back.get(ident).flipped, store.get(ident).flipped, atol=1e-6)
        assert back.get(ident).source_chirality is SourceChirality.LEFT
    csv_path = store.export_csv(tmp_path / "g.csv")
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("identity,chirality,view,v0") and len(lines) == 1 + 2 * 3


def test_verify_self_match_and_zero_threshold(tiny_model):
    imgs = _images(2)
    store = _store_with(tiny_model, imgs, ["a", "b"])
    self_match = four_match(store.get("a"), store.get("a"))
    # d1 and d4 vanish for a self-match; the cross terms do not
    assert self_match.d1 == pytest.approx(0, abs=1e-3) and self_match.d4 == pytest.approx(0, abs=1e-3)
    accept, result = verify(store, "a", imgs[0], tiny_model, threshold=self_match.aggregate + 1e-3)
    assert accept
    assert result.aggregate == pytest.approx(self_match.aggregate, abs=1e-5)
    noisy = np.clip(imgs[0] + np.random.default_rng(9).normal(0, 0.2, imgs[0].shape), 0, 1)
    accept, result = verify(store, "a", noisy, tiny_model, threshold=0.0)
    assert not accept and result.aggregate > 0
    with pytest.raises(UnknownIdentity):
        verify(store, "zed", imgs[0], tiny_model, 1.0)


def test_identify(tiny_model):
    imgs = _images(4, seed=2)
    with pytest.raises(EmptyGallery):
        identify(GalleryStore(8), imgs[0], tiny_model)
    one = _store_with(tiny_model, imgs[:1], ["solo"])
    assert [i for i, _ in identify(one, imgs[1], tiny_model)] == ["solo"]
    store = _store_with(tiny_model, imgs, ["w", "x", "y", "z"])
    ranked = identify(store, imgs[2], tiny_model)
    assert ranked[0][0] == "y"
    dists = [d for _, d in ranked]
    assert dists == sorted(dists)


class ColumnMeans(torch.nn.Module):
    """Stub backbone: the template is the normalized column-mean profile of a 4x4 image."""

    def __init__(self):
        super().__init__()
        self.cfg = BackboneConfig(embedding_dim=4, image_side=4)
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, x):
        return torch.nn.functional.normalize(x.mean(dim=2)[:, 0, :] + self.dummy, dim=1)


def _column_image(weights):
    return np.tile(np.asarray(weights, dtype=np.float64), (4, 1))


def test_identify_orthogonal_gallery_matches_exhaustive_oracle():
    model = ColumnMeans()
    store = GalleryStore(4)
    gallery_imgs = {"c": [1, 0, 0, 0], "a": [0, 1, 0, 0], "b": [0, 0, 1, 0], "d": [0, 0, 0, 1]}
    for ident, w in gallery_imgs.items():
        enroll(store, ident, _column_image(w), model)
    query = _column_image([0, 1, 0, 0])
    ranked = identify(store, query, model)
    assert ranked[0][0] == "a"
    q, qf = np.array([0, 1, 0, 0.0]), np.array([0, 0, 1, 0.0])
    oracle = sorted(((ident, sum(four_match_loop(p.original, p.flipped, q, qf, 1.0)) / 4)
                     for ident, p in store.entries.items()), key=lambda t: (t[1], t[0]))
    assert [i for i, _ in ranked] == [i for i, _ in oracle]
    assert [d for _, d in ranked] == pytest.approx([d for _, d in oracle], abs=1e-12)
    # "a" and "b" are mirror images of each other and tie; keys break the tie
    assert ranked[1][0] == "b" and ranked[1][1] == pytest.approx(ranked[0][1])


def test_gallery_concurrent_reads_during_writes():
    store = GalleryStore(4)
    errors = []

    def writer():
        for i in range(200):
            store.add(TemplatePair(np.ones(4), np.ones(4), f"id{i}"))

    def reader():
        try:
            for _ in range(200):
                ids, g, gf = store.matrices()
                assert g.shape == (len(ids), 4)
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=writer)] + [threading.Thread(target=reader) for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors and len(store) == 200


def test_distance_symmetry_quick():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.normal(size=(2, 7))
        assert distance(a, b, 1.3) == pytest.approx(distance(b, a, 1.3), abs=1e-12)
        assert distance(a, b, 1.3) == pytest.approx(angle_distance(a, b, 1.3), abs=1e-12)
