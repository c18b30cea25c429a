import math

import numpy as np
import pytest

from erpscan import diff, scan, vae
from erpscan.labels import FACTORS, LabelError, LabelVector
from erpscan.scan import GroundingPair, ScanConfig
from erpscan.vae import LatentPosterior
from gradcheck import TOL, probe, relu_signature
from test_vae import _images


def _labels(n, seed=0):
    rng = np.random.default_rng(seed)
    return [LabelVector(age=int(rng.integers(2)), gender=int(rng.integers(2)), site=int(rng.integers(4)),
                        depression=int(rng.integers(2)), axis1=int(rng.integers(2))) for _ in range(n)]


@pytest.fixture(scope="module")
def bvae():
    return vae.init_checkpoint(vae.TrainConfig(seed=4))


def test_parameter_count():
    # 12*128+128 + 128*128+128 + 128*20+20 + 10*128+128 + 128*128+128 + 128*12+12
    assert scan.parameter_count() == 40_224


def test_encode_deterministic_and_partial_symbols():
    sc = scan.init_scan(ScanConfig(seed=1))
    y = LabelVector(age=1, gender=0, site=2, depression=1, axis1=1)
    a, b = scan.scan_encode(sc, y), scan.scan_encode(sc, y)
    np.testing.assert_array_equal(a.mean, b.mean)
    empty = scan.scan_encode(sc, np.zeros(12))
    assert np.all(np.isfinite(empty.mean)) and np.all(np.isfinite(empty.logvar))
    with pytest.raises(LabelError):
        scan.scan_encode(sc, np.ones(12))


def test_uniform_logits_label_nll():
    y = np.stack([v.encode() for v in _labels(3)])
    nll, _ = diff.block_softmax_nll(np.zeros((3, 12)), y, (2, 2, 4, 2, 2))
    expect = 4 * math.log(2) + math.log(4)
    assert nll / 3 == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(4.159, abs=1e-3)


def test_kl_ground_zero_when_posteriors_match():
    sc = scan.init_scan(ScanConfig(seed=2, dtype="float64"))
    y = np.stack([v.encode() for v in _labels(4)])
    post = scan.scan_encode(sc, y)
    out = scan._objective(sc.params, y, post, np.zeros((4, 10)), backward=False)
    assert out["kl_ground"] == pytest.approx(0.0, abs=1e-12)


def test_grounding_direction_is_image_first(bvae):
    sc = scan.init_scan(ScanConfig(seed=3, dtype="float64"))
    lab = _labels(2)
    imgs = _images(2)
    pairs = [GroundingPair(l, x) for l, x in zip(lab, imgs)]
    noise = np.zeros((2, 10))
    out = scan.scan_loss(sc, pairs, bvae, noise)
    y = np.stack([l.encode() for l in lab])
    q_img = scan.image_posteriors(bvae, imgs)
    q_sym = scan.scan_encode(sc, y)
    forward = diff.gaussian_kl_pair(q_img.mean, q_img.logvar, q_sym.mean, q_sym.logvar)[0] / 2
    backward = diff.gaussian_kl_pair(q_sym.mean, q_sym.logvar, q_img.mean, q_img.logvar)[0] / 2
    assert out["kl_ground"] == pytest.approx(forward, rel=1e-10)
    assert abs(forward - backward) > 1e-6
    assert out["total"] == pytest.approx(out["label_nll"] + out["kl_prior"] + out["kl_ground"], rel=1e-12)


@pytest.mark.parametrize("weighted", [False, True])
def test_scan_objective_gradient(weighted):
    rng = np.random.default_rng(5)
    sc = scan.init_scan(ScanConfig(seed=6, dtype="float64"))
    store = sc.params
    for n in store.shapes:
        if n.endswith(".b"):
            store[n][:] = rng.normal(size=store[n].shape) * 0.05
    y = np.stack([v.encode() for v in _labels(3, seed=1)])
    y[0, 4:8] = 0   # one partial symbol
    ground = LatentPosterior(rng.normal(size=(3, 10)), rng.normal(size=(3, 10)) * 0.5)
    noise = rng.normal(size=(3, 10))
    w = rng.uniform(0.5, 3.0, size=12) if weighted else np.ones(12)

    def f():
        mean, logvar, t1, _ = scan._encode_raw(store, y)
        z = mean + np.exp(0.5 * logvar) * noise
        logits, t2 = diff.run_forward(scan._DEC, store, z)
        # weighted cross-entropy written out per block
        nll, lo = 0.0, 0
        for width in (2, 2, 4, 2, 2):
            blk = logits[:, lo:lo + width]
            logp = blk - np.log(np.exp(blk).sum(axis=1, keepdims=True))
            nll -= np.sum(y[:, lo:lo + width] * w[lo:lo + width] * logp)
            lo += width
        value = (nll + diff.gaussian_kl_prior(mean, logvar)[0]
                 + diff.gaussian_kl_pair(ground.mean, ground.logvar, mean, logvar)[0])
        return value, relu_signature(t1, t2)

    store.zero_grad()
    scan.scan_loss_and_grad(store, y, ground, noise, w if weighted else None)
    grads = {n: store.gradient(n).copy() * 3 for n in store.shapes}
    assert probe(f, {n: store[n] for n in store.shapes}, grads, rng) < TOL


def test_train_zero_iterations_determinism_and_frozen_bvae(bvae):
    pairs = [GroundingPair(l, x) for l, x in zip(_labels(8), _images(8))]
    before = bvae.params.digest()
    sc0 = scan.train_scan(pairs, bvae, ScanConfig(iterations=0, seed=7))
    assert sc0.params.digest() == scan.init_scan(ScanConfig(seed=7)).params.digest()
    cfg = ScanConfig(iterations=50, seed=7, mask_rate=0.3)
    a, b = scan.train_scan(pairs, bvae, cfg), scan.train_scan(pairs, bvae, cfg)
    assert a.params.digest() == b.params.digest()
    assert bvae.params.digest() == before == a.grounding_digest
    with pytest.raises(LabelError):
        GroundingPair(LabelVector(age=1), _images(1)[0])


def test_label_slot_weights():
    lab = [LabelVector(age=0, gender=0, site=0, depression=0, axis1=0)] * 3
    lab = lab + [LabelVector(age=1, gender=0, site=2, depression=1, axis1=1)]
    w = scan.label_slot_weights(np.stack([v.encode() for v in lab]))
    np.testing.assert_allclose(w[:2], [4 / 6, 2.0])        # 3:1 split
    np.testing.assert_allclose(w[2:4], [1.0, 0.0])         # one class only
    np.testing.assert_allclose(w[4:8], [4 / 6, 0.0, 2.0, 0.0])
    y = np.stack([v.encode() for v in _labels(50)])
    per_sample = (y * scan.label_slot_weights(y)).reshape(50, 12)
    for sl in (slice(0, 2), slice(2, 4), slice(4, 8)):
        assert per_sample[:, sl].sum() == pytest.approx(50.0)


def test_mask_blocks_keeps_one_block():
    y = np.stack([v.encode() for v in _labels(200)])
    m = scan._mask_blocks(np.random.default_rng(0), y, 0.95)
    assert np.all(m.sum(axis=1) >= 1)
    assert np.all(m <= y)


def test_classify_probabilities(bvae):
    sc = scan.init_scan(ScanConfig(seed=8))
    x = _images(3)
    pred, probs = scan.classify_batch(x, bvae, sc)
    assert pred.shape == (3, 5)
    for p in probs:
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    label, p1 = scan.classify(x[0], bvae, sc)
    label2, _ = scan.classify(x[0], bvae, sc)
    assert label == label2
    assert [int(pred[0, i]) for i in range(5)] == list(label.as_tuple())
    for p in p1:
        assert abs(float(np.sum(p, dtype=np.float64)) - 1.0) < 1e-6


def test_sample_from_symbol(bvae):
    sc = scan.init_scan(ScanConfig(seed=9))
    assert scan.sample_from_symbol(LabelVector(depression=0), sc, bvae, 0) == []
    ims = scan.sample_from_symbol(LabelVector(depression=0), sc, bvae, 4, seed=1)
    assert len(ims) == 4 and all(((i > 0) & (i < 1)).all() for i in ims)
    with pytest.raises(scan.SpecificationError):
        scan.sample_from_symbol(LabelVector(), sc, bvae, 3)


def test_factor_association_untrained_prior_and_ordering():
    sc = scan.init_scan(ScanConfig(seed=10, dtype="float64"))
    sc.params["scan.enc3.w"][:] = 0
    sc.params["scan.enc3.b"][:] = 0
    mat, sp = scan.factor_association(sc)
    assert mat.shape == (5, 10) and sp == 1.0
    sc2 = scan.init_scan(ScanConfig(seed=11, dtype="float64"))
    mat2, _ = scan.factor_association(sc2)
    # association is the max over a factor's classes, so class order does not matter
    ys = [LabelVector.single("site", c) for c in (3, 1, 0, 2)]
    post = scan.scan_encode(sc2, ys)
    np.testing.assert_allclose(diff.gaussian_kl_prior_per_dim(post.mean, post.logvar).max(axis=0),
                               mat2[FACTORS.index("site")])


def test_toy_grounding_learns_label():
    # two image clusters tied to depression through a trained toy model
    x = _images(2, seed=9)
    x[1] = 1.0 - x[1]
    bv = vae.train(x, vae.TrainConfig(beta=0.1, iterations=200, seed=1, lr=1e-3))
    lab = [LabelVector(age=0, gender=0, site=0, depression=0, axis1=0),
           LabelVector(age=0, gender=0, site=0, depression=1, axis1=1)]
    pairs = [GroundingPair(lab[i % 2], x[i % 2]) for i in range(32)]
    sc = scan.train_scan(pairs, bv, ScanConfig(iterations=1500, seed=0, lr=1e-3))
    pred, _ = scan.classify_batch(x, bv, sc)
    assert list(pred[:, FACTORS.index("depression")]) == [0, 1]
    assert sc.trace[-1]["total"] < sc.trace[0]["total"]
