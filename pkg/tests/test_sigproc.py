import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erpscan import sigproc, synthgen
from erpscan.sigproc import Epoch, FilterCoefficients, SpecificationError


def _db(coeffs, f):
    return 20 * np.log10(abs(sigproc.frequency_response(coeffs, [f])[0]))


def _poly_response(b, a, f, fs):
    # independent evaluation: sum of b_k e^{-jwk} over sum of a_k e^{-jwk}
    w = 2 * np.pi * f / fs
    k = np.arange(max(len(a), len(b)))
    e = np.exp(-1j * w * k)
    return np.dot(b, e[:len(b)]) / np.dot(a, e[:len(a)])


def test_highpass_blocks_dc_and_hits_cutoff():
    hp = sigproc.design_butterworth("high-pass", 2, 0.1, 250)
    assert abs(_poly_response(hp.numerator, hp.denominator, 0.0, 250)) < 1e-12
    assert abs(_db(hp, 0.1) + 3.0) < 0.1
    assert hp.denominator[0] == 1.0 and hp.is_stable()


def test_lowpass_cutoff_and_dc():
    lp = sigproc.design_butterworth("low-pass", 12, 30, 250)
    h = _poly_response(lp.numerator, lp.denominator, 30.0, 250)
    assert abs(20 * np.log10(abs(h)) + 3.0) < 0.1
    for order in (1, 4, 12):
        f = sigproc.design_butterworth("low-pass", order, 30, 250)
        assert abs(abs(_poly_response(f.numerator, f.denominator, 0.0, 250)) - 1) < 1e-6


def test_passband_is_maximally_flat():
    lp = sigproc.design_butterworth("low-pass", 12, 30, 250)
    mags = np.abs(sigproc.frequency_response(lp, np.linspace(0, 30, 200)))
    assert np.all(np.diff(mags) <= 1e-10)
    assert 1 - mags[20] < 1e-6   # flat well inside the passband


@pytest.mark.parametrize("cut", [125.0, 200.0, 0.0])
def test_bad_cutoff(cut):
    with pytest.raises(SpecificationError):
        sigproc.design_butterworth("low-pass", 2, cut, 250)


def test_apply_filter_basic_cases():
    lp = sigproc.design_butterworth("low-pass", 12, 30, 250)
    np.testing.assert_array_equal(sigproc.apply_filter(lp, np.zeros(100)), np.zeros(100))
    ident = FilterCoefficients(np.array([1.0]), np.array([1.0]), "low-pass", 0, 1.0, 250.0)
    x = np.random.default_rng(0).normal(size=50)
    np.testing.assert_array_equal(sigproc.apply_filter(ident, x), x)
    with pytest.raises(SpecificationError):
        sigproc.apply_filter(lp, np.zeros(0))
    unstable = FilterCoefficients(np.array([1.0]), np.array([1.0, -1.5]), "low-pass", 1, 1.0, 250.0)
    with pytest.raises(SpecificationError):
        sigproc.apply_filter(unstable, x)


def test_lowpass_attenuates_line_noise():
    lp = sigproc.design_butterworth("low-pass", 12, 30, 250)
    t = np.arange(5000) / 250
    x = np.sin(2 * np.pi * 60 * t)
    y = sigproc.apply_filter(lp, x)[1000:]
    gain = abs(_poly_response(lp.numerator, lp.denominator, 60.0, 250))
    assert np.sqrt(np.mean(y ** 2)) < 0.05 * np.sqrt(np.mean(x[1000:] ** 2))
    assert np.sqrt(np.mean(y ** 2)) == pytest.approx(gain / np.sqrt(2), rel=1e-2)


def test_steady_state_start_has_no_transient():
    hp = sigproc.design_butterworth("high-pass", 2, 0.1, 250)
    lp = sigproc.design_butterworth("low-pass", 12, 30, 250)
    np.testing.assert_allclose(sigproc.apply_filter(lp, np.full(300, 2.0), steady_state=True), 2.0, atol=1e-9)
    y = sigproc.apply_filter(hp, np.full(300, 2.0), steady_state=True)
    np.testing.assert_allclose(y, 0.0, atol=1e-9)


def _rec(x, event):
    # bypass the generator's margin check to exercise segment_epochs' own check
    r = object.__new__(synthgen.TrialRecording)
    r.samples, r.condition, r.event_index = x, "neutral", event
    r.channels, r.fs_hz, r.artifact = synthgen.CHANNELS, 250.0, None
    return r


def test_segment_epochs():
    ramp = np.tile(np.arange(256, dtype=float), (3, 1))
    ep = sigproc.segment_epochs(_rec(ramp, 62))
    np.testing.assert_array_equal(ep.samples, ramp)
    long = np.tile(np.arange(600, dtype=float), (3, 1))
    assert sigproc.segment_epochs(_rec(long, 300)).samples[0, 0] == 300 - 62
    with pytest.raises(IndexError):
        sigproc.segment_epochs(_rec(ramp, 61))


def _ep(x, cond="neutral"):
    return Epoch(cond, np.asarray(x, dtype=float))


def test_reject_zero_and_empty():
    assert sigproc.reject_epochs([]).kept == []
    rep = sigproc.reject_epochs([_ep(np.zeros((3, 256))) for _ in range(4)])
    assert rep.kept == [0, 1, 2, 3] and rep.rejected == []


def _suite():
    # smooth clean epochs: pooled sd is about 0.71e-5 and adjacent steps are tiny
    rng = np.random.default_rng(0)
    t = np.arange(256)

    def smooth():
        ph = rng.uniform(0, 2 * np.pi, size=(3, 1))
        return 1e-5 * np.sin(2 * np.pi * t / 256 + ph)

    clean = [smooth() for _ in range(30)]
    spike = smooth()
    spike[1, 100] = 0.006
    outlier = smooth()
    outlier[2] += 6e-5 * np.exp(-0.5 * ((t - 128) / 12.0) ** 2)   # peak |z| near 8, gentle slopes
    step = np.full((3, 256), -1.4e-5)
    step[0, 128:] = 1.4e-5                    # |z| stays near 2 but jumps by about 4
    return clean + [spike, outlier, step]


def test_rejection_partition_and_rules():
    epochs = [_ep(x) for x in _suite()]
    rep = sigproc.reject_epochs(epochs)
    assert dict(rep.rejected) == {30: "amplitude", 31: "sigma", 32: "transient"}
    assert sorted(rep.kept + [i for i, _ in rep.rejected]) == list(range(33))
    assert rep.counts() == {"amplitude": 1, "sigma": 1, "transient": 1}


def test_rejection_monotone_when_artifact_added():
    epochs = [_ep(x) for x in _suite()[:30]]
    base = len(sigproc.reject_epochs(epochs).kept)
    bad = epochs[5].samples.copy()
    bad[0, 10] = 0.01
    epochs[5] = _ep(bad)
    assert len(sigproc.reject_epochs(epochs).kept) <= base


def test_average_erp():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 256))
    np.testing.assert_array_equal(sigproc.average_erp([_ep(x)], "neutral"), x)
    np.testing.assert_allclose(sigproc.average_erp([_ep(x), _ep(-x)], "neutral"), 0.0)
    with pytest.raises(sigproc.EmptyConditionError):
        sigproc.average_erp([_ep(x)], "positive")


def test_average_noise_shrinks_with_sqrt_n():
    rng = np.random.default_rng(3)
    templ = np.sin(np.linspace(0, 6, 256))[None, :].repeat(3, axis=0)
    ratios = []
    for _ in range(50):
        eps = [_ep(templ + rng.normal(scale=1.0, size=templ.shape)) for _ in range(37)]
        avg = sigproc.average_erp(eps, "neutral")
        ratios.append(np.sqrt(np.mean((avg - templ) ** 2)))
    assert np.mean(ratios) == pytest.approx(1 / np.sqrt(37), rel=0.05)


def test_lpp_features():
    z = np.zeros((3, 256))
    np.testing.assert_array_equal(sigproc.lpp_features(z, z), 0.0)
    pos = np.zeros((3, 256))
    pos[:, 137:237] = 1.0
    np.testing.assert_allclose(sigproc.lpp_features(pos, z), [1.0, 1.0, 1.0])
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, 256)), rng.normal(size=(3, 256))
    np.testing.assert_allclose(sigproc.lpp_features(a + 7.0, b + 7.0), sigproc.lpp_features(a, b), atol=1e-12)
    with pytest.raises(SpecificationError):
        sigproc.lpp_features(np.zeros((3, 255)), z)


def test_window_indices():
    t = (np.arange(256) - 62) * 4
    assert t[0] == -248 and t[-1] == 772
    assert t[137] == 300 and t[236] == 696
    assert t[37] == -100 and t[61] == -4


def test_group_lpp_follows_generator():
    spec = synthgen.CohortSpec(n_participants=60, seed=11)
    prof = synthgen.sample_cohort(spec)
    feats, dep = [], []
    for p in prof:
        res = sigproc.process_participant(synthgen.synthesize_session(p, spec), p.id)
        feats.append(res.lpp)
        dep.append(p.labels.depression)
    feats, dep = np.array(feats), np.array(dep) == 1
    assert dep.any() and (~dep).any()
    assert np.all(feats[~dep].mean(axis=0) > feats[dep].mean(axis=0))


def test_assemble_image():
    neu = np.full((3, 256), -1.0)
    pos = np.full((3, 256), 1.0)
    neu[0, 0] = 0.25
    img = sigproc.assemble_image(neu, pos)
    assert img.values.min() == 0 and img.values.max() == 1
    assert img.values[0, 0] == pytest.approx(0.625)
    const = sigproc.assemble_image(np.zeros((3, 256)), np.zeros((3, 256)))
    assert np.all(const.values == 0.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(-1e3, 1e3), st.integers(0, 2**32 - 1))
def test_assemble_image_affine_invariance(scale, shift, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 256)), rng.normal(size=(3, 256))
    ref = sigproc.assemble_image(a, b).values
    out = sigproc.assemble_image(a * scale + shift, b * scale + shift).values
    np.testing.assert_allclose(out, ref, atol=1e-12 * max(1.0, abs(shift) / scale) * 10)


def test_process_participant_outputs():
    spec = synthgen.CohortSpec(n_participants=1, seed=3)
    p = synthgen.sample_cohort(spec)[0]
    trials = synthgen.synthesize_session(p, spec)
    res = sigproc.process_participant(trials, p.id, np.random.default_rng(0), n_smpl=2)
    assert res.image.values.shape == (6, 256) and res.image.source == "ERP"
    assert len(res.smpl) == 2 and all(s.source == "SMPL" for s in res.smpl)
    flagged = sum(t.artifact is not None for t in trials)
    assert len(res.report.rejected) == pytest.approx(flagged, abs=2)
