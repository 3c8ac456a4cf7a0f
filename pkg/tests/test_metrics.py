import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascnn.codec import degrade
from cascnn.dataset import synth_corpus
from cascnn.metrics import (
    PSNR_INF,
    MetricReport,
    bef,
    ipsnr,
    ipsnr_b,
    mse,
    psnr,
    psnr_b,
    psnr_gain,
    snap_to_8bit,
    ssim,
)
from oracles import bef_pairs, mse_loop


def test_psnr_constant_difference():
    x = np.full((16, 16), 0.3)
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_identical_is_sentinel():
    x = np.random.default_rng(0).random((8, 8))
    assert psnr(x, x) == PSNR_INF == math.inf


def test_psnr_half_pixels():
    x = np.zeros((8, 8))
    y = x.copy()
    y[:4] = 0.5
    assert mse(x, y) == 0.125
    assert psnr(x, y) == pytest.approx(10 * math.log10(8), abs=1e-12)
    assert psnr(x, y) == pytest.approx(9.031, abs=1e-3)


def test_mse_matches_loop(rng):
    a, b = rng.random((9, 11)), rng.random((9, 11))
    assert mse(a, b) == pytest.approx(mse_loop(a, b), rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((8, 8)), np.zeros((8, 9)))


def test_psnr_monotone_in_error(rng):
    x = rng.random((12, 12)) * 0.5 + 0.25
    e = rng.standard_normal((12, 12)) * 0.01
    values = [psnr(x, x + k * e) for k in (1, 2, 4, 8)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_ssim_identity(rng):
    x = rng.random((20, 17))
    assert ssim(x, x) == 1.0


def test_ssim_constant_offset_closed_form():
    c1 = 0.01 ** 2
    expected = (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1)
    got = ssim(np.full((8, 8), 0.5), np.full((8, 8), 0.6))
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.983609, abs=1e-6)


def test_ssim_symmetric_and_bounded(rng):
    x, y = rng.random((16, 16)), rng.random((16, 16))
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-14)
    assert abs(ssim(x, y)) <= 1
    assert abs(ssim(x, 1 - x)) <= 1


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((7, 20)), np.zeros((7, 20)))


def test_bef_constant_and_ramp():
    assert bef(np.full((32, 32), 0.4)) == 0
    ramp = np.tile(np.linspace(0, 1, 32), (32, 1))
    assert bef(ramp) == 0


def test_bef_blockwise_constant_matches_oracle(rng):
    img = np.kron(rng.random((4, 5)), np.ones((8, 8)))
    got = bef(img)
    assert got > 0
    assert abs(got - bef_pairs(img)) < 1e-10


@pytest.mark.parametrize("shape", [(16, 16), (24, 40), (33, 19)])
def test_bef_matches_oracle_on_noise(rng, shape):
    img = rng.random(shape)
    assert abs(bef(img) - bef_pairs(img)) < 1e-10


def test_bef_eta_convention():
    img = np.kron(np.array([[0.0, 1.0], [1.0, 0.0]]), np.ones((8, 8)))
    # 16x16: boundary pairs all differ by 1, interior by 0; eta = log2(8)/log2(16)
    assert bef(img) == pytest.approx(0.75, abs=1e-12)


def test_bef_shift_invariant(rng):
    img = rng.random((24, 24)) * 0.5
    assert bef(img + 0.3) == pytest.approx(bef(img), abs=1e-12)


def test_bef_too_small():
    with pytest.raises(ValueError):
        bef(np.zeros((15, 40)))


def test_psnr_b_equals_psnr_without_blocking():
    x = np.full((16, 16), 0.2)
    assert psnr_b(x, x + 0.1) == pytest.approx(psnr(x, x + 0.1))


def test_psnr_b_below_psnr_at_qf10():
    im = synth_corpus(1, 64, seed=3)[0]
    d = degrade(im, 10)
    assert psnr_b(im, d) < psnr(im, d)


def test_psnr_b_never_above_psnr(rng):
    for _ in range(100):
        x, y = rng.random((16, 16)), rng.random((16, 16))
        assert psnr_b(x, y) <= psnr(x, y)


def test_ipsnr_paper_arithmetic():
    assert psnr_gain(31.70, 30.07) == pytest.approx(1.63, abs=1e-9)
    assert psnr_gain(35.78, 33.99) == pytest.approx(1.79, abs=1e-9)


def test_ipsnr_pairs(rng):
    ref = rng.random((16, 16))
    base = snap_to_8bit(ref + 0.05 * rng.standard_normal(ref.shape))
    better = snap_to_8bit(ref + 0.02 * rng.standard_normal(ref.shape))
    assert ipsnr((ref, base), (ref, base)) == 0
    assert ipsnr_b((ref, base), (ref, base)) == 0
    assert ipsnr((ref, better), (ref, base)) == pytest.approx(psnr(ref, better) - psnr(ref, base))
    with pytest.raises(ValueError):
        ipsnr((ref, better), (ref + 0.1, base))


def test_flip_invariance(rng):
    x, y = rng.random((24, 24)), rng.random((24, 24))
    fx, fy = x[:, ::-1], y[:, ::-1]
    assert psnr(fx, fy) == pytest.approx(psnr(x, y), abs=1e-10)
    assert ssim(fx, fy) == pytest.approx(ssim(x, y), abs=1e-10)
    assert psnr_b(fx, fy) == pytest.approx(psnr_b(x, y), abs=1e-10)


def test_snap_to_8bit():
    s = snap_to_8bit(np.array([[-0.1, 0.5, 1.2, 0.0021]]))
    assert s.tolist() == [[0.0, 128 / 255, 1.0, 1 / 255]]


def test_report_means_and_csv(rng):
    rep = MetricReport()
    refs = [rng.random((16, 16)) for _ in range(3)]
    for i, r in enumerate(refs):
        rep.add(f"im{i}", r, snap_to_8bit(r + 0.03), baseline=snap_to_8bit(r + 0.05))
    m = rep.means
    assert m.psnr == pytest.approx(np.mean([row.psnr for row in rep.rows]))
    assert m.ipsnr > 0
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "image,psnr,psnr_b,ssim,ipsnr,ipsnr_b"
    assert lines[-1].startswith("MEAN,") and len(lines) == 5


def test_report_inf_formatting():
    rep = MetricReport()
    x = np.full((16, 16), 0.5)
    rep.add("same", x, x, baseline=x)
    assert rep.to_csv().splitlines()[1].startswith("same,inf,inf,")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.001, 0.3))
def test_property_psnr_b_le_psnr(seed, noise):
    rng = np.random.default_rng(seed)
    x = rng.random((16, 16))
    y = np.clip(x + noise * rng.standard_normal(x.shape), 0, 1)
    assert psnr_b(x, y) <= psnr(x, y)
    assert -1 <= ssim(x, y) <= 1
