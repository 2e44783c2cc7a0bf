import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdhnet import events as ev
from bdhnet import io as fio
from bdhnet import metrics, oracles


def img(seed, shape=(20, 24)):
    return np.random.default_rng(seed).uniform(size=shape)


# ---------------------------------------------------------------- psnr

def test_psnr_identical_is_capped():
    a = img(0)
    assert metrics.psnr(a, a) == 99.0


def test_psnr_uniform_offset():
    a = img(1)
    assert metrics.psnr(a, a + 0.1) == 20.0


@settings(max_examples=25, deadline=None)
@given(exp=st.integers(-10, -1))
def test_psnr_shift_law_dyadic(exp):
    # dyadic offsets make the squared error exact, so the law holds exactly
    a = np.round(img(2) * 256) / 256
    d = 2.0 ** exp
    assert metrics.psnr(a, a + d) == 20 * np.log10(1 / d)


def test_psnr_matches_oracle():
    a, b = img(3), img(4)
    assert abs(metrics.psnr(a, b) - oracles.psnr(a, b)) <= 1e-10


def test_psnr_errors():
    with pytest.raises(ValueError):
        metrics.psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        metrics.psnr(np.zeros((2, 2)), np.zeros((2, 2)), peak=0)


# ---------------------------------------------------------------- ssim

def test_ssim_self():
    a = img(5)
    assert abs(metrics.ssim(a, a) - 1.0) <= 1e-9


def test_ssim_anticorrelated():
    a = np.zeros((16, 16))
    a[:, 8:] = 1.0
    assert metrics.ssim(a, 1 - a) < 0


def test_ssim_symmetric():
    a, b = img(6), img(7)
    assert abs(metrics.ssim(a, b) - metrics.ssim(b, a)) <= 1e-12


def test_ssim_matches_windowed_oracle():
    a = img(8, (16, 18))
    b = np.clip(a + np.random.default_rng(9).normal(0, 0.1, a.shape), 0, 1)
    assert abs(metrics.ssim(a, b) - oracles.ssim(a, b)) <= 1e-6


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_report_from_pairs():
    a, b = img(10), img(11)
    rep = metrics.MetricReport.from_pairs([(a, a), (a, b)], names=["same", "diff"])
    assert rep.per_image[0]["psnr"] == 99.0 and rep.per_image[1]["name"] == "diff"
    assert rep.psnr == pytest.approx((99.0 + metrics.psnr(a, b)) / 2)
    assert -1 <= rep.ssim <= 1


# ---------------------------------------------------------------- .ten

@settings(max_examples=25, deadline=None)
@given(shape=st.lists(st.integers(0, 5), min_size=0, max_size=4), seed=st.integers(0, 100))
def test_ten_round_trip(tmp_path_factory, shape, seed):
    a = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    path = tmp_path_factory.mktemp("ten") / "a.ten"
    fio.write_ten(path, a)
    back = fio.read_ten(path)
    assert back.dtype == np.float32 and back.shape == a.shape and back.tobytes() == a.tobytes()


def test_ten_layout(tmp_path):
    fio.write_ten(tmp_path / "a.ten", np.array([[1.0, 2.0, 3.0]]))
    buf = (tmp_path / "a.ten").read_bytes()
    assert buf[:4] == b"TEN1" and struct.unpack("<III", buf[4:16]) == (2, 1, 3)
    assert np.frombuffer(buf[16:], "<f4").tolist() == [1.0, 2.0, 3.0]


def test_ten_truncated_reports_offset(tmp_path):
    fio.write_ten(tmp_path / "a.ten", np.zeros((4, 4)))
    buf = (tmp_path / "a.ten").read_bytes()
    (tmp_path / "b.ten").write_bytes(buf[:-3])
    with pytest.raises(fio.FormatError) as info:
        fio.read_ten(tmp_path / "b.ten")
    assert info.value.offset is not None
    (tmp_path / "c.ten").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(fio.FormatError, match="magic"):
        fio.read_ten(tmp_path / "c.ten")
    (tmp_path / "d.ten").write_bytes(buf + b"\0")
    with pytest.raises(fio.FormatError):
        fio.read_ten(tmp_path / "d.ten")


# ---------------------------------------------------------------- .evt

def stream(seed=0):
    from bdhnet.numerics import Rng
    seq = ev.synthesize_scene(ev.SceneSpec(16, 16, 9, "texture", 1.0), Rng(seed))
    return ev.generate_events(seq, 0.2)


def test_evt_round_trip(tmp_path):
    s = stream()
    fio.write_evt(tmp_path / "a.evt", s)
    back = fio.read_evt(tmp_path / "a.evt")
    for f in "txyp":
        assert np.array_equal(getattr(back, f), getattr(s, f))
    assert back.sensor_size == s.sensor_size and back.exposure == s.exposure and back.contrast == s.contrast
    fio.write_evt(tmp_path / "b.evt", back)
    assert (tmp_path / "a.evt").read_bytes() == (tmp_path / "b.evt").read_bytes()


def test_evt_empty_round_trip(tmp_path):
    s = ev.EventStream.empty((3, 5), 1.0, 0.2)
    fio.write_evt(tmp_path / "a.evt", s)
    back = fio.read_evt(tmp_path / "a.evt")
    assert len(back) == 0 and back.sensor_size == (3, 5)


def test_evt_decreasing_time_names_line(tmp_path):
    fio.write_evt(tmp_path / "a.evt", stream())
    lines = (tmp_path / "a.evt").read_text().splitlines()
    lines[5], lines[9] = lines[9], lines[5]
    (tmp_path / "b.evt").write_text("\n".join(lines) + "\n")
    with pytest.raises(fio.FormatError) as info:
        fio.read_evt(tmp_path / "b.evt")
    ts = [float(l.split(",")[0]) for l in lines[2:]]
    first = next(i for i in range(1, len(ts)) if ts[i] < ts[i - 1])
    assert info.value.line == first + 3


@pytest.mark.parametrize("bad", ["0.5,1,1,0", "0.5,99,1,1", "0.5,1", "abc,1,1,1"])
def test_evt_rejects_bad_rows(tmp_path, bad):
    (tmp_path / "a.evt").write_text(f"#meta 4 4 1.0 0.2\nt,x,y,p\n0.1,0,0,1\n{bad}\n")
    with pytest.raises(fio.FormatError) as info:
        fio.read_evt(tmp_path / "a.evt")
    assert info.value.line == 4


# ---------------------------------------------------------------- PGM

def test_pgm_round_trip(tmp_path):
    a = np.random.default_rng(0).integers(0, 256, size=(5, 7)).astype(np.uint8)
    fio.write_pgm(tmp_path / "a.pgm", a)
    assert np.array_equal(fio.read_pgm(tmp_path / "a.pgm"), a)
    buf = (tmp_path / "a.pgm").read_bytes()
    fio.write_pgm(tmp_path / "b.pgm", fio.read_pgm(tmp_path / "a.pgm"))
    assert (tmp_path / "b.pgm").read_bytes() == buf


def test_pgm_float_scaling(tmp_path):
    fio.write_pgm(tmp_path / "a.pgm", np.array([[0.0, 0.5, 1.0, 2.0]]))
    assert fio.read_pgm(tmp_path / "a.pgm").tolist() == [[0, 128, 255, 255]]


def test_pgm_rejects_other_maxval(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n2 1\n65535\n\0\0\0\0")
    with pytest.raises(fio.FormatError, match="255"):
        fio.read_pgm(tmp_path / "a.pgm")


def test_pgm_truncated_offset(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(fio.FormatError) as info:
        fio.read_pgm(tmp_path / "a.pgm")
    assert info.value.offset == 11
