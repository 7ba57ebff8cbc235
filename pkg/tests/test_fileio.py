import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flowembed import fileio
from flowembed.embednet import NetworkConfig
from flowembed.fileio import FormatError
from flowembed.flowloss import KernelConfig

# .flo -------------------------------------------------------------------------


def test_flo_round_trip_bits(tmp_path):
    flow = np.random.default_rng(0).normal(size=(2, 3, 2)).astype(np.float32)
    fileio.flo_write(flow, tmp_path / "a.flo")
    back = fileio.flo_read(tmp_path / "a.flo")
    assert back.shape == (2, 3, 2)
    assert back.astype(np.float32).tobytes() == flow.tobytes()


@settings(max_examples=30)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.just(2)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_flo_round_trip_property(tmp_path_factory, flow):
    path = tmp_path_factory.mktemp("flo") / "p.flo"
    fileio.flo_write(flow, path)
    assert fileio.flo_read(path).astype(np.float32).tobytes() == flow.tobytes()


def test_flo_layout(tmp_path):
    flow = np.arange(24, dtype=np.float64).reshape(3, 4, 2)
    fileio.flo_write(flow, tmp_path / "a.flo")
    blob = (tmp_path / "a.flo").read_bytes()
    assert struct.unpack("<f", blob[:4])[0] == 202021.25
    assert struct.unpack("<ii", blob[4:12]) == (4, 3)
    assert len(blob) == 12 + 24 * 4
    assert struct.unpack("<2f", blob[12:20]) == (0.0, 1.0)


def test_flo_double_narrowed(tmp_path):
    flow = np.full((1, 1, 2), 0.1)
    fileio.flo_write(flow, tmp_path / "a.flo")
    assert fileio.flo_read(tmp_path / "a.flo")[0, 0, 0] == float(np.float32(0.1))


def test_flo_bad_magic(tmp_path):
    (tmp_path / "a.flo").write_bytes(struct.pack("<fii", 0.0, 1, 1) + b"\0" * 8)
    with pytest.raises(FormatError, match="not a flow file"):
        fileio.flo_read(tmp_path / "a.flo")


def test_flo_short_read(tmp_path):
    (tmp_path / "a.flo").write_bytes(struct.pack("<fii", 202021.25, 4, 3) + b"\0" * (4 * 11))
    with pytest.raises(FormatError, match=r"short read at pair \(1,1\)"):
        fileio.flo_read(tmp_path / "a.flo")


def test_flo_write_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        fileio.flo_write(np.zeros((3, 3)), tmp_path / "a.flo")


# netpbm -------------------------------------------------------------------------

def test_pgm_zero_round_trip(tmp_path):
    fileio.pgm_write(np.zeros((4, 5)), tmp_path / "z.pgm")
    back = fileio.pgm_read(tmp_path / "z.pgm")
    assert back.shape == (4, 5) and not back.any()


def test_pgm_value_128(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n1 1\n255\n" + bytes([128]))
    assert fileio.pgm_read(tmp_path / "a.pgm")[0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_pgm_bytes_round_trip(tmp_path):
    data = np.arange(256, dtype=np.uint8).reshape(16, 16)
    fileio.pgm_write(data, tmp_path / "a.pgm")
    back = fileio.pgm_read(tmp_path / "a.pgm")
    assert np.array_equal(fileio.to_bytes(back), data)
    fileio.pgm_write(back, tmp_path / "b.pgm")
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_round_half_up():
    assert fileio.to_bytes(np.array([0.5 / 255, 1.5 / 255, 1.0, 2.0, -1.0])).tolist() == [1, 2, 255, 255, 0]


def test_pgm_header_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    assert fileio.pgm_read(tmp_path / "c.pgm").tolist() == [[0.0, 1.0]]


def test_ascii_rejected(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n128\n")
    with pytest.raises(FormatError, match="ASCII"):
        fileio.pgm_read(tmp_path / "a.pgm")
    (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n1 2 3\n")
    with pytest.raises(FormatError, match="ASCII"):
        fileio.ppm_read(tmp_path / "a.ppm")


def test_maxval_rejected(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n1 1\n65535\n\0\0")
    with pytest.raises(FormatError, match="maxval"):
        fileio.pgm_read(tmp_path / "a.pgm")


def test_truncated_pixels(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(FormatError, match="truncated"):
        fileio.pgm_read(tmp_path / "a.pgm")


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(3).integers(0, 256, size=(3, 4, 3), dtype=np.uint8)
    fileio.ppm_write(img, tmp_path / "a.ppm")
    assert np.array_equal(fileio.ppm_read(tmp_path / "a.ppm"), img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n4 3\n255\n")


# dataset layout --------------------------------------------------------------------

def test_manifest_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        fileio.read_dataset(tmp_path)


def test_missing_frame(tmp_path):
    (tmp_path / "manifest.txt").write_text("pair_00000 1\n")
    with pytest.raises(FileNotFoundError, match="frame1"):
        fileio.read_dataset(tmp_path)


def test_optional_files(tmp_path):
    d = tmp_path / "pair_00000"
    d.mkdir()
    fileio.pgm_write(np.zeros((2, 2)), d / "frame1.pgm")
    (tmp_path / "manifest.txt").write_text("# pair_id seed\npair_00000\n")
    (p,) = fileio.read_dataset(tmp_path)
    assert p.frame2 is None and p.forward_flow is None and p.mask is None and p.pair_id == "pair_00000"


# config ----------------------------------------------------------------------------

SECTIONS = {"kernel": KernelConfig(), "net": NetworkConfig()}


def test_config_defaults_and_overrides(caplog):
    text = "# comment\nkernel.sigma = 0.25\n\nnet.embedding_dim = 64  # wide embedding\n"
    with caplog.at_level(logging.INFO, logger="flowembed.fileio"):
        cfg = fileio.parse_config(text, SECTIONS)
    assert cfg["kernel"].sigma == 0.25 and cfg["kernel"].eps_flow == 1.0
    assert cfg["net"].embedding_dim == 64 and cfg["net"].levels == 3
    assert "kernel.eps_flow = 1.0 (default)" in caplog.text
    assert "kernel.sigma = 0.25 (file)" in caplog.text


def test_config_unknown_key():
    with pytest.raises(ValueError, match="unknown key"):
        fileio.parse_config("kernel.sigmaa = 1\n", SECTIONS)
    with pytest.raises(ValueError, match="unknown key"):
        fileio.parse_config("optimizer.lr = 1\n", SECTIONS)


def test_config_bad_lines():
    with pytest.raises(ValueError, match="line 2"):
        fileio.parse_config("kernel.sigma = 1\nnonsense\n", SECTIONS)
    with pytest.raises(ValueError, match="bad value"):
        fileio.parse_config("net.levels = three\n", SECTIONS)


def test_config_validation_propagates():
    with pytest.raises(ValueError):
        fileio.parse_config("kernel.sigma = -1\n", SECTIONS)
