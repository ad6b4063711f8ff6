import numpy as np
import pytest

from facedetail import pngio
from facedetail.errors import InvalidInputError
from facedetail.lines import LineMap
from facedetail.raster import DisplacementMap, DistanceField


def test_displacement_round_trip_quantization_bound(tmp_path):
    rng = np.random.default_rng(0)
    disp = DisplacementMap(rng.normal(scale=0.02, size=(64, 64)))
    path = str(tmp_path / "d.png")
    scale = pngio.save_displacement(path, disp)
    back = pngio.load_displacement(path)
    # one quantization step of the symmetric 16-bit mapping
    assert np.max(np.abs(back.values - disp.values)) <= scale * 2.0 / 65535.0 + 1e-9


def test_displacement_save_is_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    disp = DisplacementMap(rng.normal(size=(64, 64)))
    p1, p2 = str(tmp_path / "a.png"), str(tmp_path / "b.png")
    pngio.save_displacement(p1, disp)
    pngio.save_displacement(p2, disp)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_zero_map_uses_unit_scale(tmp_path):
    path = str(tmp_path / "z.png")
    scale = pngio.save_displacement(path, DisplacementMap(np.zeros((64, 64))))
    assert scale == 1.0
    # the symmetric mapping has no exact code for 0, so allow one half-step
    back = pngio.load_displacement(path).values
    assert np.max(np.abs(back)) <= 1.0 / 65535.0


def test_explicit_scale_too_small_rejected(tmp_path):
    disp = DisplacementMap(np.full((64, 64), 2.0))
    with pytest.raises(InvalidInputError):
        pngio.save_displacement(str(tmp_path / "x.png"), disp, scale=1.0)


def test_distance_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    df = DistanceField(rng.uniform(0.0, 3.2, size=(64, 64)))
    path = str(tmp_path / "df.png")
    pngio.save_distance(path, df)
    back = pngio.load_distance(path)
    assert back.truncation == df.truncation
    assert np.max(np.abs(back.values - df.values)) <= df.truncation / 65535.0 + 1e-9


def test_distance_kind_checked(tmp_path):
    rng = np.random.default_rng(3)
    disp_path = str(tmp_path / "d.png")
    pngio.save_displacement(disp_path, DisplacementMap(rng.normal(size=(64, 64))))
    with pytest.raises(InvalidInputError):
        pngio.load_distance(disp_path)


def test_linemap_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    lm = LineMap((rng.random((64, 64)) < 0.05).astype(np.uint8))
    path = str(tmp_path / "l.png")
    pngio.save_linemap(path, lm)
    assert np.array_equal(pngio.load_linemap(path).mask, lm.mask)


def test_meta_round_trip(tmp_path):
    path = str(tmp_path / "m.meta")
    pngio.write_meta(path, {"kind": "disp", "width": 64, "scale": "0.125"})
    meta = pngio.read_meta(path)
    assert meta == {"kind": "disp", "width": "64", "scale": "0.125"}


def test_malformed_meta_rejected(tmp_path):
    path = str(tmp_path / "bad.meta")
    with open(path, "w") as fh:
        fh.write("no separator here\n")
    with pytest.raises(InvalidInputError):
        pngio.read_meta(path)
