import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image as PILImage

from tomomip.core import Image, Sinogram, bms, mc
from tomomip.datasets import (NoiseSpec, PhantomSpec, angle_indices, apply_poisson_noise,
                              export_png, generate_phantom, ray_rows, read_image,
                              read_sinogram, subsample_angles, write_image, write_sinogram)
from tomomip.projector import build_geometry, build_radon_matrix, project


def test_phantom_centre_and_corner():
    spec = PhantomSpec(side=64)
    a = generate_phantom(spec).as_array()
    assert a[32, 32] == spec.material_value  # centre lies between the two holes
    assert a[0, 0] == 0 and a[-1, -1] == 0


def test_phantom_membership_oracle():
    spec = PhantomSpec(side=50)
    a = generate_phantom(spec).as_array()
    count = 0
    for r in range(50):
        for c in range(50):
            x, y = (c + 0.5) / 50, (r + 0.5) / 50
            inside = ((x - 0.5) / 0.35) ** 2 + ((y - 0.5) / 0.25) ** 2 <= 1
            for (hx, hy), rad in spec.holes:
                inside = inside and (x - hx) ** 2 + (y - hy) ** 2 > rad ** 2
            count += inside
    assert mc(a) == count
    assert set(np.unique(a)) == {0.0, 255.0}
    assert bms(a) == 1.0


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(material_value=0)
    with pytest.raises(ValueError):
        PhantomSpec(holes=(((0.5, 0.5), 0.3),))  # larger than the ellipse's minor axis


def _sino(values, angles=(0.0,)):
    values = np.asarray(values, float)
    return Sinogram(angles, values.size // len(angles), values)


def test_noise_zero_stays_zero():
    s = _sino(np.zeros(6))
    assert not apply_poisson_noise(s, NoiseSpec()).values.any()


def test_noise_is_seed_deterministic():
    s = _sino(np.linspace(0, 5, 40))
    a = apply_poisson_noise(s, NoiseSpec(100, seed=3)).values
    b = apply_poisson_noise(s, NoiseSpec(100, seed=3)).values
    c = apply_poisson_noise(s, NoiseSpec(100, seed=4)).values
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_noise_mean_statistical_oracle():
    clean, dose = 2.0, 50.0
    s = _sino([clean, 8.0])  # p_ref = 8, so the first bin has Poisson rate dose/4
    draws = np.array([apply_poisson_noise(s, NoiseSpec(dose, seed=k)).values[0]
                      for k in range(10_000)])
    lam = dose * clean / 8.0
    sigma = np.sqrt(lam) * 8.0 / dose / np.sqrt(draws.size)
    assert abs(draws.mean() - clean) <= 3 * sigma
    assert np.all(draws >= 0)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.integers(0, 2**32 - 1))
def test_noise_keeps_nonnegativity(vals, seed):
    out = apply_poisson_noise(_sino(vals), NoiseSpec(1e3, seed)).values
    assert np.all(out >= 0)


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(dose=0)


def test_subsample_identity_and_five_angles():
    g = build_geometry(180, 0, 8)
    full = Sinogram(g.angles_deg, 4, np.arange(720.0))
    same = subsample_angles(full, g.angles_deg)
    assert np.array_equal(same.values, full.values)
    five = subsample_angles(full, build_geometry(5, 0, 8))
    assert five.angles == (0.0, 36.0, 72.0, 108.0, 144.0)
    assert np.array_equal(five.as_array()[1], full.as_array()[36])


def test_subsample_wedge_twenty_one_angles():
    g = build_geometry(21, 60, 8)
    assert len(g.angles_deg) == 21 and g.angles_deg[0] == 30 and g.angles_deg[-1] == 150
    full = Sinogram(build_geometry(180, 0, 8).angles_deg, 2, np.ones(360))
    assert len(subsample_angles(full, g).angles) == 21


def test_subsample_missing_angle():
    full = Sinogram((0.0, 10.0), 2, np.ones(4))
    with pytest.raises(KeyError):
        subsample_angles(full, (5.0,))


def test_subsampling_commutes_with_row_restriction():
    gfull = build_geometry(180, 0, 16)
    R = build_radon_matrix(gfull)
    img = generate_phantom(PhantomSpec(side=16))
    target = build_geometry(11, 60, 16)
    idx = angle_indices(gfull.angles_deg, target.angles_deg)
    a = subsample_angles(project(gfull, R, img), target).values
    b = R.take_rows(ray_rows(idx, gfull.detector_count)) @ img.pixels
    assert np.array_equal(a, b)


# --- files -----------------------------------------------------------------

def test_raw_image_round_trip(tmp_path, rng):
    img = Image.from_array(rng.random((5, 7)) * 1e3)
    write_image(img, tmp_path / "x")
    back = read_image(tmp_path / "x.img.json")
    assert back.shape == (5, 7) and np.array_equal(back.pixels, img.pixels)


def test_raw_sinogram_round_trip(tmp_path, rng):
    s = Sinogram((0.0, 45.5), 3, rng.random(6))
    write_sinogram(s, tmp_path / "s.sino.json")
    back = read_sinogram(tmp_path / "s")
    assert back.angles == s.angles and np.array_equal(back.values, s.values)


def test_malformed_headers(tmp_path):
    write_image(Image.from_array(np.ones((2, 2))), tmp_path / "a")
    meta = tmp_path / "a.img.json"
    meta.write_text("{not json")
    with pytest.raises(ValueError):
        read_image(meta)
    meta.write_text(json.dumps({"width": 1 << 20, "height": 1 << 20, "dtype": "f64"}))
    with pytest.raises(ValueError):
        read_image(meta)
    meta.write_text(json.dumps({"width": 3, "height": 2, "dtype": "f64"}))
    with pytest.raises(ValueError):
        read_image(meta)  # payload holds 4 pixels, header claims 6


def test_png_export_levels(tmp_path):
    a = np.zeros((6, 6))
    a[2:4, 1:5] = 17.0
    path = export_png(Image.from_array(a), tmp_path / "b.png")
    px = np.asarray(PILImage.open(path))
    assert set(np.unique(px)) == {0, 255}
    rng = np.random.default_rng(0)
    path = export_png(Image.from_array(rng.random((8, 8))), tmp_path / "r.png")
    assert np.asarray(PILImage.open(path)).max() == 255
    path16 = export_png(Image.from_array(a), tmp_path / "b16.png", bits=16)
    assert np.asarray(PILImage.open(path16)).max() == 65535
