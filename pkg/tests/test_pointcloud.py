import numpy as np
import pytest
from scipy import stats

from rglr.errors import DegenerateCloud, EmptyCloud, ParseError
from rglr.pointcloud import (
    NoiseSpec,
    PointCloud,
    add_noise,
    load,
    rescale_to_diagonal,
    sample_laplace,
    save,
)


def test_xyz_two_points(tmp_path):
    f = tmp_path / "a.xyz"
    f.write_text("0 0 0\n1 0 0\n")
    c = load(f)
    assert len(c) == 2
    np.testing.assert_array_equal(c.points, [[0, 0, 0], [1, 0, 0]])
    assert c.normals is None


def test_ply_three_points(tmp_path):
    f = tmp_path / "a.ply"
    f.write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
        "property float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n"
    )
    assert len(load(f)) == 3


def test_malformed_row_reports_line(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("0 0 0\n1 2\n")
    with pytest.raises(ParseError) as err:
        load(f)
    assert err.value.line == 2
    assert "line 2" in str(err.value)


def test_non_numeric_and_binary(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("0 0 x\n")
    with pytest.raises(ParseError):
        load(f)
    g = tmp_path / "b.ply"
    g.write_text("ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n")
    with pytest.raises(ParseError, match="ASCII"):
        load(g)


def test_empty_cloud(tmp_path):
    f = tmp_path / "e.xyz"
    f.write_text("# nothing\n")
    with pytest.raises(EmptyCloud):
        load(f)


@pytest.mark.parametrize("fmt", ["xyz", "ply"])
def test_round_trip(tmp_path, rng, fmt):
    pts = rng.standard_normal((20, 3)) * 1e3
    nrm = rng.standard_normal((20, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    c = PointCloud(pts, nrm)
    path = tmp_path / f"c.{fmt}"
    save(c, path)
    back = load(path)
    np.testing.assert_allclose(back.points, pts, rtol=0, atol=1e-12 * 1e3)
    np.testing.assert_allclose(back.normals, nrm, atol=1e-12)
    assert b"\r\n" not in path.read_bytes()


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save(PointCloud(np.zeros((1, 3))), tmp_path / "missing" / "x.xyz")


def test_cloud_invariants():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), normals=np.ones((2, 3)))
    with pytest.raises(ValueError):
        PointCloud([[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), labels=[0, 2])
    c = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


def test_rescale_cube():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    out, s = rescale_to_diagonal(PointCloud(corners), 2 * np.sqrt(3))
    assert s == pytest.approx(2.0)
    np.testing.assert_allclose(np.ptp(out.points, axis=0), [2, 2, 2])
    np.testing.assert_allclose(out.points.mean(axis=0), [0.5, 0.5, 0.5])


def test_rescale_random_and_idempotent(rng):
    c = PointCloud(rng.random((100, 3)) * 7)
    out, _ = rescale_to_diagonal(c, 100.0)
    assert out.diagonal() == pytest.approx(100.0, rel=1e-9)
    again, s = rescale_to_diagonal(out, 100.0)
    np.testing.assert_allclose(again.points, out.points, atol=1e-9)
    assert s == pytest.approx(1.0)


def test_rescale_conforming_identity():
    c = PointCloud([[0, 0, 0], [100, 0, 0]])
    out, s = rescale_to_diagonal(c, 100.0)
    assert s == 1.0 and out == c


def test_rescale_degenerate():
    with pytest.raises(DegenerateCloud):
        rescale_to_diagonal(PointCloud(np.ones((4, 3))))


def test_noise_zero_sigma_identity(rng):
    c = PointCloud(rng.random((10, 3)))
    assert add_noise(c, NoiseSpec("gaussian", 0.0, 1)) == c


def test_gaussian_noise_statistics():
    c = PointCloud(np.zeros((100_000, 3)))
    e = add_noise(c, NoiseSpec("gaussian", 0.2, 7)).points
    assert 0.195 <= e.std(axis=0).min() and e.std(axis=0).max() <= 0.205


def test_laplacian_noise_statistics():
    c = PointCloud(np.zeros((100_000, 3)))
    e = add_noise(c, NoiseSpec("laplacian", 0.3, 7)).points
    sd = e.std(axis=0)
    assert np.all((0.29 <= sd) & (sd <= 0.31))
    kurt = stats.kurtosis(e, axis=0)
    assert np.all(np.abs(kurt - 3.0) <= 0.3)


def test_laplace_sampler_variance():
    x = sample_laplace(np.random.default_rng(3), 0.5 / np.sqrt(2), 1_000_000)
    assert x.var() == pytest.approx(0.25, rel=0.02)


def test_noise_seeds():
    c = PointCloud(np.zeros((50, 3)))
    a = add_noise(c, NoiseSpec("laplacian", 0.1, 1))
    b = add_noise(c, NoiseSpec("laplacian", 0.1, 1))
    d = add_noise(c, NoiseSpec("laplacian", 0.1, 2))
    assert a == b and not a == d


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec("gaussian", -1.0)
    with pytest.raises(ValueError):
        NoiseSpec("uniform", 1.0)
