import csv

import numpy as np
import pytest

from drm.data import (EnvSpec, canonical_env_specs, export_csv, latent_joint,
                      latent_scm, make_environment, shape_prototypes,
                      split_train_val)
from drm.exact import joint


def spec(rho=0.9, n=1000, seed=0, **kw):
    return EnvSpec(rho=rho, n=n, seed=seed, **kw)


def test_spec_validation():
    with pytest.raises(ValueError):
        spec(rho=1.5)
    with pytest.raises(ValueError):
        spec(label_noise=1.0)
    with pytest.raises(ValueError):
        spec(n=0)


def test_same_spec_same_seed_identical():
    a = make_environment(spec(seed=3))
    b = make_environment(spec(seed=3))
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.y, b.y)
    assert np.array_equal(a.digit, b.digit)
    assert np.array_equal(a.color, b.color)


def test_different_seeds_differ():
    a = make_environment(spec(seed=3))
    b = make_environment(spec(seed=4))
    assert not np.array_equal(a.x, b.x)


def test_color_agreement_rate():
    ds = make_environment(spec(rho=0.9, n=100000, seed=1))
    rate = (ds.color == ds.y).mean()
    assert 0.89 <= rate <= 0.91


def test_label_noise_rate():
    ds = make_environment(spec(rho=0.9, n=100000, seed=2))
    rate = (ds.y == ds.digit).mean()
    assert 0.74 <= rate <= 0.76


def test_prototypes_unit_antipodal_and_shared():
    s1 = spec(seed=5, proto_seed=7)
    s2 = spec(rho=0.1, seed=99, proto_seed=7)
    p1, p2 = shape_prototypes(s1), shape_prototypes(s2)
    assert np.array_equal(p1, p2)
    assert np.linalg.norm(p1[0]) == pytest.approx(1.0)
    assert np.allclose(p1[1], -p1[0])


def test_feature_layout():
    ds = make_environment(spec(n=500, seed=6))
    assert ds.x.shape == (500, 16)
    # color block is a low-noise one-hot scaled by color_scale
    hot = ds.x[np.arange(500), ds.color]
    cold = ds.x[np.arange(500), 1 - ds.color]
    assert hot.mean() == pytest.approx(1.0, abs=0.05)
    assert cold.mean() == pytest.approx(0.0, abs=0.05)


def test_latent_joint_values():
    scm = latent_joint(spec(rho=0.9))
    pyz = joint(scm, 0).marginal("Y", "Z").values()
    assert pyz[1, 1] == pytest.approx(0.45, abs=1e-12)
    px = joint(scm, 0).marginal("X").values()
    assert px[0] == pytest.approx(0.35, abs=1e-12)
    assert joint(scm, 0).values().sum() == pytest.approx(1.0, abs=1e-12)


def test_latent_joint_matches_empirical_frequencies():
    sp = spec(rho=0.9, n=100000, seed=8)
    ds = make_environment(sp)
    scm = latent_joint(sp)
    table = joint(scm, 0).values()   # [x, y, z]
    for s in (0, 1):
        for y in (0, 1):
            for c in (0, 1):
                emp = ((ds.digit == s) & (ds.y == y) & (ds.color == c)).mean()
                assert emp == pytest.approx(table[2 * s + c, y, c], abs=0.01)


def test_diagnostics_within_three_standard_errors():
    sp = spec(rho=0.8, n=20000, seed=9)
    ds = make_environment(sp)
    for rate, p in (((ds.color == ds.y).mean(), 0.8),
                    ((ds.y == ds.digit).mean(), 0.75)):
        se = np.sqrt(p * (1 - p) / sp.n)
        assert abs(rate - p) <= 3 * se


def test_split_sizes_and_union():
    ds = make_environment(spec(n=10, seed=10))
    train, val = split_train_val(ds, 0.8, seed=0)
    assert (len(train), len(val)) == (8, 2)
    merged = np.sort(np.concatenate([train.x[:, 0], val.x[:, 0]]))
    assert np.array_equal(merged, np.sort(ds.x[:, 0]))


def test_split_deterministic():
    ds = make_environment(spec(n=100, seed=11))
    a1, b1 = split_train_val(ds, 0.7, seed=5)
    a2, b2 = split_train_val(ds, 0.7, seed=5)
    assert np.array_equal(a1.x, a2.x) and np.array_equal(b1.x, b2.x)


def test_split_errors():
    ds = make_environment(spec(n=1, seed=12))
    with pytest.raises(ValueError):
        split_train_val(ds, 0.8, seed=0)
    ds2 = make_environment(spec(n=10, seed=12))
    with pytest.raises(ValueError):
        split_train_val(ds2, 1.0, seed=0)


def test_canonical_specs():
    specs = canonical_env_specs(100, seed=0)
    assert [s.rho for s in specs] == [0.9, 0.8, 0.1]
    assert [s.name for s in specs] == ["+90%", "+80%", "-90%"]
    assert all(s.label_noise == 0.25 for s in specs)
    assert len({s.seed for s in specs}) == 3
    assert len({s.proto_seed for s in specs}) == 1


def test_multiclass_generation():
    sp = spec(rho=0.7, n=5000, seed=13, n_classes=3, color_dims=3)
    ds = make_environment(sp)
    assert ds.x.shape[1] == 3 + 14
    assert set(np.unique(ds.y)) <= {0, 1, 2}
    agree = (ds.color == ds.y).mean()
    assert abs(agree - 0.7) < 0.03
    scm = latent_scm([sp])
    assert joint(scm, 0).values().sum() == pytest.approx(1.0, abs=1e-12)


def test_export_csv(tmp_path):
    ds = make_environment(spec(n=5, seed=14), env=2)
    path = tmp_path / "data.csv"
    export_csv(ds, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["env", "y", "d", "c"] + [f"x{i}" for i in range(16)]
    assert len(rows) == 6
    assert rows[1][0] == "2"
    assert float(rows[1][4]) == ds.x[0, 0]
