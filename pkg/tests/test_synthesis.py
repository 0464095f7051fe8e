import json

import numpy as np
import pytest

from efc.errors import ConfigError, ValidationError
from efc.potts import fit_class, flat_index, pair_freq, site_freq
from efc.synthesis import (
    ClassSpec,
    PairRule,
    SyntheticSpec,
    generate,
    load_spec,
    separable_spec,
    to_continuous,
    with_class,
)


def spec_of(dists, rows=100, Q=None, seed=0, rule=None):
    dists = [np.asarray(d, dtype=float) for d in dists]
    Q = Q or dists[0].shape[1]
    classes = tuple(ClassSpec(f"c{k}", d, rows) for k, d in enumerate(dists))
    return SyntheticSpec(classes, Q, seed, rule)


class TestGenerate:
    def test_point_mass(self):
        d0 = [[0, 1, 0], [0, 0, 1]]
        d1 = [[1, 0, 0], [1, 0, 0]]
        t = generate(spec_of([d0, d1], rows=50))
        assert np.all(t.rows_of("c0") == [2, 3])
        assert np.all(t.rows_of("c1") == [1, 1])
        assert t.labels.tolist() == ["c0"] * 50 + ["c1"] * 50

    def test_same_seed_byte_identical(self):
        s = separable_spec(n_classes=3, m=4, Q=8, rows=500, seed=11)
        a, b = generate(s), generate(s)
        assert a.symbols.tobytes() == b.symbols.tobytes()
        c = generate(separable_spec(n_classes=3, m=4, Q=8, rows=500, seed=12))
        assert a.symbols.tobytes() != c.symbols.tobytes()

    def test_frequencies_match_spec(self):
        rng = np.random.default_rng(0)
        d = rng.dirichlet(np.ones(6), size=4)
        t = generate(spec_of([d], rows=100_000))
        for i in range(4):
            emp = np.bincount(t.symbols[:, i], minlength=7)[1:] / t.n
            assert np.abs(emp - d[i]).max() <= 0.01

    def test_adding_class_leaves_others_unchanged(self):
        s = separable_spec(n_classes=2, m=3, Q=6, rows=200, seed=4)
        bigger = with_class(s, "extra", np.full((3, 6), 1 / 6))
        a, b = generate(s), generate(bigger)
        np.testing.assert_array_equal(a.symbols, b.symbols[:400])

    def test_pair_rule_raises_joint_frequency(self):
        Q = 4
        d = np.full((3, Q), 1 / Q)
        t = generate(spec_of([d], rows=10_000, rule=PairRule(0, 2, 0.6)))
        f = site_freq(t.symbols, Q, 0.0)
        fij = pair_freq(t.symbols, f, Q, 0.0)
        for a in range(Q):
            assert fij[0, 2, a, a] > f[0, a] * f[2, a]

    def test_pair_rule_recovered_as_positive_coupling(self):
        Q = 4
        d = np.full((3, Q), 1 / Q)
        t = generate(spec_of([d], rows=10_000, rule=PairRule(0, 2, 0.5)))
        model = fit_class(t.symbols, Q, 0.5)
        for a in range(1, Q):
            assert model.couplings[flat_index(0, a, Q), flat_index(2, a, Q)] > 0


class TestSpecValidation:
    def test_distribution_must_sum_to_one(self):
        with pytest.raises(ValidationError, match="sum to 1"):
            spec_of([[[0.5, 0.4], [0.5, 0.5]]])

    def test_negative_probability(self):
        with pytest.raises(ValidationError):
            spec_of([[[1.5, -0.5], [0.5, 0.5]]])

    def test_rho_range(self):
        with pytest.raises(ValidationError, match="rho"):
            spec_of([np.full((2, 2), 0.5)], rule=PairRule(0, 1, 1.5))

    def test_pair_rule_features(self):
        with pytest.raises(ValidationError):
            spec_of([np.full((2, 2), 0.5)], rule=PairRule(0, 0, 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError, match="shape"):
            spec_of([np.full((2, 2), 0.5), np.full((3, 2), 0.5)])

    def test_duplicate_labels(self):
        s = separable_spec(n_classes=2, m=2, Q=4, rows=5)
        with pytest.raises(ValidationError, match="duplicate"):
            with_class(s, "class0", np.full((2, 4), 0.25))

    def test_separable_must_fit(self):
        with pytest.raises(ValidationError):
            separable_spec(n_classes=6, Q=10, support=2)


class TestSpecFile:
    def test_round_trip(self, tmp_path):
        s = spec_of([np.full((3, 4), 0.25)], rows=20, seed=9, rule=PairRule(0, 1, 0.3))
        (tmp_path / "s.json").write_text(json.dumps(s.to_dict()))
        back = load_spec(tmp_path / "s.json")
        assert back.to_dict() == s.to_dict()
        np.testing.assert_array_equal(generate(back).symbols, generate(s).symbols)

    def test_separable_shortcut(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps(
            {"separable": {"n_classes": 2, "m": 3, "Q": 6, "rows": 10, "seed": 1}}))
        s = load_spec(tmp_path / "s.json")
        assert [c.label for c in s.classes] == ["class0", "class1"]

    def test_malformed(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"Q": 3}))
        with pytest.raises(ConfigError):
            load_spec(tmp_path / "s.json")
        (tmp_path / "t.json").write_text("{not json")
        with pytest.raises(ConfigError):
            load_spec(tmp_path / "t.json")


def test_continuous_mode_preserves_symbol_order():
    t = generate(separable_spec(n_classes=2, m=3, Q=6, rows=100, seed=2))
    raw = to_continuous(t, seed=3)
    assert raw.schema.feature_names == ["f0", "f1", "f2"]
    for i in range(3):
        v = raw.columns[i]
        assert np.all((v >= t.symbols[:, i] - 1) & (v < t.symbols[:, i]))
    assert raw.labels.tolist() == t.labels.tolist()
