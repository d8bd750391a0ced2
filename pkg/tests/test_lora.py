import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import double_sum, random_module, rel_fro
from loracompose.errors import IncompatibleModulesError, NotFoundError, ShapeError, WeightArityError
from loracompose.lora import (
    LoraFactors,
    LoraModule,
    WeightVector,
    compose,
    effective_delta,
    linear_delta,
    validate_compatibility,
    zero_module,
)
from loracompose.tensor import make_rng


def test_single_module_unit_weight_is_identity(rng, small_shapes):
    m = random_module(rng, small_shapes, 3)
    c = compose([m], [1.0])
    for n in small_shapes:
        assert np.array_equal(c.layers[n].A, m.layers[n].A)
        assert np.array_equal(c.layers[n].B, m.layers[n].B)
        assert np.array_equal(effective_delta(c, n), m.layers[n].A @ m.layers[n].B)


def test_zero_weights_give_zero_update(rng, small_shapes):
    mods = [random_module(rng, small_shapes, 2, name=f"m{i}") for i in range(4)]
    c = compose(mods, np.zeros(4))
    for n in small_shapes:
        assert not c.layers[n].A.any() and not c.layers[n].B.any()
        assert not effective_delta(c, n).any()


def test_two_modules_unit_weights_four_term_expansion(rng):
    shapes = {"fc1": (6, 6)}
    m1 = random_module(rng, shapes, 2, name="a")
    m2 = random_module(rng, shapes, 2, name="b")
    (a1, b1), (a2, b2) = [(m.layers["fc1"].A, m.layers["fc1"].B) for m in (m1, m2)]
    expected = a1 @ b1 + a1 @ b2 + a2 @ b1 + a2 @ b2
    got = effective_delta(compose([m1, m2], [1.0, 1.0]), "fc1")
    assert rel_fro(got, expected) < 1e-12


def test_cross_terms_make_it_differ_from_linear_sum(rng):
    shapes = {"fc1": (5, 5)}
    mods = [random_module(rng, shapes, 2, name=f"m{i}") for i in range(2)]
    w = [0.7, -0.4]
    assert rel_fro(effective_delta(compose(mods, w), "fc1"), linear_delta(mods, w, "fc1")) > 1e-3


def test_three_module_double_sum(rng, small_shapes):
    mods = [random_module(rng, small_shapes, 3, name=f"m{i}") for i in range(3)]
    w = rng.uniform(-1.5, 1.5, 3)
    c = compose(mods, w)
    for n in small_shapes:
        assert rel_fro(effective_delta(c, n), double_sum(mods, w, n)) < 1e-9


def test_effective_delta_unknown_layer(rng, small_shapes):
    m = random_module(rng, small_shapes, 2)
    with pytest.raises(NotFoundError):
        effective_delta(m, "fc9")
    assert not effective_delta(zero_module(m), "fc1").any()


def test_weight_arity_error(rng, small_shapes):
    mods = [random_module(rng, small_shapes, 2, name=f"m{i}") for i in range(3)]
    with pytest.raises(WeightArityError):
        compose(mods, [1.0, 2.0])


def test_rank_mismatch_reported(rng, small_shapes):
    a = random_module(rng, small_shapes, 4, name="four")
    b = random_module(rng, small_shapes, 8, name="eight")
    report = validate_compatibility([a, b])
    assert not report.ok
    assert any("rank mismatch" in reason for _, _, reason in report.problems)
    with pytest.raises(IncompatibleModulesError) as exc:
        compose([a, b], [1.0, 1.0])
    assert "eight" in str(exc.value)


def test_missing_layer_reported(rng, small_shapes):
    a = random_module(rng, small_shapes, 2, name="full")
    b = random_module(rng, {"fc1": small_shapes["fc1"]}, 2, name="partial")
    report = validate_compatibility([a, b])
    assert ("partial", "fc2", "missing layer 'fc2'") in report.problems


def test_shape_mismatch_reported(rng, small_shapes):
    a = random_module(rng, small_shapes, 2, name="a")
    b = random_module(rng, {"fc1": (6, 5), "fc2": (5, 3)}, 2, name="b")
    report = validate_compatibility([a, b])
    assert [(m, l) for m, l, _ in report.problems] == [("b", "fc2")]


def test_compatible_modules_ok_and_untouched(rng, small_shapes):
    mods = [random_module(rng, small_shapes, 2, name=f"m{i}") for i in range(3)]
    before = [m.layers["fc1"].A.copy() for m in mods]
    assert validate_compatibility(mods).ok
    assert all(np.array_equal(b, m.layers["fc1"].A) for b, m in zip(before, mods))


def test_module_rank_invariant_names_layer():
    with pytest.raises(ShapeError, match="fc2"):
        LoraModule("m", "t", 2, {"fc1": (np.ones((3, 2)), np.ones((2, 3))), "fc2": (np.ones((3, 2)), np.ones((3, 3)))})


def test_factors_are_read_only(rng, small_shapes):
    m = random_module(rng, small_shapes, 2)
    with pytest.raises(ValueError):
        m.layers["fc1"].A[0, 0] = 1.0


def test_weight_vector():
    w = WeightVector([0.5, -1.5, 1.0])
    assert len(w) == 3 and w.within_bound()
    assert not WeightVector([1.6], bound=1.5).within_bound()
    assert isinstance(LoraFactors(np.ones((2, 1)), np.ones((1, 3))).shape, tuple)


def test_composed_module_remembers_sources(rng, small_shapes):
    mods = [random_module(rng, small_shapes, 2, name=f"m{i}") for i in range(2)]
    c = compose(mods, WeightVector([0.25, 0.5]))
    assert c.sources == ("m0", "m1") and c.weights == (0.25, 0.5)


# -- properties -----------------------------------------------------------

cases = st.tuples(st.integers(1, 5), st.integers(1, 16), st.integers(1, 16), st.integers(1, 4),
                  st.integers(0, 2**32 - 1))


def _setup(case):
    n, d, k, r, seed = case
    g = make_rng(seed)
    mods = [random_module(g, {"L": (d, k)}, r, name=f"m{i}") for i in range(n)]
    return g, mods, g.uniform(-1.5, 1.5, n)


@given(cases)
def test_property_double_sum(case):
    _, mods, w = _setup(case)
    got = effective_delta(compose(mods, w), "L")
    assert rel_fro(got, double_sum(mods, w, "L")) < 1e-9 or np.linalg.norm(got) < 1e-12


@given(cases, st.floats(-3, 3).filter(lambda c: c == 0 or abs(c) > 1e-3))
def test_property_degree_two_homogeneous(case, c):
    _, mods, w = _setup(case)
    base = effective_delta(compose(mods, w), "L")
    scaled = effective_delta(compose(mods, c * w), "L")
    if c == 0:
        assert not scaled.any()
    else:
        assert rel_fro(scaled, c * c * base) < 1e-12


@given(cases, st.data())
def test_property_one_hot_recovers_module(case, data):
    _, mods, _ = _setup(case)
    i = data.draw(st.integers(0, len(mods) - 1))
    w = np.zeros(len(mods))
    w[i] = 1.0
    got = effective_delta(compose(mods, w), "L")
    assert np.array_equal(got, mods[i].layers["L"].A @ mods[i].layers["L"].B)


@given(cases)
def test_property_permutation_equivariant(case):
    g, mods, w = _setup(case)
    perm = g.permutation(len(mods))
    a = effective_delta(compose(mods, w), "L")
    b = effective_delta(compose([mods[p] for p in perm], w[perm]), "L")
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
