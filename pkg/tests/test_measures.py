import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from lesionuq.measures import (
    MEASURES, MissingInputError, binary_entropy, compute_measure, entropy_kernel,
    mutual_information_kernel, predictive_variance_kernel, sample_variance_kernel,
    uncertainty_maps,
)
from lesionuq.volume import Kind, SampleStack

# Frozen 50-digit mpmath values: (entropy, mutual information, sample variance).
FROZEN = [
    ((0.1, 0.2, 0.9), 0.6730116670092564, 0.28948887690222835, 0.12666666666666668),
    ((0.25, 0.75), 0.6931471805599453, 0.13081203594113697, 0.0625),
    ((0.5,), 0.6931471805599453, 0.0, 0.0),
    ((0.01, 0.99, 0.5, 0.3), 0.6881388137135884, 0.3341351758824551, 0.12755),
]


def _col(ps):
    return np.array(ps, dtype=np.float64).reshape(-1, 1)


@pytest.mark.parametrize("ps, h, mi, var", FROZEN)
def test_frozen_values(ps, h, mi, var):
    np.testing.assert_allclose(entropy_kernel(_col(ps)), [h], rtol=0, atol=1e-12)
    np.testing.assert_allclose(mutual_information_kernel(_col(ps)), [mi], rtol=0, atol=1e-12)
    np.testing.assert_allclose(sample_variance_kernel(_col(ps)), [var], rtol=0, atol=1e-12)


def test_identities():
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    np.testing.assert_allclose(binary_entropy(0.5), np.log(2), atol=1e-15)
    # identical samples carry no model uncertainty
    same = np.full((7, 3), 0.37)
    np.testing.assert_allclose(mutual_information_kernel(same), 0.0, atol=1e-12)
    np.testing.assert_allclose(sample_variance_kernel(same), 0.0, atol=1e-12)
    # an even split of certain samples
    split = _col([0.0, 1.0])
    np.testing.assert_allclose(entropy_kernel(split), [np.log(2)], atol=1e-15)
    np.testing.assert_allclose(mutual_information_kernel(split), [np.log(2)], atol=1e-15)
    np.testing.assert_allclose(sample_variance_kernel(split), [0.25], atol=1e-15)


probs = st.floats(0.0, 1.0, allow_nan=False).map(lambda p: float(np.float32(p)))


@settings(max_examples=200, deadline=None)
@given(st.lists(probs, min_size=1, max_size=16))
def test_kernels_match_oracle(ps):
    x = _col(ps)
    np.testing.assert_allclose(entropy_kernel(x), [oracles.mp_entropy(ps)], rtol=0, atol=1e-9)
    np.testing.assert_allclose(mutual_information_kernel(x), [oracles.mp_mutual_information(ps)],
                               rtol=0, atol=1e-9)
    np.testing.assert_allclose(sample_variance_kernel(x), [oracles.mp_sample_variance(ps)],
                               rtol=0, atol=1e-9)
    np.testing.assert_allclose(predictive_variance_kernel(x), [oracles.mp_predictive_variance(ps)],
                               rtol=0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(probs, min_size=1, max_size=16), st.randoms())
def test_bounds_and_permutation(ps, rnd):
    x = _col(ps)
    h, mi, v = entropy_kernel(x), mutual_information_kernel(x), sample_variance_kernel(x)
    assert 0 <= mi[0] <= h[0] + 1e-12 <= np.log(2) + 1e-12
    assert 0 <= v[0] <= 0.25
    shuffled = list(ps)
    rnd.shuffle(shuffled)
    y = _col(shuffled)
    assert entropy_kernel(y).tobytes() == h.tobytes()
    assert mutual_information_kernel(y).tobytes() == mi.tobytes()
    assert sample_variance_kernel(y).tobytes() == v.tobytes()


def test_stack_measures():
    rng = np.random.default_rng(3)
    preds = rng.random((5, 4, 3, 2))
    var = rng.random((5, 4, 3, 2)) * 0.1
    stack = SampleStack(preds, var)
    for m in MEASURES:
        g = compute_measure(stack, m)
        assert g.kind is Kind.UNCERTAINTY and g.dims == (4, 3, 2)
    p32 = stack.predictions.astype(np.float64)
    np.testing.assert_allclose(compute_measure(stack, "mi").values,
                               mutual_information_kernel(p32), rtol=1e-6, atol=1e-7)
    maps = uncertainty_maps(stack).as_dict()
    assert sorted(maps) == sorted(MEASURES)


def test_predvar_needs_variances():
    stack = SampleStack(np.full((2, 1, 1, 1), 0.5))
    with pytest.raises(MissingInputError):
        compute_measure(stack, "predvar")
    assert uncertainty_maps(stack).pred_var is None
    with pytest.raises(ValueError):
        compute_measure(stack, "bogus")
