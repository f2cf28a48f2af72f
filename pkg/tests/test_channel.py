import numpy as np
import pytest

from precoder_forge.channel import PerturbationSpec, generate_channel, perturb_channel
from precoder_forge.errors import DimensionError, ParameterError


def test_generate_shape_and_determinism():
    H = generate_channel(4, 16, 7)
    assert H.shape == (4, 16)
    assert H.dtype == np.complex128
    np.testing.assert_array_equal(H, generate_channel(4, 16, 7))
    assert not np.array_equal(H, generate_channel(4, 16, 8))


def test_unit_average_power():
    # 62500 matrices of 16 entries = 10^6 draws
    total = sum(np.sum(np.abs(generate_channel(4, 16, s)) ** 2) for s in range(15625))
    assert abs(total / 1e6 - 1.0) < 0.01


def test_real_and_imag_have_half_variance():
    H = generate_channel(100, 1000, 3)
    assert abs(np.var(H.real) - 0.5) < 0.01
    assert abs(np.var(H.imag) - 0.5) < 0.01
    assert abs(np.mean(H)) < 0.01


@pytest.mark.parametrize("q,n", [(0, 16), (4, 0), (-1, 3)])
def test_generate_rejects_empty(q, n):
    with pytest.raises(DimensionError):
        generate_channel(q, n, 0)


def test_perturbations_have_exact_norm():
    H = generate_channel(4, 16, 1)
    Hs = perturb_channel(H, PerturbationSpec(5.0, 15), 2)
    assert len(Hs) == 15
    for Hi in Hs:
        assert abs(np.sum(np.abs(Hi - H) ** 2) - 5.0) <= 1e-12 * 5.0
    # distinct directions
    assert not np.allclose(Hs[0], Hs[1])


@pytest.mark.parametrize("delta", [1e-6, 0.3, 1.0, 123.0])
def test_norm_invariant_over_deltas(delta):
    H = generate_channel(3, 5, 4)
    for Hi in perturb_channel(H, PerturbationSpec(delta, 4), 9):
        assert abs(np.sum(np.abs(Hi - H) ** 2) - delta) <= 1e-12 * max(1.0, delta)


def test_zero_delta_copies():
    H = generate_channel(4, 16, 1)
    Hs = perturb_channel(H, PerturbationSpec(0.0, 3), 2)
    assert len(Hs) == 3
    for Hi in Hs:
        np.testing.assert_array_equal(Hi, H)


def test_zero_count_is_empty():
    assert perturb_channel(generate_channel(4, 16, 1), PerturbationSpec(5.0, 0), 0) == []


def test_negative_delta_rejected():
    with pytest.raises(ParameterError):
        PerturbationSpec(-1.0, 3)
    with pytest.raises(ParameterError):
        perturb_channel(generate_channel(2, 2, 0), (-0.5, 2), 0)


def test_perturbation_deterministic():
    H = generate_channel(4, 16, 1)
    a = perturb_channel(H, PerturbationSpec(5.0, 3), 11)
    b = perturb_channel(H, PerturbationSpec(5.0, 3), 11)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
