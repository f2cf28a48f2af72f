"""Channel matrices and norm-controlled perturbations."""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .rng import complex_normal, make_rng


@dataclass(frozen=True)
class PerturbationSpec:
    """``count`` perturbations, each with squared Frobenius norm ``delta``."""

    delta: float
    count: int

    def __post_init__(self):
        if not np.isfinite(self.delta) or self.delta < 0:
            raise ParameterError(f"delta must be finite and >= 0, got {self.delta}")
        if int(self.count) != self.count or self.count < 0:
            raise ParameterError(f"count must be a nonnegative integer, got {self.count}")


def check_channel(H):
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] < 1 or H.shape[1] < 1:
        raise DimensionError(f"channel must be a non-empty q x n matrix, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise ParameterError("channel entries must be finite")
    return H.astype(np.complex128, copy=False)


def generate_channel(q, n, seed):
    """Draw a ``q x n`` channel with i.i.d. CN(0, 1) entries.

    Pure function of ``(q, n, seed)``.
    """
    if int(q) != q or int(n) != n or q < 1 or n < 1:
        raise DimensionError(f"need q >= 1 and n >= 1, got q={q}, n={n}")
    return complex_normal(make_rng(seed, "channel", q, n), (int(q), int(n)))


def perturb_channel(H, spec, seed):
    """Return ``[H + D_1, ..., H + D_K]`` with ``||D_i||_F^2 == spec.delta``.

    Each direction is an isotropic complex Gaussian matrix rescaled to the
    exact target norm.
    """
    H = check_channel(H)
    if not isinstance(spec, PerturbationSpec):
        spec = PerturbationSpec(*spec)
    rng = make_rng(seed, "perturb")
    out = []
    for _ in range(int(spec.count)):
        d = complex_normal(rng, H.shape)
        if spec.delta == 0:
            out.append(H.copy())
            continue
        d *= np.sqrt(spec.delta / np.sum(np.abs(d) ** 2))
        out.append(H + d)
    return out
