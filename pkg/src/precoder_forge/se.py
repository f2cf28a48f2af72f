"""Spectral efficiency of a multi-user downlink and its gradient.

Conventions: ``H`` is ``q x n`` (row ``k`` is user ``k``'s channel), ``W`` is
``n x q`` (column ``k`` is user ``k``'s precoder).  The received amplitude of
stream ``l`` at user ``k`` is ``(H @ W)[k, l]``, a plain (non-conjugated)
row-by-column product.
"""

from dataclasses import dataclass

import numpy as np

from .channel import check_channel
from .errors import DimensionError, ParameterError, SingularMatrixError

LN2 = np.log(2.0)


@dataclass(frozen=True)
class SystemConfig:
    q: int = 4
    n: int = 16
    noise_power: float = 1.0
    power_budget: float = 1.0
    se_threshold: float = 14.5

    def __post_init__(self):
        if self.q < 1 or self.n < 1:
            raise DimensionError(f"need q >= 1 and n >= 1, got q={self.q}, n={self.n}")
        if not self.noise_power > 0:
            raise ParameterError(f"noise power must be > 0, got {self.noise_power}")
        if not self.power_budget > 0:
            raise ParameterError(f"power budget must be > 0, got {self.power_budget}")


def _check_pair(H, W):
    H = check_channel(H)
    W = np.asarray(W, dtype=np.complex128)
    if W.ndim != 2 or W.shape != (H.shape[1], H.shape[0]):
        raise DimensionError(
            f"precoder shape {W.shape} does not match channel shape {H.shape} (expected n x q)"
        )
    return H, W


def _powers(H, W):
    """Received power matrix |h_k w^l|^2 and the gain matrix itself."""
    A = H @ W
    return A, A.real ** 2 + A.imag ** 2


def sinr_all(H, W, cfg):
    """Vector of per-user SINR values."""
    H, W = _check_pair(H, W)
    _, P = _powers(H, W)
    signal = np.diag(P)
    interference = P.sum(axis=1) - signal
    return signal / (interference + cfg.noise_power)


def sinr(H, W, cfg, k):
    """SINR of user ``k`` (1-based, matching the usual k = 1..q indexing)."""
    H, W = _check_pair(H, W)
    q = H.shape[0]
    if not 1 <= k <= q:
        raise IndexError(f"user index {k} outside 1..{q}")
    return float(sinr_all(H, W, cfg)[k - 1])


def spectral_efficiency(H, W, cfg):
    """Sum over users of log2(1 + SINR_k), in bit/s/Hz."""
    H, W = _check_pair(H, W)
    _, P = _powers(H, W)
    signal = np.diag(P)
    interference = P.sum(axis=1) - signal + cfg.noise_power
    return float(np.sum(np.log1p(signal / interference)) / LN2)


def se_and_gradient(H, W, cfg):
    """SE value and its gradient with respect to the real parameters of ``W``.

    The gradient is returned as a complex ``n x q`` array ``G`` with
    ``G.real = df/dRe(W)`` and ``G.imag = df/dIm(W)`` (twice the Wirtinger
    derivative with respect to ``conj(W)``), so that the first-order change
    is ``df = Re(sum(conj(G) * dW))``.

    Writing ``T_k = sum_l |a_kl|^2 + s2`` and ``I_k = T_k - |a_kk|^2``,
    ``f = sum_k (ln T_k - ln I_k) / ln 2`` and therefore
    ``df/dconj(w^l) = sum_k conj(h_k) a_kl (1/T_k - [l != k]/I_k) / ln 2``.
    """
    H, W = _check_pair(H, W)
    return _se_and_gradient(H, W, cfg.noise_power)


def _se_and_gradient(H, W, noise_power):
    A = H @ W
    P = A.real ** 2 + A.imag ** 2
    signal = P.diagonal()
    total = P.sum(axis=1) + noise_power
    interference = total - signal
    value = float(np.log(total / interference).sum() / LN2)
    coef = np.repeat((1.0 / total - 1.0 / interference)[:, None], W.shape[1], axis=1)
    coef.flat[::coef.shape[1] + 1] = 1.0 / total
    grad = (2.0 / LN2) * (H.conj().T @ (coef * A))
    return value, grad


def se_gradient(H, W, cfg):
    return se_and_gradient(H, W, cfg)[1]


def antenna_powers(W):
    """Per-antenna transmit power sum_l |w^l_i|^2 (row sums of |W|^2)."""
    W = np.asarray(W)
    if W.ndim != 2:
        raise DimensionError(f"precoder must be 2-D, got shape {W.shape}")
    return np.sum(W.real ** 2 + W.imag ** 2, axis=1)


def power_scale(W, cfg):
    """Scalar ``min(1, sqrt(p / max_i power_i))``; 1 for the zero matrix."""
    powers = antenna_powers(W)
    peak = float(np.max(powers))
    if peak <= cfg.power_budget:
        return 1.0
    s = float(np.sqrt(cfg.power_budget / peak))
    # round down so the scaled matrix is feasible exactly, not up to an ulp
    while peak * s * s > cfg.power_budget or float(np.max(antenna_powers(W * s))) > cfg.power_budget:
        s = float(np.nextafter(s, 0.0))
    return s


def project_power(W, cfg):
    """Scale ``W`` down uniformly until the per-antenna constraint holds.

    Feasible inputs are returned unchanged.  Uniform scaling keeps every
    column direction and hence the zero-forcing structure of ``W``.
    """
    W = np.asarray(W, dtype=np.complex128)
    s = power_scale(W, cfg)
    if s == 1.0:
        return W.copy()
    return W * s


def is_feasible(W, cfg, rtol=1e-12):
    return bool(np.max(antenna_powers(W)) <= cfg.power_budget * (1 + rtol))


def projected_se_and_gradient(H, V, cfg):
    """``f(project_power(V))`` and its gradient with respect to ``V``.

    Outside the feasible set the scale is ``s = sqrt(p / r_m)`` where ``r_m``
    is the largest row power; ties pick the first maximal row.  On the
    boundary (largest row power exactly ``p``) the scaling branch is used.
    """
    H, V = _check_pair(H, V)
    return _projected_se_and_gradient(H, V, cfg.noise_power, cfg.power_budget)


def _projected_se_and_gradient(H, V, noise_power, power_budget):
    rows = (V.real ** 2 + V.imag ** 2).sum(axis=1)
    m = int(rows.argmax())
    r = float(rows[m])
    if r < power_budget:
        return _se_and_gradient(H, V, noise_power)
    s = np.sqrt(power_budget / r)
    value, g = _se_and_gradient(H, V * s, noise_power)
    grad = s * g
    # chain rule through s(V): ds/dV = -(s / r) * v_m on row m
    radial = float(np.real(np.vdot(g, V)))
    grad[m] -= radial * (s / r) * V[m]
    return value, grad


def mrt_precoder(H, cfg):
    """Maximum ratio transmission: ``W`` proportional to ``H^H``, projected."""
    H = check_channel(H)
    W = H.conj().T.copy()
    # scale to the budget (also scales up a weak channel)
    peak = np.max(antenna_powers(W))
    if peak > 0:
        W *= np.sqrt(cfg.power_budget / peak)
    return project_power(W, cfg)


def zf_precoder(H, cfg, rcond=1e-10):
    """Zero forcing: ``W`` proportional to ``H^H (H H^H)^-1``, projected."""
    H = check_channel(H)
    q, n = H.shape
    if q > n:
        raise SingularMatrixError(f"zero forcing needs q <= n, got q={q}, n={n}")
    sv = np.linalg.svd(H, compute_uv=False)
    if sv[-1] <= rcond * sv[0]:
        raise SingularMatrixError("channel matrix is rank deficient")
    W = H.conj().T @ np.linalg.inv(H @ H.conj().T)
    W *= np.sqrt(cfg.power_budget / np.max(antenna_powers(W)))
    return project_power(W, cfg)
