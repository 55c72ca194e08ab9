"""Compactly supported higher-order smoothing kernels.

A kernel of even order ``q`` is built as ``K(u) = P(u*u) * (1 - u*u)**3`` on
[-1, 1] and zero outside, where ``P`` is a polynomial of degree ``(q - 2) / 2``
in ``u*u``. The coefficients of ``P`` solve the moment system

    integral(u**j * K(u) du) = 1 if j == 0 else 0,   j = 0, 2, ..., q - 2,

so the kernel integrates to one and its even moments below order ``q`` vanish
(odd moments vanish by symmetry). The cubic ``(1 - u*u)**3`` factor makes the
kernel twice continuously differentiable with K, K', K'' all zero at the
support boundary. Orders above two necessarily take negative values somewhere.

The moment system is solved exactly in rational arithmetic, so closed forms
such as ``K_2(u) = (35/32) * (1 - u*u)**3`` are reproduced bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import integrate

__all__ = [
    "KernelSpec",
    "build_kernel",
    "kernel_eval",
    "kernel_moment",
    "product_kernel",
    "select_kernel_order",
    "kernel_kappa",
]

_MIN_ORDER = 2
_MAX_ORDER = 8

_QUAD_TOL = 1e-10


# ======================================================================
# construction
# ======================================================================

def _base_moment(j: int) -> Fraction:
    """Exact even moment of the base weight: integral of u**j (1-u^2)^3 on [-1,1].

    Requires even ``j``. Expands (1-u^2)^3 binomially and integrates term by
    term.
    """
    if j % 2 != 0:
        raise ValueError("base moments are defined here for even j only")
    total = Fraction(0)
    for i, sign in ((0, 1), (1, -3), (2, 3), (3, -1)):
        total += Fraction(sign, j + 2 * i + 1)
    return 2 * total


def _solve_exact(a: list[list[Fraction]], b: list[Fraction]) -> list[Fraction]:
    """Gaussian elimination with partial pivoting over Fractions."""
    m = len(b)
    a = [row[:] for row in a]
    b = b[:]
    for col in range(m):
        pivot = max(range(col, m), key=lambda r: abs(a[r][col]))
        if a[pivot][col] == 0:
            raise ValueError("singular moment system")
        if pivot != col:
            a[col], a[pivot] = a[pivot], a[col]
            b[col], b[pivot] = b[pivot], b[col]
        inv = Fraction(1) / a[col][col]
        for r in range(m):
            if r == col:
                continue
            factor = a[r][col] * inv
            if factor == 0:
                continue
            for c in range(col, m):
                a[r][c] -= factor * a[col][c]
            b[r] -= factor * b[col]
    return [b[r] / a[r][r] for r in range(m)]


@dataclass(frozen=True)
class KernelSpec:
    """A built kernel: its order and the polynomial multiplier coefficients.

    Attributes:
        order: Even kernel order q in [2, 8].
        coeffs: Coefficients (c_0, ..., c_R) of P(t) = sum c_r t**r with
            t = u*u and R = (q - 2) / 2, ascending degree.
    """

    order: int
    coeffs: tuple[float, ...]

    def coeffs_array(self) -> np.ndarray:
        return np.asarray(self.coeffs, dtype=np.float64)


def build_kernel(order: int) -> KernelSpec:
    """Construct the compactly supported kernel of the given even order.

    Args:
        order: Even integer in [2, 8].

    Returns:
        KernelSpec with exact-solution coefficients.

    Raises:
        ValueError: If the order is odd or outside [2, 8].
    """
    if not isinstance(order, (int, np.integer)):
        raise ValueError(f"kernel order must be an integer, got {order!r}")
    order = int(order)
    if order % 2 != 0 or not (_MIN_ORDER <= order <= _MAX_ORDER):
        raise ValueError(
            f"kernel order must be even and in [{_MIN_ORDER}, {_MAX_ORDER}], got {order}"
        )
    m = order // 2  # number of unknown coefficients
    a = [[_base_moment(2 * (s + r)) for r in range(m)] for s in range(m)]
    b = [Fraction(1)] + [Fraction(0)] * (m - 1)
    coeffs = _solve_exact(a, b)
    return KernelSpec(order=order, coeffs=tuple(float(c) for c in coeffs))


def select_kernel_order(d: int) -> int:
    """Smallest even order strictly above max(d/2 + 1, 2) for index dimension d."""
    if d < 1:
        raise ValueError(f"index dimension must be >= 1, got {d}")
    threshold = max(d / 2.0 + 1.0, 2.0)
    q = 2 * (math.floor(threshold / 2.0) + 1)
    return q


# ======================================================================
# evaluation
# ======================================================================

def _eval_scalar(coeffs: tuple[float, ...], u: float) -> float:
    # Canonical expression tree; the jitted regression core mirrors it exactly.
    s = u * u
    if s >= 1.0:
        return 0.0
    om = 1.0 - s
    p = coeffs[-1]
    for r in range(len(coeffs) - 2, -1, -1):
        p = p * s + coeffs[r]
    return p * (om * om * om)


def kernel_eval(kernel: KernelSpec, u) -> float | np.ndarray:
    """Evaluate the kernel at ``u`` (scalar or array). Zero outside [-1, 1]."""
    if np.isscalar(u) or np.ndim(u) == 0:
        return _eval_scalar(kernel.coeffs, float(u))
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    flat_in = u.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = _eval_scalar(kernel.coeffs, float(flat_in[i]))
    return out


def product_kernel(kernel: KernelSpec, h: float, u) -> float:
    """Bandwidth-scaled product kernel over the coordinates of ``u``.

    Computes ``prod_k K(u_k / h) / h`` via multiplication by the reciprocal
    bandwidth, matching the regression core's arithmetic exactly.

    Args:
        kernel: Built kernel.
        h: Bandwidth, must be positive.
        u: Coordinate vector (length = index dimension).

    Returns:
        The scaled product weight.
    """
    if not h > 0.0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    inv_h = 1.0 / float(h)
    acc = 1.0
    for k in range(u.shape[0]):
        acc *= _eval_scalar(kernel.coeffs, float(u[k]) * inv_h) * inv_h
    return acc


# ======================================================================
# verification utilities
# ======================================================================

def kernel_moment(kernel: KernelSpec, j: int) -> float:
    """j-th moment integral(u**j K(u) du) by adaptive quadrature on [-1, 1].

    Uses an absolute tolerance of 1e-10; intended for verifying the moment
    conditions of a built kernel rather than for hot paths.
    """
    if j < 0:
        raise ValueError(f"moment degree must be >= 0, got {j}")
    val, _ = integrate.quad(
        lambda u: (u**j) * _eval_scalar(kernel.coeffs, u),
        -1.0,
        1.0,
        epsabs=_QUAD_TOL,
        epsrel=_QUAD_TOL,
        limit=200,
    )
    return float(val)


def kernel_kappa(kernel: KernelSpec) -> float:
    """Leading bias constant: q-th moment divided by q factorial."""
    return kernel_moment(kernel, kernel.order) / math.factorial(kernel.order)
