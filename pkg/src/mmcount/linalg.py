"""Dense structured linear algebra.

Matrix exponentials (scaling and squaring with diagonal Padé approximants),
Kronecker products, and the binomial block transform that block-diagonalizes
the joint (count, chain) generator.

Generators follow the column convention throughout: probability vectors are
columns and evolve as ``expm(Q t) @ x``.
"""

from dataclasses import dataclass
import math

import numpy as np

from .exceptions import CapacityError, DimensionError, ValidationError
from .validation import check_count, check_matrix

IDENTITY_ATOL = 1e-12
EXPM_RTOL = 1e-9

# Padé coefficients b_0..b_m for m = 3, 5, 7, 9, 13 and the 1-norm bounds
# below which degree m is accurate to unit roundoff (Higham, 2005).
_PADE_COEFFS = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}
_PADE_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}

# Largest n for which every C(n, k) is finite in float64.
MAX_BINOMIAL_N = 1020


def _pade_uv(a, m):
    b = _PADE_COEFFS[m]
    ident = np.eye(a.shape[0])
    a2 = a @ a
    if m == 13:
        a4 = a2 @ a2
        a6 = a4 @ a2
        u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
                 + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
        v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
             + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
        return u, v
    powers = [ident, a2]
    for _ in range(2, (m + 1) // 2):
        powers.append(powers[-1] @ a2)
    u = sum(b[2 * k + 1] * powers[k] for k in range(len(powers)))
    v = sum(b[2 * k] * powers[k] for k in range(len(powers)))
    return a @ u, v


def _expm_real(a):
    n = a.shape[0]
    if not np.any(a):
        return np.eye(n)
    # trace shift: exp(A) = e^mu exp(A - mu I) with mu = tr(A)/n
    mu = np.trace(a) / n
    a = a - mu * np.eye(n)
    norm = np.linalg.norm(a, 1)
    scale = 0
    for m in (3, 5, 7, 9):
        if norm <= _PADE_THETA[m]:
            break
    else:
        m = 13
        if norm > _PADE_THETA[13]:
            scale = max(0, int(math.ceil(math.log2(norm / _PADE_THETA[13]))))
            a = a / 2.0 ** scale
    u, v = _pade_uv(a, m)
    # undo the shift before squaring: exp(A/2^s) stays bounded for stiff
    # generators, whereas exp((A - mu I)/2^s) squared can overflow
    r = math.exp(mu / 2.0 ** scale) * np.linalg.solve(v - u, v + u)
    for _ in range(scale):
        r = r @ r
    return r


def mat_exp(m, t=1.0):
    """Matrix exponential ``exp(m * t)`` of a real square matrix.

    Scaling and squaring with a diagonal Padé approximant of degree up to 13.

    Parameters
    ----------
    m : array_like, shape (k, k)
    t : float
        Time multiplier.

    Returns
    -------
    ndarray, shape (k, k)
    """
    a = check_matrix(m, "m")
    t = float(t)
    if not math.isfinite(t):
        raise ValidationError("t must be finite")
    if t == 0.0:
        return np.eye(a.shape[0])
    return _expm_real(a * t)


def mat_exp_complex(m, t=1.0):
    """Complex matrix exponential through the real block embedding.

    ``[[Re, -Im], [Im, Re]]`` is an algebra homomorphism from complex k x k
    matrices to real 2k x 2k ones, so one real kernel serves both.
    """
    a = check_matrix(m, "m", dtype=complex)
    k = a.shape[0]
    t = float(t)
    if not math.isfinite(t):
        raise ValidationError("t must be finite")
    if t == 0.0:
        return np.eye(k, dtype=complex)
    re, im = a.real * t, a.imag * t
    if not np.any(im):
        return _expm_real(re).astype(complex)
    big = np.block([[re, -im], [im, re]])
    e = _expm_real(big)
    return e[:k, :k] + 1j * e[k:, :k]


def expm_ode(m, t=1.0, steps=None, x=None):
    """Reference exponential by fixed-step classical Runge-Kutta on ``F' = m F``.

    Independent of the Padé path and therefore usable as a cross-check. With
    ``x`` given, integrates the vector ODE ``x' = m x`` instead.
    """
    a = check_matrix(m, "m", dtype=complex if np.iscomplexobj(m) else float)
    t = float(t)
    if steps is None:
        norm = np.linalg.norm(a, 1) * abs(t)
        steps = max(200, int(math.ceil(norm * 40)))
    h = t / steps
    y = np.eye(a.shape[0], dtype=a.dtype) if x is None else np.asarray(x, dtype=a.dtype)
    ha = h * a
    for _ in range(steps):
        k1 = ha @ y
        k2 = ha @ (y + 0.5 * k1)
        k3 = ha @ (y + 0.5 * k2)
        k4 = ha @ (y + k3)
        y = y + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    return y


def kron(a, b):
    """Kronecker product; entry ``(i_a*rows(b)+i_b, j_a*cols(b)+j_b)`` is ``a[i_a,j_a]*b[i_b,j_b]``."""
    a = check_matrix(a, "a", square=False, dtype=np.result_type(np.asarray(a), float))
    b = check_matrix(b, "b", square=False, dtype=np.result_type(np.asarray(b), float))
    return np.kron(a, b)


def binom(n, k):
    """Binomial coefficient as a float, exact integer arithmetic underneath."""
    if k < 0 or k > n:
        return 0.0
    try:
        return float(math.comb(n, k))
    except OverflowError:
        raise CapacityError(f"C({n},{k}) overflows double precision") from None


@dataclass(frozen=True)
class BinomialTransformPair:
    """Block lower-triangular change of basis ``v`` and its inverse ``vinv``."""

    n: int
    d: int
    v: np.ndarray
    vinv: np.ndarray

    def scalar_blocks(self):
        """The (n+1) x (n+1) scalar matrices whose Kronecker product with I_d gives v, vinv."""
        return self.v[:: self.d, :: self.d], self.vinv[:: self.d, :: self.d]


def binomial_transform(n, d):
    """Binomial block transform.

    Blocks are ``V[i,j] = C(n-j, n-i) (-1)^(i-j) I_d`` and
    ``V^{-1}[i,j] = C(n-j, n-i) I_d`` for ``i >= j``, zero above the diagonal.
    """
    n = check_count(n, "n", minimum=1)
    d = check_count(d, "d", minimum=1)
    if n > MAX_BINOMIAL_N:
        raise CapacityError(
            f"binomial transform supports n <= {MAX_BINOMIAL_N}, got {n}")
    s = np.zeros((n + 1, n + 1))
    sinv = np.zeros((n + 1, n + 1))
    for i in range(n + 1):
        for j in range(i + 1):
            c = binom(n - j, n - i)
            sinv[i, j] = c
            s[i, j] = c if (i - j) % 2 == 0 else -c
    eye = np.eye(d)
    return BinomialTransformPair(n=n, d=d, v=np.kron(s, eye), vinv=np.kron(sinv, eye))


def block_similarity(pair, m):
    """``vinv @ m @ v`` accumulated in extended precision.

    The transform has entries as large as C(n, n/2), so double-precision
    cancellation in the off-diagonal blocks grows with n; long double keeps
    the residual near the double-precision rounding level for n <= 30.
    """
    m = check_matrix(m, "m")
    size = (pair.n + 1) * pair.d
    if m.shape != (size, size):
        raise DimensionError(f"matrix must be {size}x{size}, got {m.shape}")
    ld = np.longdouble
    out = pair.vinv.astype(ld) @ m.astype(ld) @ pair.v.astype(ld)
    return out.astype(float)


def off_block_max(m, d):
    """Largest magnitude outside the d x d diagonal blocks."""
    m = np.asarray(m)
    nb = m.shape[0] // d
    mask = np.kron(1.0 - np.eye(nb), np.ones((d, d))).astype(bool)
    return float(np.abs(m[mask]).max()) if mask.any() else 0.0


def compensated_sum(terms):
    """Neumaier-compensated sum of equally shaped arrays (or scalars)."""
    total = None
    comp = None
    for term in terms:
        term = np.asarray(term)
        if total is None:
            total = term.astype(np.result_type(term, float), copy=True)
            comp = np.zeros_like(total)
            continue
        s = total + term
        big = np.abs(total) >= np.abs(term)
        comp = comp + np.where(big, (total - s) + term, (term - s) + total)
        total = s
    if total is None:
        return 0.0
    return total + comp


def exp_joint_closed_form(q, rates, n, t):
    """exp(𝐐 t) for the joint generator, assembled from n+1 small exponentials.

    Block ``(i, j)`` for ``i >= j`` is
    ``C(n-j, n-i) * sum_{k=j}^{i} (-1)^(i-k) C(i-j, i-k) exp((Q - (n-k) diag(rates)) t)``;
    blocks above the diagonal are exactly zero.
    """
    q = check_matrix(q, "q")
    d = q.shape[0]
    rates = np.asarray(rates, dtype=float)
    n = check_count(n, "n", minimum=1)
    if n > MAX_BINOMIAL_N:
        raise CapacityError(f"closed form supports n <= {MAX_BINOMIAL_N}, got {n}")
    small = [mat_exp(q - (n - k) * np.diag(rates), t) for k in range(n + 1)]
    out = np.zeros(((n + 1) * d, (n + 1) * d))
    for i in range(n + 1):
        for j in range(i + 1):
            terms = [
                (-1.0) ** (i - k) * binom(i - j, i - k) * small[k]
                for k in range(j, i + 1)
            ]
            out[i * d:(i + 1) * d, j * d:(j + 1) * d] = binom(n - j, n - i) * compensated_sum(terms)
    return out
