"""Scaled monomial bases and the gradient / cross-product decomposition of
vector polynomials.

All polynomials are coefficient tables over graded-lexicographic monomial
bases. Because the ordering is graded, ``M_{k-1}`` is always a prefix of
``M_k`` and a multi-index has the same position in every basis that
contains it.

Vector components are indexed 0, 1, 2 (x, y, z).
"""
import logging
from functools import lru_cache
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

__all__ = [
    "MultiIndex3",
    "MultiIndex2",
    "VectorMonomial",
    "Decomposition",
    "MonomialBasis3",
    "MonomialBasis2",
    "ConditioningError",
    "dim_Pk",
    "dim_Gperp",
    "monomial_exponents",
    "monomial_index",
    "eval_monomial",
    "eval_monomials",
    "grad_monomial",
    "decompose_vector_monomial",
    "rewrite_first_component",
    "mI_cross",
    "gperp_generators",
    "gperp_rank",
    "kernel_vector",
    "cross_vanishes",
    "kernel_member_check",
    "divergence_coefficients",
    "spd_solve",
]

logger = logging.getLogger(__name__)

MultiIndex3 = Tuple[int, int, int]
MultiIndex2 = Tuple[int, int]


class VectorMonomial(NamedTuple):
    """The vector with ``m_alpha`` in slot ``component`` and zeros elsewhere."""

    component: int
    alpha: MultiIndex3


class Decomposition(NamedTuple):
    """``sum(c * grad m_beta) + sum(c * (m_I x m))`` for a vector monomial."""

    gradient: List[Tuple[float, MultiIndex3]]
    cross: List[Tuple[float, VectorMonomial]]


class ConditioningError(ArithmeticError):
    """Raised when a dense local mass matrix cannot be factorized."""


# --- Dimensions and index tables ---

def dim_Pk(k: int, ambient: int = 3) -> int:
    """Dimension of the polynomials of degree <= k in 2 or 3 variables."""
    if k < 0:
        return 0
    if ambient == 3:
        return (k + 1) * (k + 2) * (k + 3) // 6
    if ambient == 2:
        return (k + 1) * (k + 2) // 2
    raise ValueError(f"Unsupported ambient dimension {ambient}")


def dim_Gperp(k: int) -> int:
    """Dimension of the complement of the gradients in [P_k]^3."""
    if k < 1:
        raise ValueError(f"dim_Gperp needs k >= 1, got {k}")
    return (2 * k**3 + 9 * k**2 + 7 * k) // 6


@lru_cache(maxsize=None)
def monomial_exponents(k: int, ambient: int = 3) -> np.ndarray:
    """Graded-lex exponent table of shape (dim_Pk(k), ambient)."""
    rows = []
    for n in range(k + 1):
        if ambient == 3:
            for a1 in range(n, -1, -1):
                for a2 in range(n - a1, -1, -1):
                    rows.append((a1, a2, n - a1 - a2))
        elif ambient == 2:
            for b1 in range(n, -1, -1):
                rows.append((b1, n - b1))
        else:
            raise ValueError(f"Unsupported ambient dimension {ambient}")
    table = np.array(rows, dtype=np.int64).reshape(-1, ambient)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=None)
def _index_table(k: int) -> Dict[MultiIndex3, int]:
    return {tuple(int(a) for a in row): i for i, row in enumerate(monomial_exponents(k))}


def monomial_index(alpha: Sequence[int]) -> int:
    """Position of ``alpha`` in any graded-lex basis of degree >= |alpha|."""
    key = tuple(int(a) for a in alpha)
    if min(key) < 0:
        raise ValueError(f"Negative multi-index {key}")
    return _index_table(sum(key))[key]


def _shift(alpha: Sequence[int], plus: Optional[int] = None, minus: Optional[int] = None) -> MultiIndex3:
    out = list(alpha)
    if plus is not None:
        out[plus] += 1
    if minus is not None:
        out[minus] -= 1
    return (out[0], out[1], out[2])


# --- Evaluation ---

def eval_monomial(alpha: Sequence[int], point: Sequence[float], anchor: Tuple[Sequence[float], float]) -> float:
    """Evaluates ``((point - x_P) / h_P) ** alpha`` for a single point."""
    center, h = anchor
    s = (np.asarray(point, dtype=float) - np.asarray(center, dtype=float)) / h
    return float(np.prod(s ** np.asarray(alpha)))


def eval_monomials(exponents: np.ndarray, scaled: np.ndarray) -> np.ndarray:
    """
    Evaluates every monomial of an exponent table at already scaled points.

    Args:
        exponents: (m, d) exponent table.
        scaled: (n, d) local coordinates ``(x - anchor) / h``.

    Returns:
        (n, m) matrix of monomial values.
    """
    scaled = np.atleast_2d(scaled)
    top = int(exponents.max()) if exponents.size else 0
    powers = scaled[:, :, None] ** np.arange(top + 1)[None, None, :]  # (n, d, top+1)
    values = np.ones((scaled.shape[0], exponents.shape[0]))
    for axis in range(exponents.shape[1]):
        values *= powers[:, axis, exponents[:, axis]]
    return values


class MonomialBasis3:
    """Scaled monomials ``m_alpha = ((x - x_P) / h_P)^alpha`` of degree <= k."""

    def __init__(self, k: int, center: Sequence[float], h: float) -> None:
        self.k = k
        self.center = np.asarray(center, dtype=float)
        self.h = float(h)
        self.exponents = monomial_exponents(k, 3)

    def __len__(self) -> int:
        return self.exponents.shape[0]

    def scale(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.center) / self.h

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return eval_monomials(self.exponents, self.scale(points))

    def poly(self, coefficients: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        """Returns a callable evaluating the polynomial with these coefficients."""
        coefficients = np.asarray(coefficients)
        return lambda points: self(points) @ coefficients[: len(self)]


class MonomialBasis2:
    """Face monomials ``m_beta = ((xt - xt_f) / h_f)^beta`` in the face frame."""

    def __init__(self, k: int, center: Sequence[float], frame: np.ndarray, h: float) -> None:
        self.k = k
        self.center = np.asarray(center, dtype=float)
        self.frame = np.asarray(frame, dtype=float)  # (2, 3) orthonormal rows
        self.h = float(h)
        self.exponents = monomial_exponents(k, 2)

    def __len__(self) -> int:
        return self.exponents.shape[0]

    def scale(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.center) @ self.frame.T / self.h

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return eval_monomials(self.exponents, self.scale(points))


# --- Calculus on monomials ---

def grad_monomial(alpha: Sequence[int], h: float) -> List[Optional[Tuple[float, MultiIndex3]]]:
    """
    Gradient of a scaled monomial.

    Returns:
        Three entries, one per component: ``(alpha_i / h, alpha - e_i)``, or
        None where ``alpha_i == 0``.
    """
    out: List[Optional[Tuple[float, MultiIndex3]]] = []
    for i in range(3):
        if alpha[i] == 0:
            out.append(None)
        else:
            out.append((alpha[i] / h, _shift(alpha, minus=i)))
    return out


def mI_cross(vm: VectorMonomial) -> List[Tuple[float, VectorMonomial]]:
    """Expands ``m_I x vm`` into vector monomials of one degree higher."""
    c, a = vm
    if c == 0:
        return [(1.0, VectorMonomial(1, _shift(a, plus=2))), (-1.0, VectorMonomial(2, _shift(a, plus=1)))]
    if c == 1:
        return [(-1.0, VectorMonomial(0, _shift(a, plus=2))), (1.0, VectorMonomial(2, _shift(a, plus=0)))]
    if c == 2:
        return [(1.0, VectorMonomial(0, _shift(a, plus=1))), (-1.0, VectorMonomial(1, _shift(a, plus=0)))]
    raise ValueError(f"Component {c} out of range")


def decompose_vector_monomial(c: int, alpha: Sequence[int], h: float) -> Decomposition:
    """
    Splits ``m_alpha e_c`` into a gradient and an ``m_I x`` part.

    With n = |alpha|, the gradient term is ``h / (n + 1) * grad m_{alpha + e_c}``;
    the two cross terms carry coefficients ``+-alpha_i / (n + 1)``. Terms with a
    zero coefficient are omitted.
    """
    a = tuple(int(x) for x in alpha)
    n1 = sum(a) + 1.0
    gradient = [(h / n1, _shift(a, plus=c))]
    i, j = [(1, 2), (2, 0), (0, 1)][c]
    # m_alpha e_c = h/(n+1) grad m_{alpha+e_c} - a_j/(n+1) m_I x (m_{alpha-e_j} e_i)
    #               + a_i/(n+1) m_I x (m_{alpha-e_i} e_j)
    cross: List[Tuple[float, VectorMonomial]] = []
    if a[j] > 0:
        cross.append((-a[j] / n1, VectorMonomial(i, _shift(a, minus=j))))
    if a[i] > 0:
        cross.append((a[i] / n1, VectorMonomial(j, _shift(a, minus=i))))
    return Decomposition(gradient=gradient, cross=cross)


def rewrite_first_component(alpha: Sequence[int]) -> List[Tuple[float, VectorMonomial]]:
    """
    Rewrites ``m_I x (m_alpha, 0, 0)`` (alpha_1 >= 1) through second and
    third component generators:
    ``-m_I x (0, m_beta, 0) - m_I x (0, 0, m_gamma)``.
    """
    a = tuple(int(x) for x in alpha)
    if a[0] < 1:
        raise ValueError(f"rewrite_first_component needs alpha_1 >= 1, got {a}")
    beta = (a[0] - 1, a[1] + 1, a[2])
    gamma = (a[0] - 1, a[1], a[2] + 1)
    return [(-1.0, VectorMonomial(1, beta)), (-1.0, VectorMonomial(2, gamma))]


# --- Generators of the gradient complement ---

def _cube_moment(p: int) -> float:
    """Integral of s**p over [-1/2, 1/2]."""
    return 0.0 if p % 2 else 2.0 * 0.5 ** (p + 1) / (p + 1)


def _cross_table(generators: Sequence[VectorMonomial], k: int) -> np.ndarray:
    """Coefficients of ``m_I x g`` over [M_k]^3, shape (len, 3 * dim_Pk(k))."""
    n = dim_Pk(k)
    table = np.zeros((len(generators), 3 * n))
    for row, g in enumerate(generators):
        for coef, vm in mI_cross(g):
            table[row, vm.component * n + monomial_index(vm.alpha)] += coef
    return table


def gperp_rank(generators: Sequence[VectorMonomial], k: int) -> int:
    """Rank of the L^2 Gram matrix of ``{m_I x g}`` over the unit cube."""
    if not generators:
        return 0
    exps = monomial_exponents(k)
    n = exps.shape[0]
    sums = exps[:, None, :] + exps[None, :, :]
    mass = np.ones((n, n))
    for axis in range(3):
        mass *= np.vectorize(_cube_moment)(sums[:, :, axis])
    table = _cross_table(generators, k)
    gram = sum(
        table[:, c * n:(c + 1) * n] @ mass @ table[:, c * n:(c + 1) * n].T for c in range(3)
    )
    return int(np.linalg.matrix_rank(gram))


@lru_cache(maxsize=None)
def gperp_generators(k: int) -> Tuple[VectorMonomial, ...]:
    """
    Generators whose images under ``m_I x .`` span the gradient complement
    in [P_k]^3.

    The first-component family holds multi-indices with alpha_1 = 0 of degree
    <= k - 1, the second and third families run over all of M_{k-1}. The
    literal family with 0 < |alpha| is completed in degree order by the Gram
    rank, which adds the constant first-component generator for every k.
    """
    if k < 1:
        raise ValueError(f"gperp_generators needs k >= 1, got {k}")
    target = dim_Gperp(k)
    lower = [tuple(int(a) for a in row) for row in monomial_exponents(k - 1)]
    first = [VectorMonomial(0, a) for a in lower if a[0] == 0 and sum(a) > 0]
    rest = [VectorMonomial(c, a) for c in (1, 2) for a in lower]

    rank = gperp_rank(first + rest, k)
    for a in lower:
        if rank >= target:
            break
        candidate = VectorMonomial(0, a)
        if a[0] != 0 or candidate in first:
            continue
        trial = sorted(first + [candidate], key=lambda g: monomial_index(g.alpha))
        new_rank = gperp_rank(trial + rest, k)
        if new_rank > rank:
            logger.debug(f"k={k}: adding first-component generator {a} (rank {new_rank})")
            first, rank = trial, new_rank

    generators = tuple(first + rest)
    if len(generators) != target or rank != target:
        raise ValueError(
            f"Generator set for k={k} has {len(generators)} members of rank {rank}, expected {target}"
        )
    return generators


def kernel_vector(p: np.ndarray, k: int) -> np.ndarray:
    """Coefficients (3, dim_Pk(k - 1)) of ``m_I * p`` for p over M_{k-2}."""
    p = np.asarray(p, dtype=float)
    n_out = dim_Pk(k - 1)
    out = np.zeros((3, n_out))
    for idx, a in enumerate(monomial_exponents(k - 2)):
        for c in range(3):
            out[c, monomial_index(_shift(a, plus=c))] += p[idx]
    return out


def cross_vanishes(
    field: np.ndarray,
    degree: int,
    n_points: int = 50,
    tol: float = 1e-13,
    rng: Optional[np.random.Generator] = None,
) -> bool:
    """
    Checks ``m_I x v == 0`` at random points for a vector polynomial ``v``
    given as (3, dim_Pk(degree)) coefficients over the unit-anchored basis.
    """
    rng = rng or np.random.default_rng(0)
    s = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    values = eval_monomials(monomial_exponents(degree), s) @ np.asarray(field).T  # (n, 3)
    crossed = np.cross(s, values)
    scale = max(1.0, float(np.abs(values).max()))
    return bool(np.abs(crossed).max() <= tol * scale)


def kernel_member_check(p: np.ndarray, k: int, n_points: int = 50, tol: float = 1e-13) -> bool:
    """True when ``m_I x (m_I p)`` vanishes, i.e. ``m_I p`` lies in the kernel."""
    if k < 2:
        raise ValueError(f"kernel_member_check needs k >= 2, got {k}")
    return cross_vanishes(kernel_vector(p, k), k - 1, n_points=n_points, tol=tol)


def divergence_coefficients(field: np.ndarray, k: int, h: float) -> np.ndarray:
    """Divergence of a vector polynomial (3, dim_Pk(k)) as coefficients over M_{k-1}."""
    field = np.asarray(field, dtype=float)
    out = np.zeros(dim_Pk(k - 1))
    for idx, a in enumerate(monomial_exponents(k)):
        for c in range(3):
            if a[c] > 0:
                out[monomial_index(_shift(a, minus=c))] += a[c] / h * field[c, idx]
    return out


# --- Dense local solves ---

def spd_solve(matrix: np.ndarray, rhs: np.ndarray, label: str = "") -> np.ndarray:
    """Solves with a symmetric positive definite local mass matrix.

    Raises:
        ConditioningError: If the Cholesky factorization fails.
    """
    try:
        factor = cho_factor(matrix)
    except LinAlgError as e:
        raise ConditioningError(f"Mass matrix of {label or 'element'} is not positive definite: {e}") from e
    return cho_solve(factor, rhs)
