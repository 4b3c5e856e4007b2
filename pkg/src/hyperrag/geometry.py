"""Lorentz (hyperboloid) model of hyperbolic space H^n.

Points live on the upper sheet of the two-sheeted hyperboloid embedded in
(n+1)-dimensional Minkowski space with signature (-,+,...,+):

    H^n = { x : <x,x>_L = -1, x0 >= 1 },   <x,y>_L = -x0*y0 + sum_i xi*yi

Geodesic distance is d(x,y) = arccosh(-<x,y>_L).  All operations are pure
functions over immutable values; there is no shared mutable state.

Unconstrained parameters are stored as spatial n-vectors and lifted onto the
manifold through :func:`project_to_hyperboloid`, which keeps one canonical
representation and makes serialization trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DivergenceError, InvalidPointError

# Constraint tolerances.  The hyperboloid check is scaled by x0^2 because
# <x,x>_L is computed with cancellation between O(x0^2) terms.
HYPERBOLOID_ATOL = 1e-9
TANGENT_ATOL = 1e-8
DISTANCE_INPUT_ATOL = 1e-6

# Below this excess s = a - 1 the distance gradient is treated as zero:
# d'(a) = 1/sqrt(a^2-1) blows up at coincidence, where the distance itself
# is non-smooth.
_GRAD_COINCIDENCE_CUTOFF = 1e-12

_ZERO_NORM_CUTOFF = 1e-12


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise ContractViolation(f"{name} must be a 1-D real vector, got shape {arr.shape}")
    return arr


def lorentz_inner(x, y) -> float:
    """Lorentz inner product  <x,y>_L = -x0*y0 + sum_{i>=1} xi*yi.

    Bilinear and symmetric; defined for raw vectors of equal length >= 2.
    """
    xa = _as_vector(x, "x")
    ya = _as_vector(y, "y")
    if xa.shape != ya.shape:
        raise ContractViolation(f"dimension mismatch: {xa.shape} vs {ya.shape}")
    if xa.size < 2:
        raise ContractViolation("lorentz_inner needs vectors of length >= 2")
    return float(-xa[0] * ya[0] + xa[1:] @ ya[1:])


def _inner_unchecked(xa: np.ndarray, ya: np.ndarray) -> float:
    return float(-xa[0] * ya[0] + xa[1:] @ ya[1:])


@dataclass(frozen=True)
class LorentzPoint:
    """A point on the upper sheet of the hyperboloid, stored as (n+1) coords.

    coords[0] is the time-like coordinate; coords[1:] are space-like.
    """

    coords: np.ndarray = field()

    def __post_init__(self):
        arr = np.asarray(self.coords, dtype=float)
        if arr.ndim != 1 or arr.size < 2:
            raise InvalidPointError(f"expected an (n+1)-vector with n >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidPointError("non-finite coordinates")
        violation = abs(_inner_unchecked(arr, arr) + 1.0)
        if violation > HYPERBOLOID_ATOL * max(1.0, arr[0] * arr[0]):
            raise InvalidPointError(
                f"hyperboloid constraint violated by {violation:.3e} (|<x,x>_L + 1|)"
            )
        if arr[0] < 1.0 - 1e-12:
            raise InvalidPointError(f"time-like coordinate {arr[0]} is below the future sheet")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "coords", arr)

    @property
    def dim(self) -> int:
        """Intrinsic dimension n."""
        return self.coords.size - 1

    @property
    def space(self) -> np.ndarray:
        """The space-like part coords[1:]."""
        return self.coords[1:]

    def close_to(self, other: "LorentzPoint", tol: float = 1e-9) -> bool:
        return bool(np.max(np.abs(self.coords - other.coords)) <= tol)


@dataclass(frozen=True)
class TangentVector:
    """An element of the tangent space T_x H^n, Lorentz-orthogonal to its base."""

    base: LorentzPoint
    components: np.ndarray = field()

    def __post_init__(self):
        arr = np.asarray(self.components, dtype=float)
        if arr.shape != self.base.coords.shape:
            raise ContractViolation(
                f"tangent components shape {arr.shape} does not match base {self.base.coords.shape}"
            )
        ortho = abs(_inner_unchecked(self.base.coords, arr))
        scale = max(1.0, abs(self.base.coords[0]) * (1.0 + float(np.max(np.abs(arr)))))
        if ortho > TANGENT_ATOL * scale:
            raise InvalidPointError(f"vector is not tangent at base: |<x,u>_L| = {ortho:.3e}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "components", arr)

    def norm(self) -> float:
        """Lorentzian norm sqrt(<u,u>_L); tangent vectors are space-like."""
        sq = _inner_unchecked(self.components, self.components)
        return math.sqrt(max(sq, 0.0))


def origin(n: int) -> LorentzPoint:
    """The hyperboloid base point (1, 0, ..., 0) in H^n."""
    coords = np.zeros(n + 1)
    coords[0] = 1.0
    return LorentzPoint(coords)


def project_to_hyperboloid(v_space) -> LorentzPoint:
    """Lift a spatial n-vector onto the hyperboloid: (sqrt(1 + |v|^2), v).

    The output satisfies the constraint exactly up to floating-point
    rounding; also used to re-normalize points after numerical drift.
    """
    arr = _as_vector(v_space, "v_space")
    if not np.all(np.isfinite(arr)):
        raise InvalidPointError("non-finite spatial coordinates")
    with np.errstate(over="ignore"):
        norm_sq = float(arr @ arr)
    if not np.isfinite(norm_sq):
        raise InvalidPointError("spatial vector too large to lift")
    coords = np.empty(arr.size + 1)
    coords[0] = math.sqrt(1.0 + norm_sq)
    coords[1:] = arr
    return LorentzPoint(coords)


def acosh_from_excess(s: float) -> float:
    """arccosh(1 + s) evaluated as log1p(s + sqrt(s(s+2))).

    Exact rearrangement of the defining logarithm: no cancellation for any
    s >= 0, and smooth down to the sqrt(2s) behaviour at 0.  Negative s
    (round-off below the clamp) maps to 0.
    """
    if s <= 0.0:
        return 0.0
    return math.log1p(s + math.sqrt(s * (s + 2.0)))


def acosh_stable(a: float) -> float:
    """arccosh with the argument clamped to >= 1.

    -<x,y>_L >= 1 holds exactly for on-manifold points; round-off can push
    the computed value to 1 - 1e-15, which the clamp absorbs.
    """
    return acosh_from_excess(a - 1.0)


def _check_on_manifold(p: LorentzPoint, tol: float) -> None:
    c = p.coords
    violation = abs(_inner_unchecked(c, c) + 1.0)
    if violation > tol * max(1.0, c[0] * c[0]):
        raise InvalidPointError(f"off-manifold input: constraint violated by {violation:.3e}")


def geodesic_distance(x: LorentzPoint, y: LorentzPoint) -> float:
    """Geodesic distance arccosh(-<x,y>_L); symmetric and non-negative."""
    _check_on_manifold(x, DISTANCE_INPUT_ATOL)
    _check_on_manifold(y, DISTANCE_INPUT_ATOL)
    if x.coords.shape != y.coords.shape:
        raise ContractViolation("points live in different dimensions")
    s = -_inner_unchecked(x.coords, y.coords) - 1.0
    if s < 1e-4:
        # Nearby points: -<x,y>_L cancels to ~1 and loses the excess.  The
        # identity <y-x, y-x>_L = 2(-<x,y>_L - 1) recovers it from small,
        # fully-precise differences.
        diff = y.coords - x.coords
        s = 0.5 * _inner_unchecked(diff, diff)
    return acosh_from_excess(s)


def exp_map(x: LorentzPoint, u: TangentVector) -> LorentzPoint:
    """Geodesic flow from x with initial velocity u.

    exp_x(u) = cosh(|u|_L) x + sinh(|u|_L) u / |u|_L, re-projected onto the
    hyperboloid; |u|_L < 1e-12 returns x (series limit).
    """
    if not np.array_equal(u.base.coords, x.coords):
        raise ContractViolation("tangent vector is based at a different point")
    norm = u.norm()
    if norm < _ZERO_NORM_CUTOFF:
        return x
    coords = math.cosh(norm) * x.coords + math.sinh(norm) * (u.components / norm)
    if not np.all(np.isfinite(coords)):
        raise InvalidPointError(f"exp_map overflow at |u|_L = {norm:.3e}")
    return project_to_hyperboloid(coords[1:])


def log_map(x: LorentzPoint, y: LorentzPoint) -> TangentVector:
    """Inverse of exp_map: the tangent u at x with exp_x(u) = y.

    |u|_L equals geodesic_distance(x, y); for y = x the zero vector is
    returned.
    """
    if x.coords.shape != y.coords.shape:
        raise ContractViolation("points live in different dimensions")
    diff = y.coords - x.coords
    s = -_inner_unchecked(x.coords, y.coords) - 1.0
    if s < 1e-4:
        s = 0.5 * _inner_unchecked(diff, diff)
    d = acosh_from_excess(s)
    if d < _ZERO_NORM_CUTOFF:
        return TangentVector(x, np.zeros_like(x.coords))
    # w = y + <x,y>_L x = diff - s*x is the tangential part of y at x, with
    # <w,w>_L = a^2 - 1 = s(s+2); both forms keep precision near s=0.
    w = diff - s * x.coords
    norm_w = math.sqrt(s * (s + 2.0))
    return TangentVector(x, (d / norm_w) * w)


def riemannian_gradient(x: LorentzPoint, euclidean_grad) -> TangentVector:
    """Project an ambient gradient to T_x H^n.

    Flips the sign of component 0 (metric raising), then removes the normal
    component: u = g + <x,g>_L x.  The output is Lorentz-orthogonal to x.
    """
    g = _as_vector(euclidean_grad, "euclidean_grad")
    if g.shape != x.coords.shape:
        raise ContractViolation(
            f"gradient shape {g.shape} does not match point shape {x.coords.shape}"
        )
    g = g.copy()
    g[0] = -g[0]
    u = g + _inner_unchecked(x.coords, g) * x.coords
    return TangentVector(x, u)


def rsgd_step(x: LorentzPoint, euclidean_grad, lr: float) -> LorentzPoint:
    """One Riemannian SGD step: exp_x(-lr * grad_R f(x)), re-projected."""
    if lr <= 0.0:
        raise ContractViolation(f"learning rate must be positive, got {lr}")
    g = np.asarray(euclidean_grad, dtype=float)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient in rsgd_step")
    u = riemannian_gradient(x, g)
    step = TangentVector(x, -lr * u.components)
    return exp_map(x, step)


def distance_spatial_grad(x: LorentzPoint, y: LorentzPoint) -> np.ndarray:
    """Gradient of d(x, y) with respect to x's spatial parameters.

    x is parametrized as project_to_hyperboloid(v); the chain rule through
    x0 = sqrt(1 + |v|^2) gives  dd/dv = (v * y0 / x0 - y_space) / sinh(d).
    Returns zero at coincidence (subgradient of the non-smooth minimum).
    """
    a = -_inner_unchecked(x.coords, y.coords)
    s = a - 1.0
    if s < _GRAD_COINCIDENCE_CUTOFF:
        return np.zeros(x.dim)
    sinh_d = math.sqrt(s * (s + 2.0))
    return (x.space * (y.coords[0] / x.coords[0]) - y.space) / sinh_d


# ---------------------------------------------------------------------------
# Vectorized helpers over stacked spatial coordinates.  These are the hot
# paths for retrieval and alignment training; semantics match the scalar
# operations above.
# ---------------------------------------------------------------------------


def lift_spatial(spatial: np.ndarray) -> np.ndarray:
    """Row-wise project_to_hyperboloid: (m, n) spatial -> (m, n+1) coords."""
    spatial = np.atleast_2d(np.asarray(spatial, dtype=float))
    t = np.sqrt(1.0 + np.einsum("ij,ij->i", spatial, spatial))
    return np.column_stack([t, spatial])


def acosh_stable_array(a: np.ndarray) -> np.ndarray:
    s = np.maximum(np.asarray(a, dtype=float) - 1.0, 0.0)
    return np.log1p(s + np.sqrt(s * (s + 2.0)))


def distances_to_rows(point: LorentzPoint, coords_rows: np.ndarray) -> np.ndarray:
    """Geodesic distance from one point to each row of an (m, n+1) array."""
    a = coords_rows[:, 0] * point.coords[0] - coords_rows[:, 1:] @ point.space
    return acosh_stable_array(a)
