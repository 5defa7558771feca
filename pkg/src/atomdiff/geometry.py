"""Unified representation of periodic and non-periodic atomic systems.

Conventions
-----------
- Lattice matrices hold the basis vectors l1, l2, l3 as ROWS, in Angstrom.
  Cartesian and fractional coordinates are (N, 3) arrays, so
  ``cart = frac @ L`` and ``frac = cart @ inv(L)``.
- Angles are in degrees at every public interface.
- Non-periodic systems carry all-zero ``lattice`` and ``frac_coords``; the
  ``periodic`` flag, not the zeros, decides how they are interpreted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from atomdiff.vocab import NUM_ELEMENTS

SINGULAR_DET = 1e-10
NIGGLI_MAX_ITER = 100
NIGGLI_EPS = 1e-5


class GeometryError(ValueError):
    pass


class SingularLatticeError(GeometryError):
    pass


class NiggliConvergenceError(GeometryError):
    pass


@dataclass
class AtomicSystem:
    atom_types: np.ndarray  # (N,) int, element indices 1..100
    cart_coords: np.ndarray  # (N, 3) Angstrom
    frac_coords: np.ndarray = field(default=None)  # (N, 3), zeros when non-periodic
    lattice: np.ndarray = field(default=None)  # (3, 3) rows, zeros when non-periodic
    periodic: bool = False

    def __post_init__(self):
        self.atom_types = np.asarray(self.atom_types, dtype=np.int64).reshape(-1)
        n = self.atom_types.shape[0]
        self.cart_coords = np.asarray(self.cart_coords, dtype=np.float64).reshape(n, 3)
        if self.frac_coords is None:
            self.frac_coords = np.zeros((n, 3))
        if self.lattice is None:
            self.lattice = np.zeros((3, 3))
        self.frac_coords = np.asarray(self.frac_coords, dtype=np.float64).reshape(n, 3)
        self.lattice = np.asarray(self.lattice, dtype=np.float64).reshape(3, 3)
        self.periodic = bool(self.periodic)

    @property
    def num_atoms(self) -> int:
        return int(self.atom_types.shape[0])

    @classmethod
    def molecule(cls, atom_types, cart_coords) -> "AtomicSystem":
        return cls(atom_types, cart_coords, periodic=False)

    @classmethod
    def crystal(cls, atom_types, frac_coords, lattice) -> "AtomicSystem":
        """Build a crystal from fractional coordinates; they are wrapped to [0, 1)."""
        lattice = np.asarray(lattice, dtype=np.float64)
        frac = wrap_fractional(np.asarray(frac_coords, dtype=np.float64))
        return cls(atom_types, frac_to_cart(lattice, frac), frac, lattice, periodic=True)

    def validate(self) -> None:
        """Raise GeometryError if any representation invariant is violated."""
        n = self.num_atoms
        if n < 1:
            raise GeometryError("system has no atoms")
        if np.any(self.atom_types < 1) or np.any(self.atom_types > NUM_ELEMENTS):
            raise GeometryError("atom types must be element indices 1..100")
        if not np.all(np.isfinite(self.cart_coords)):
            raise GeometryError("non-finite Cartesian coordinates")
        if self.periodic:
            if not np.all(np.isfinite(self.lattice)) or np.linalg.det(self.lattice) <= 0:
                raise GeometryError("periodic system needs a finite lattice with det > 0")
            f = self.frac_coords
            if not np.all(np.isfinite(f)) or np.any(f < 0) or np.any(f >= 1):
                raise GeometryError("fractional coordinates must lie in [0, 1)")
            expected = frac_to_cart(self.lattice, f)
            scale = max(1.0, float(np.abs(expected).max()))
            if np.abs(expected - self.cart_coords).max() > 1e-8 * scale:
                raise GeometryError("cart_coords inconsistent with frac_coords @ lattice")
        else:
            if np.any(self.lattice != 0) or np.any(self.frac_coords != 0):
                raise GeometryError("non-periodic system must carry zero lattice/frac sentinels")

    def copy(self) -> "AtomicSystem":
        return replace(
            self,
            atom_types=self.atom_types.copy(),
            cart_coords=self.cart_coords.copy(),
            frac_coords=self.frac_coords.copy(),
            lattice=self.lattice.copy(),
        )


@dataclass(frozen=True)
class LatticeParams:
    a: float
    b: float
    c: float
    alpha: float  # degrees, angle(l2, l3)
    beta: float  # degrees, angle(l1, l3)
    gamma: float  # degrees, angle(l1, l2)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])

    @property
    def angles_rad(self) -> np.ndarray:
        return np.radians(self.angles)

    def volume(self) -> float:
        cos = np.cos(self.angles_rad)
        g = 1 - np.sum(cos**2) + 2 * np.prod(cos)
        return float(self.a * self.b * self.c * np.sqrt(max(g, 0.0)))


def cart_to_frac(lattice, cart) -> np.ndarray:
    """Fractional coordinates of ``cart`` in the basis ``lattice``; not wrapped."""
    lattice = np.asarray(lattice, dtype=np.float64)
    if abs(np.linalg.det(lattice)) <= SINGULAR_DET:
        raise SingularLatticeError(f"|det(lattice)| <= {SINGULAR_DET}")
    cart = np.asarray(cart, dtype=np.float64)
    # frac @ L = cart  <=>  L^T frac^T = cart^T
    return np.linalg.solve(lattice.T, cart.T).T


def frac_to_cart(lattice, frac) -> np.ndarray:
    return np.asarray(frac, dtype=np.float64) @ np.asarray(lattice, dtype=np.float64)


def wrap_fractional(frac) -> np.ndarray:
    frac = np.asarray(frac, dtype=np.float64)
    out = frac - np.floor(frac)
    # x - floor(x) rounds to 1.0 for tiny negative x
    out[out >= 1.0] = 0.0
    return out


def lattice_matrix_to_params(lattice) -> LatticeParams:
    lattice = np.asarray(lattice, dtype=np.float64)
    lengths = np.linalg.norm(lattice, axis=1)
    if np.any(lengths <= 0) or not np.all(np.isfinite(lengths)):
        raise GeometryError("degenerate lattice: zero-length basis vector")

    def angle(i, j):
        cos = np.dot(lattice[i], lattice[j]) / (lengths[i] * lengths[j])
        return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))

    a, b, c = (float(x) for x in lengths)
    return LatticeParams(a, b, c, angle(1, 2), angle(0, 2), angle(0, 1))


def lattice_params_to_matrix(params: LatticeParams) -> np.ndarray:
    """Canonical lattice: l1 along x, l2 in the xy-plane (y > 0), l3 with z > 0."""
    a, b, c = params.a, params.b, params.c
    if min(a, b, c) <= 0:
        raise GeometryError("lattice lengths must be positive")
    ca, cb, cg = np.cos(params.angles_rad)
    sg = np.sin(np.radians(params.gamma))
    if sg <= 1e-12:
        raise GeometryError("gamma too close to 0 or 180 degrees")
    cx = c * cb
    cy = c * (ca - cb * cg) / sg
    cz2 = c * c - cx * cx - cy * cy
    # cz2 / c^2 is the Gram determinant divided by sin^2(gamma)
    if cz2 <= 1e-12 * c * c:
        raise GeometryError("lattice angles are geometrically inconsistent")
    return np.array(
        [
            [a, 0.0, 0.0],
            [b * cg, b * sg, 0.0],
            [cx, cy, np.sqrt(cz2)],
        ]
    )


def _sign(x: float, eps: float) -> int:
    if abs(x) <= eps:
        return 0
    return 1 if x > 0 else -1


def niggli_transform(lattice, eps_rel: float = NIGGLI_EPS) -> np.ndarray:
    """Integer unimodular T (det +1) such that ``T @ lattice`` is Niggli-reduced.

    Krivy-Gruber reduction on the metric tensor with the epsilon-guarded
    comparisons of Grosse-Kunstleve et al. (2004).
    """
    lattice = np.asarray(lattice, dtype=np.float64)
    if abs(np.linalg.det(lattice)) <= SINGULAR_DET:
        raise SingularLatticeError("cannot reduce a singular lattice")
    G = lattice @ lattice.T
    e = eps_rel * np.trace(G) / 3.0
    T = np.eye(3, dtype=np.int64)

    def apply(M):
        nonlocal G, T
        M = np.asarray(M, dtype=np.int64)
        G = M.T @ G @ M
        T = M.T @ T

    for _ in range(NIGGLI_MAX_ITER):
        A, B, C = G[0, 0], G[1, 1], G[2, 2]
        xi, eta, zeta = 2 * G[1, 2], 2 * G[0, 2], 2 * G[0, 1]
        # A1
        if A > B + e or (abs(A - B) <= e and abs(xi) > abs(eta) + e):
            apply([[0, -1, 0], [-1, 0, 0], [0, 0, -1]])
            continue
        # A2
        if B > C + e or (abs(B - C) <= e and abs(eta) > abs(zeta) + e):
            apply([[-1, 0, 0], [0, 0, -1], [0, -1, 0]])
            continue
        # A3 / A4
        l, m, n = _sign(xi, e), _sign(eta, e), _sign(zeta, e)
        if l * m * n == 1:
            i, j, k = (-1 if s == -1 else 1 for s in (l, m, n))
            if (i, j, k) != (1, 1, 1):
                apply(np.diag([i, j, k]))
        else:
            i, j, k = (-1 if s == 1 else 1 for s in (l, m, n))
            if i * j * k == -1:
                if n == 0:
                    k = -1
                elif m == 0:
                    j = -1
                elif l == 0:
                    i = -1
            if (i, j, k) != (1, 1, 1):
                apply(np.diag([i, j, k]))
        A, B, C = G[0, 0], G[1, 1], G[2, 2]
        xi, eta, zeta = 2 * G[1, 2], 2 * G[0, 2], 2 * G[0, 1]
        # A5
        if abs(xi) > B + e or (abs(xi - B) <= e and 2 * eta < zeta - e) or (
            abs(xi + B) <= e and zeta < -e
        ):
            apply([[1, 0, 0], [0, 1, -int(np.sign(xi))], [0, 0, 1]])
            continue
        # A6
        if abs(eta) > A + e or (abs(eta - A) <= e and 2 * xi < zeta - e) or (
            abs(eta + A) <= e and zeta < -e
        ):
            apply([[1, 0, -int(np.sign(eta))], [0, 1, 0], [0, 0, 1]])
            continue
        # A7
        if abs(zeta) > A + e or (abs(zeta - A) <= e and 2 * xi < eta - e) or (
            abs(zeta + A) <= e and eta < -e
        ):
            apply([[1, -int(np.sign(zeta)), 0], [0, 1, 0], [0, 0, 1]])
            continue
        # A8
        s = xi + eta + zeta + A + B
        if s < -e or (abs(s) <= e and 2 * (A + eta) + zeta > e):
            apply([[1, 0, 1], [0, 1, 1], [0, 0, 1]])
            continue
        return T
    raise NiggliConvergenceError(f"Niggli reduction did not converge in {NIGGLI_MAX_ITER} iterations")


def niggli_reduce(lattice, eps_rel: float = NIGGLI_EPS) -> np.ndarray:
    lattice = np.asarray(lattice, dtype=np.float64)
    T = niggli_transform(lattice, eps_rel)
    if np.array_equal(T, np.eye(3, dtype=np.int64)):
        return lattice.copy()
    return T.astype(np.float64) @ lattice


def niggli_reduce_system(system: AtomicSystem) -> AtomicSystem:
    """Re-express a crystal in its Niggli-reduced cell (atoms unchanged in space)."""
    if not system.periodic:
        return system.copy()
    T = niggli_transform(system.lattice)
    if np.array_equal(T, np.eye(3, dtype=np.int64)):
        # already reduced: keep coordinates bit-for-bit
        return system.copy()
    reduced = T.astype(np.float64) @ system.lattice
    frac = wrap_fractional(cart_to_frac(reduced, system.cart_coords))
    return AtomicSystem(
        system.atom_types.copy(), frac_to_cart(reduced, frac), frac, reduced, periodic=True
    )


def zero_center(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    return coords - coords.mean(axis=0, keepdims=True)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation matrix."""
    return Rotation.random(random_state=rng).as_matrix()


def augment(
    system: AtomicSystem,
    rng: np.random.Generator,
    rotation: np.ndarray | None = None,
    translation: np.ndarray | None = None,
    max_translation: float = 1.0,
) -> AtomicSystem:
    """Random rigid motion used as data augmentation.

    Cartesian coordinates are rotated (rows map as ``x @ R.T``). Crystals also
    rotate their lattice rows and keep fractional coordinates untouched;
    molecules are additionally translated by U(-max_translation, max_translation)
    per axis.
    """
    R = random_rotation(rng) if rotation is None else np.asarray(rotation, dtype=np.float64)
    if system.periodic:
        lattice = system.lattice @ R.T
        return AtomicSystem(
            system.atom_types.copy(),
            system.frac_coords @ lattice,
            system.frac_coords.copy(),
            lattice,
            periodic=True,
        )
    if translation is None:
        translation = rng.uniform(-max_translation, max_translation, size=3)
    cart = system.cart_coords @ R.T + np.asarray(translation, dtype=np.float64)
    return AtomicSystem.molecule(system.atom_types.copy(), cart)


def pairwise_distances(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))
