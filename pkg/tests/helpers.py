"""Shared generators and brute-force oracles for the test suite."""

import itertools

import numpy as np

from atomdiff.geometry import GeometryError, LatticeParams, lattice_params_to_matrix, niggli_reduce

# PASS/FAIL lines from test_acceptance.py, printed in the terminal summary
ACCEPTANCE: list[str] = []

INTEGER_ROWS = np.array(list(itertools.product(range(-2, 3), repeat=3)), dtype=np.float64)


def random_params(rng):
    return LatticeParams(*rng.uniform(2.0, 10.0, 3), *rng.uniform(65.0, 115.0, 3))


def random_lattice(rng):
    while True:
        try:
            return lattice_params_to_matrix(random_params(rng))
        except GeometryError:
            continue


def sheared_cell(rng, n_shears=2):
    """A few random elementary shears applied to an already reduced cell, so that
    the original cell is a small integer combination of its reduced form."""
    base = niggli_reduce(lattice_params_to_matrix(LatticeParams(*rng.uniform(3.0, 8.0, 3), *rng.uniform(70.0, 110.0, 3))))
    M = np.eye(3, dtype=int)
    for _ in range(n_shears):
        E = np.eye(3, dtype=int)
        i, j = rng.choice(3, 2, replace=False)
        E[i, j] = rng.choice([-1, 1])
        M = E @ M
    return M @ base


def _search(source, target, tol):
    rows = []
    for t in target:
        err = np.abs(INTEGER_ROWS @ source - t).max(axis=1)
        hits = np.flatnonzero(err < tol * max(1.0, np.abs(t).max()))
        if hits.size == 0:
            return None
        rows.append(INTEGER_ROWS[hits[0]])
    M = np.array(rows)
    return M if abs(round(np.linalg.det(M))) == 1 else None


def unimodular_oracle(original, reduced, tol=1e-8):
    """Brute force over integer matrices with entries in {-2..2}.

    Returns M with M @ original == reduced, or M with M @ reduced == original
    when only the inverse direction is small; None when neither exists.
    """
    M = _search(original, reduced, tol)
    return M if M is not None else _search(reduced, original, tol)


def min_image_brute(frac_i, frac_j, lattice, shells=1):
    """Smallest |(f_j - f_i + n) @ L| over all integer n in [-shells, shells]^3, no pre-wrapping."""
    best = np.inf
    for n in itertools.product(range(-shells, shells + 1), repeat=3):
        best = min(best, float(np.linalg.norm((frac_j - frac_i + np.array(n)) @ lattice)))
    return best
