"""Small synthetic corpora of valid molecules and charge-neutral crystals for desk-scale runs."""

from __future__ import annotations

import numpy as np

from atomdiff.datasets import DatasetRecord
from atomdiff.geometry import AtomicSystem, LatticeParams, lattice_params_to_matrix, niggli_reduce_system
from atomdiff.vocab import covalent_radius, symbol_to_index

_HEAVY = ("C", "C", "C", "N", "O")
# (cation, anion, cation count, anion count); all neutral with common states
_BINARIES = (
    ("Na", "Cl", 1, 1),
    ("Mg", "O", 1, 1),
    ("K", "Br", 1, 1),
    ("Zn", "S", 1, 1),
    ("Ca", "F", 1, 2),
    ("Li", "O", 2, 1),
    ("Ti", "O", 1, 2),
    ("Al", "O", 2, 3),
)


def _random_direction(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_molecule(rng: np.random.Generator, max_atoms: int = 9, min_atoms: int = 3) -> AtomicSystem:
    """Tree-shaped molecule: heavy atoms bonded at covalent distances, then hydrogens."""
    while True:
        n_total = int(rng.integers(min_atoms, max_atoms + 1))
        n_heavy = int(rng.integers(1, min(5, n_total - 1) + 1))
        symbols = [str(rng.choice(_HEAVY)) for _ in range(n_heavy)] + ["H"] * (n_total - n_heavy)
        types = [symbol_to_index(s) for s in symbols]
        coords = [np.zeros(3)]
        ok = True
        for k in range(1, n_total):
            parent_pool = range(min(k, n_heavy))
            placed = False
            for _ in range(200):
                parent = int(rng.choice(list(parent_pool)))
                bond = (covalent_radius(types[k]) + covalent_radius(types[parent])) * rng.uniform(0.95, 1.05)
                x = coords[parent] + bond * _random_direction(rng)
                others = np.array(coords)
                others_d = np.linalg.norm(others - x, axis=1)
                others_d[parent] = np.inf
                if others_d.min() >= 1.0:
                    coords.append(x)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            c = np.array(coords)
            return AtomicSystem.molecule(types, c - c.mean(axis=0))


def _min_image_ok(frac: np.ndarray, lattice: np.ndarray, min_dist: float) -> bool:
    n = len(frac)
    for i in range(n):
        for j in range(i + 1, n):
            df = frac[j] - frac[i]
            df -= np.round(df)
            best = np.inf
            for s in np.ndindex(3, 3, 3):
                d = np.linalg.norm((df + np.array(s) - 1) @ lattice)
                best = min(best, d)
            if best < min_dist:
                return False
    return True


def random_crystal(rng: np.random.Generator, max_atoms: int = 8, min_dist: float = 1.6) -> AtomicSystem:
    """Charge-neutral binary compound in a random (Niggli-reduced) cell."""
    options = [b for b in _BINARIES if b[2] + b[3] <= max_atoms]
    while True:
        cat, an, nc, na = options[int(rng.integers(len(options)))]
        mult = int(rng.integers(1, max_atoms // (nc + na) + 1))
        types = [symbol_to_index(cat)] * (nc * mult) + [symbol_to_index(an)] * (na * mult)
        n = len(types)
        volume = n * rng.uniform(12.0, 20.0)
        angles = rng.uniform(80.0, 100.0, size=3)
        ratios = rng.uniform(0.8, 1.25, size=3)
        params = LatticeParams(*(ratios * 1.0), *angles)
        scale = (volume / params.volume()) ** (1 / 3)
        try:
            lattice = lattice_params_to_matrix(LatticeParams(*(ratios * scale), *angles))
        except ValueError:
            continue
        for _ in range(100):
            frac = rng.random((n, 3))
            if _min_image_ok(frac, lattice, min_dist):
                return niggli_reduce_system(AtomicSystem.crystal(types, frac, lattice))


def synthetic_corpus(
    n_molecules: int = 32, n_crystals: int = 32, seed: int = 0, max_mol_atoms: int = 9, max_xtal_atoms: int = 8
) -> list[DatasetRecord]:
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_molecules):
        records.append(DatasetRecord.from_system(f"mol-{i:04d}", random_molecule(rng, max_mol_atoms)))
    for i in range(n_crystals):
        records.append(DatasetRecord.from_system(f"xtal-{i:04d}", random_crystal(rng, max_xtal_atoms)))
    return records
