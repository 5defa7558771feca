"""Validity, uniqueness and reconstruction-match metrics for generated structures."""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from atomdiff.geometry import (
    AtomicSystem,
    GeometryError,
    lattice_matrix_to_params,
    niggli_reduce_system,
    niggli_transform,
    pairwise_distances,
    wrap_fractional,
)
from atomdiff.vocab import covalent_radius, element_data_version, oxidation_table

MIN_DISTANCE = 0.5  # Angstrom
MIN_VOLUME = 0.1  # Angstrom^3
BOND_TOLERANCE = 0.4  # Angstrom added to the covalent radius sum
MOLECULE_RMSD_MATCH = 0.5  # Angstrom
CRYSTAL_LENGTH_TOL = 0.3  # Angstrom
CRYSTAL_ANGLE_TOL = 5.0  # degrees
CRYSTAL_FRAC_TOL = 0.1
DISTANCE_QUANTUM = 0.1  # Angstrom, uniqueness keys
LATTICE_QUANTUM = 0.01  # uniqueness keys

_SHELL = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.float64)


# ------------------------------------------------------------- distances


def min_image_distances(system: AtomicSystem) -> np.ndarray:
    """(N, N) distance matrix; periodic systems use the minimum image (diagonal is 0)."""
    if not system.periodic:
        return pairwise_distances(system.cart_coords)
    lattice, frac = system.lattice, system.frac_coords
    # the one-shell image search is only exhaustive for a reduced cell
    try:
        T = niggli_transform(lattice)
        lattice = T @ lattice
        frac = frac @ np.round(np.linalg.inv(T))
    except GeometryError:
        pass
    df = frac[None, :, :] - frac[:, None, :]
    df -= np.round(df)
    shifted = df[:, :, None, :] + _SHELL[None, None, :, :]
    cart = shifted @ lattice
    d = np.sqrt(np.sum(cart * cart, axis=-1)).min(axis=-1)
    np.fill_diagonal(d, 0.0)
    return d


def cell_volume(system: AtomicSystem) -> float:
    return float(abs(np.linalg.det(system.lattice)))


def structural_validity(system: AtomicSystem) -> bool:
    if system.periodic and cell_volume(system) < MIN_VOLUME:
        return False
    n = system.num_atoms
    if n < 2:
        return True
    d = min_image_distances(system)
    return bool(d[np.triu_indices(n, k=1)].min() >= MIN_DISTANCE)


# ---------------------------------------------------------- composition


def composition(atom_types) -> dict[int, int]:
    return dict(sorted(Counter(int(t) for t in atom_types).items()))


def charge_neutrality(atom_types, table: Mapping[int, Sequence[int]] | None = None) -> bool | None:
    """Whether one oxidation state per species gives a zero total charge.

    Returns None (indeterminate) when a species is missing from ``table``;
    species with an empty state list can never be assigned, so the answer is False.
    """
    table = oxidation_table() if table is None else table
    comp = composition(atom_types)
    if not comp:
        raise ValueError("empty composition")
    species = list(comp)
    if any(s not in table for s in species):
        return None
    options = [sorted(set(int(q) for q in table[s])) for s in species]
    if any(not o for o in options):
        return False
    counts = [comp[s] for s in species]
    # bounds of the charge reachable by the remaining species, for pruning
    lo = [0] * (len(species) + 1)
    hi = [0] * (len(species) + 1)
    for k in range(len(species) - 1, -1, -1):
        lo[k] = lo[k + 1] + counts[k] * options[k][0]
        hi[k] = hi[k + 1] + counts[k] * options[k][-1]

    def search(k: int, charge: int) -> bool:
        if k == len(species):
            return charge == 0
        if charge + lo[k] > 0 or charge + hi[k] < 0:
            return False
        return any(search(k + 1, charge + counts[k] * q) for q in options[k])

    return search(0, 0)


def neutrality_status(atom_types, table=None) -> str:
    """One of ``neutral``, ``not_neutral``, ``no_states``, ``indeterminate``."""
    table = oxidation_table() if table is None else table
    comp = composition(atom_types)
    if any(s not in table for s in comp):
        return "indeterminate"
    if any(len(table[s]) == 0 for s in comp):
        return "no_states"
    return "neutral" if charge_neutrality(atom_types, table) else "not_neutral"


def compositional_validity(system: AtomicSystem, table=None) -> bool:
    """Charge neutrality for crystals with at least two distinct elements.

    Uniform per-species oxidation states do not describe covalent organic
    molecules, so molecules pass this check by definition and are instead
    held to bond connectivity.
    """
    if not system.periodic:
        return True
    if len(composition(system.atom_types)) < 2:
        return False
    return bool(charge_neutrality(system.atom_types, table))


# ------------------------------------------------------------ molecules


def bond_graph(system: AtomicSystem, tolerance: float = BOND_TOLERANCE) -> np.ndarray:
    radii = np.array([covalent_radius(t) for t in system.atom_types])
    cutoff = radii[:, None] + radii[None, :] + tolerance
    d = pairwise_distances(system.cart_coords)
    adj = d <= cutoff
    np.fill_diagonal(adj, False)
    return adj


def molecule_connectivity(system: AtomicSystem) -> bool:
    if system.num_atoms == 1:
        return True
    n_comp, _ = connected_components(bond_graph(system), directed=False)
    return bool(n_comp == 1)


# ----------------------------------------------------------- uniqueness


def _quantize(values, quantum: float) -> tuple[int, ...]:
    return tuple(int(v) for v in np.round(np.sort(np.asarray(values, dtype=np.float64)) / quantum))


def canonical_key(system: AtomicSystem) -> tuple:
    comp = tuple(composition(system.atom_types).items())
    n = system.num_atoms
    if system.periodic:
        reduced = niggli_reduce_system(system)
        p = lattice_matrix_to_params(reduced.lattice)
        d = min_image_distances(reduced)[np.triu_indices(n, k=1)]
        return ("crystal", comp, _quantize(p.lengths, LATTICE_QUANTUM), _quantize(p.angles, LATTICE_QUANTUM),
                _quantize(d, DISTANCE_QUANTUM))
    d = pairwise_distances(system.cart_coords)[np.triu_indices(n, k=1)]
    return ("molecule", comp, _quantize(d, DISTANCE_QUANTUM))


def uniqueness(systems: Sequence[AtomicSystem]) -> tuple[int, list[tuple]]:
    if not systems:
        raise ValueError("uniqueness of an empty list")
    keys = [canonical_key(s) for s in systems]
    return len(set(keys)), keys


# ------------------------------------------------------------- matching


def kabsch_rmsd(a: np.ndarray, b: np.ndarray) -> float:
    """RMSD between point sets after centring and optimal proper rotation."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    u, _, vt = np.linalg.svd(a.T @ b)
    sign = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ np.diag([1.0, 1.0, sign]) @ vt
    diff = a @ rot - b
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def _correspondence(a: AtomicSystem, coords_a, b: AtomicSystem, coords_b):
    """Index orders pairing atoms of a and b.

    Position-wise identity when types already agree (reconstructions keep atom
    order); otherwise both sides are sorted by (type, lexicographic coords).
    """
    if np.array_equal(a.atom_types, b.atom_types):
        idx = np.arange(a.num_atoms)
        return idx, idx

    def order(s, c):
        return np.lexsort((c[:, 2], c[:, 1], c[:, 0], s.atom_types))

    return order(a, coords_a), order(b, coords_b)


def match_rate(original: AtomicSystem, reconstructed: AtomicSystem | None) -> tuple[bool, float]:
    """(matched, rmsd in Angstrom); rmsd is inf when matching is not attempted."""
    if (
        reconstructed is None
        or original.periodic != reconstructed.periodic
        or composition(original.atom_types) != composition(reconstructed.atom_types)
    ):
        return False, float("inf")
    if not original.periodic:
        ca = original.cart_coords - original.cart_coords.mean(axis=0)
        cb = reconstructed.cart_coords - reconstructed.cart_coords.mean(axis=0)
        ia, ib = _correspondence(original, ca, reconstructed, cb)
        rmsd = kabsch_rmsd(ca[ia], cb[ib])
        return rmsd <= MOLECULE_RMSD_MATCH, rmsd
    try:
        pa = lattice_matrix_to_params(original.lattice)
        pb = lattice_matrix_to_params(reconstructed.lattice)
    except GeometryError:
        return False, float("inf")
    fa, fb = wrap_fractional(original.frac_coords), wrap_fractional(reconstructed.frac_coords)
    ia, ib = _correspondence(original, fa, reconstructed, fb)
    df = fb[ib] - fa[ia]
    df -= np.round(df)
    lattice = 0.5 * (original.lattice + reconstructed.lattice)
    cart = df @ lattice
    rmsd = float(np.sqrt(np.mean(np.sum(cart * cart, axis=1))))
    matched = (
        np.all(np.abs(pa.lengths - pb.lengths) <= CRYSTAL_LENGTH_TOL)
        and np.all(np.abs(pa.angles - pb.angles) <= CRYSTAL_ANGLE_TOL)
        and np.abs(df).max() <= CRYSTAL_FRAC_TOL
    )
    return bool(matched), rmsd


# --------------------------------------------------------------- report


@dataclass
class GenerationReport:
    total: int = 0
    decode_failures: int = 0
    structural_valid: int = 0
    comp_valid: int = 0
    overall_valid: int = 0
    unique: int = 0
    connected: int = 0
    molecules: int = 0
    crystals: int = 0
    matched: int | None = None
    mean_rmsd: float | None = None
    novel: int | None = None
    rates: dict = field(default_factory=dict)
    by_class: dict = field(default_factory=dict)
    per_sample: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    data_version: dict = field(default_factory=element_data_version)

    def to_json(self) -> dict:
        return asdict(self)


def _rate(k: int, n: int) -> float:
    return k / n if n else 0.0


def sample_flags(system: AtomicSystem | None, table=None) -> dict:
    """Per-sample validity flags; overall validity needs structure and composition,
    plus bond connectivity for molecules."""
    if system is None:
        return {"decoded": False, "periodic": None, "structural_valid": False, "comp_valid": False,
                "neutrality": None, "connected": None, "overall_valid": False}
    structural = structural_validity(system)
    comp = compositional_validity(system, table)
    connected = None if system.periodic else molecule_connectivity(system)
    overall = structural and comp and (connected is not False)
    return {
        "decoded": True,
        "periodic": system.periodic,
        "structural_valid": structural,
        "comp_valid": comp,
        "neutrality": neutrality_status(system.atom_types, table),
        "n_elements": len(composition(system.atom_types)),
        "connected": connected,
        "overall_valid": overall,
    }


def aggregate_report(
    systems: Sequence[AtomicSystem | None],
    originals: Sequence[AtomicSystem] | None = None,
    reference: Sequence[AtomicSystem] | None = None,
    config: dict | None = None,
    table=None,
) -> GenerationReport:
    """Per-sample metrics and their totals; ``reference`` enables a novelty count."""
    report = GenerationReport(total=len(systems), config=dict(config or {}))
    flags = [sample_flags(s, table) for s in systems]
    decoded = [s for s in systems if s is not None]
    keys = [canonical_key(s) if s is not None else None for s in systems]
    if originals is not None:
        if len(originals) != len(systems):
            raise ValueError("originals and systems differ in length")
        rmsds = []
        report.matched = 0
        for f, o, s in zip(flags, originals, systems):
            ok, rmsd = match_rate(o, s)
            f["matched"], f["rmsd"] = ok, (rmsd if np.isfinite(rmsd) else None)
            report.matched += ok
            if ok:
                rmsds.append(rmsd)
        report.mean_rmsd = float(np.mean(rmsds)) if rmsds else None
    if reference is not None:
        ref_keys = {canonical_key(s) for s in reference}
        report.novel = 0
        for f, k in zip(flags, keys):
            f["novel"] = k is not None and k not in ref_keys
            report.novel += f["novel"]
    for f, k in zip(flags, keys):
        f["key"] = None if k is None else repr(k)
    report.per_sample = flags
    report.decode_failures = sum(not f["decoded"] for f in flags)
    report.structural_valid = sum(f["structural_valid"] for f in flags)
    report.comp_valid = sum(f["comp_valid"] for f in flags)
    report.overall_valid = sum(f["overall_valid"] for f in flags)
    report.connected = sum(bool(f["connected"]) for f in flags)
    report.molecules = sum(f["periodic"] is False for f in flags)
    report.crystals = sum(f["periodic"] is True for f in flags)
    report.unique = len({k for k in keys if k is not None}) if decoded else 0
    n = report.total
    report.rates = {
        "structural_valid": _rate(report.structural_valid, n),
        "comp_valid": _rate(report.comp_valid, n),
        "overall_valid": _rate(report.overall_valid, n),
        "unique": _rate(report.unique, n),
        "connected": _rate(report.connected, report.molecules),
        "decode_failure": _rate(report.decode_failures, n),
    }
    if report.matched is not None:
        report.rates["match"] = _rate(report.matched, n)
    if report.novel is not None:
        report.rates["novel"] = _rate(report.novel, n)
    for name, periodic in (("molecule", False), ("crystal", True)):
        sel = [f for f in flags if f["periodic"] is periodic]
        if not sel:
            continue
        m = len(sel)
        entry = {
            "count": m,
            "structural_valid": _rate(sum(f["structural_valid"] for f in sel), m),
            "comp_valid": _rate(sum(f["comp_valid"] for f in sel), m),
            "overall_valid": _rate(sum(f["overall_valid"] for f in sel), m),
        }
        if not periodic:
            entry["connected"] = _rate(sum(bool(f["connected"]) for f in sel), m)
        if originals is not None:
            entry["match"] = _rate(sum(f["matched"] for f in sel), m)
        report.by_class[name] = entry
    return report
