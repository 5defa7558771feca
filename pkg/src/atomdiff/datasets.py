"""Corpus import/export, canonical JSONL records, padded batches and atom-count statistics."""

from __future__ import annotations

import json
import math
import re
import shlex
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from atomdiff.geometry import (
    AtomicSystem,
    GeometryError,
    LatticeParams,
    lattice_matrix_to_params,
    lattice_params_to_matrix,
)
from atomdiff.vocab import UnknownElementError, index_to_symbol, symbol_to_index

MOLECULE = 0
CRYSTAL = 1
NULL_CLASS = 2
CLASS_NAMES = {MOLECULE: "molecule", CRYSTAL: "crystal"}
DEFAULT_N_MAX = 24


class DataError(ValueError):
    """Malformed input data; carries a location when one is known."""


def class_from_name(name: str | int) -> int:
    if isinstance(name, int):
        if name not in CLASS_NAMES:
            raise DataError(f"unknown class label {name}")
        return name
    lookup = {v: k for k, v in CLASS_NAMES.items()}
    try:
        return lookup[name.lower()]
    except KeyError:
        raise DataError(f"unknown class name {name!r}") from None


@dataclass
class DatasetRecord:
    id: str
    system: AtomicSystem
    class_label: int

    def __post_init__(self):
        if self.class_label not in CLASS_NAMES:
            raise DataError(f"record {self.id}: class_label must be 0 or 1")
        if (self.class_label == CRYSTAL) != self.system.periodic:
            raise DataError(f"record {self.id}: class_label disagrees with periodic flag")

    @classmethod
    def from_system(cls, id: str, system: AtomicSystem) -> "DatasetRecord":
        return cls(id, system, CRYSTAL if system.periodic else MOLECULE)


# --------------------------------------------------------------------- XYZ


def parse_xyz(text: str) -> AtomicSystem:
    lines = text.splitlines()
    if not lines:
        raise DataError("empty XYZ input")
    try:
        n = int(lines[0].strip())
    except ValueError:
        raise DataError(f"malformed XYZ atom count {lines[0]!r}") from None
    if n < 1:
        raise DataError("XYZ atom count must be >= 1")
    body = lines[2 : 2 + n]
    if len(body) < n:
        raise DataError(f"XYZ declares {n} atoms but has {len(body)} coordinate lines")
    types, coords = [], []
    for k, line in enumerate(body, start=3):
        parts = line.split()
        if len(parts) < 4:
            raise DataError(f"line {k}: expected 'Symbol x y z'")
        try:
            types.append(symbol_to_index(parts[0]))
        except UnknownElementError as err:
            raise DataError(f"line {k}: {err}") from None
        try:
            xyz = [float(v) for v in parts[1:4]]
        except ValueError:
            raise DataError(f"line {k}: non-numeric coordinate") from None
        if not all(math.isfinite(v) for v in xyz):
            raise DataError(f"line {k}: non-finite coordinate")
        coords.append(xyz)
    return AtomicSystem.molecule(types, coords)


def write_xyz(system: AtomicSystem, comment: str = "") -> str:
    out = [str(system.num_atoms), comment.replace("\n", " ")]
    for t, (x, y, z) in zip(system.atom_types, system.cart_coords):
        out.append(f"{index_to_symbol(t):<2s} {x:.10f} {y:.10f} {z:.10f}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- CIF-lite

_CELL_TAGS = (
    "_cell_length_a",
    "_cell_length_b",
    "_cell_length_c",
    "_cell_angle_alpha",
    "_cell_angle_beta",
    "_cell_angle_gamma",
)
_SITE_COLUMNS = (
    "_atom_site_type_symbol",
    "_atom_site_fract_x",
    "_atom_site_fract_y",
    "_atom_site_fract_z",
)


def _cif_number(token: str) -> float:
    # "5.640(2)" -> 5.640
    return float(re.sub(r"\(\d+\)$", "", token))


def _element_from_label(token: str) -> int:
    m = re.match(r"[A-Za-z]{1,2}", token)
    if m is None:
        raise DataError(f"cannot read element from {token!r}")
    sym = m.group(0)
    try:
        return symbol_to_index(sym)
    except UnknownElementError:
        if len(sym) == 2:
            # labels such as "O1a" or "Cs" vs "C1"; fall back to one letter
            try:
                return symbol_to_index(sym[0])
            except UnknownElementError:
                pass
        raise DataError(f"unknown element {token!r}") from None


def parse_cif_lite(text: str) -> AtomicSystem:
    """Parse the CIF subset: cell lengths/angles plus an atom_site loop.

    Symmetry operations are ignored; the loop must list every atom in the cell.
    """
    cell: dict[str, float] = {}
    lines = [ln.strip() for ln in text.splitlines()]
    sites: list[list[str]] = []
    columns: list[str] | None = None
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line or line.startswith("#"):
            i += 1
            continue
        if line.lower() == "loop_":
            header = []
            i += 1
            while i < len(lines) and lines[i].startswith("_"):
                header.append(lines[i].split()[0].lower())
                i += 1
            rows = []
            while i < len(lines) and lines[i] and not lines[i].startswith(("_", "loop_", "data_", "#")):
                rows.append(shlex.split(lines[i]))
                i += 1
            if any(h.startswith("_atom_site_") for h in header) and "_atom_site_fract_x" in header:
                columns, sites = header, rows
            continue
        tag = line.split()[0].lower()
        if tag in _CELL_TAGS:
            parts = line.split()
            if len(parts) < 2:
                raise DataError(f"cell tag {tag} without value")
            cell[tag] = _cif_number(parts[1])
        i += 1

    missing = [t for t in _CELL_TAGS if t not in cell]
    if missing:
        raise DataError(f"missing cell tags: {', '.join(missing)}")
    if columns is None:
        raise DataError("no atom_site loop with fractional coordinates")
    absent = [c for c in _SITE_COLUMNS if c not in columns]
    if absent:
        raise DataError(f"atom_site loop missing columns: {', '.join(absent)}")
    idx = [columns.index(c) for c in _SITE_COLUMNS]
    types, frac = [], []
    for row in sites:
        if len(row) < len(columns):
            raise DataError(f"atom_site row has {len(row)} fields, expected {len(columns)}")
        types.append(_element_from_label(row[idx[0]]))
        frac.append([_cif_number(row[j]) for j in idx[1:]])
    if not types:
        raise DataError("atom_site loop is empty")
    try:
        lattice = lattice_params_to_matrix(LatticeParams(*(cell[t] for t in _CELL_TAGS)))
    except GeometryError as err:
        raise DataError(f"invalid cell: {err}") from None
    return AtomicSystem.crystal(types, frac, lattice)


def write_cif_lite(system: AtomicSystem, name: str = "structure") -> str:
    p = lattice_matrix_to_params(system.lattice)
    out = [
        f"data_{name}",
        f"_cell_length_a {p.a:.10f}",
        f"_cell_length_b {p.b:.10f}",
        f"_cell_length_c {p.c:.10f}",
        f"_cell_angle_alpha {p.alpha:.10f}",
        f"_cell_angle_beta {p.beta:.10f}",
        f"_cell_angle_gamma {p.gamma:.10f}",
        "loop_",
        *_SITE_COLUMNS,
    ]
    for t, (x, y, z) in zip(system.atom_types, system.frac_coords):
        out.append(f"{index_to_symbol(t)} {x:.10f} {y:.10f} {z:.10f}")
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------- JSONL


def record_to_json(record: DatasetRecord) -> dict:
    s = record.system
    return {
        "id": record.id,
        "class_label": int(record.class_label),
        "atom_types": [int(t) for t in s.atom_types],
        "cart": s.cart_coords.tolist(),
        "frac": s.frac_coords.tolist(),
        "lattice": s.lattice.tolist(),
        "periodic": bool(s.periodic),
    }


_FIELDS = ("id", "class_label", "atom_types", "cart", "frac", "lattice", "periodic")


def record_from_json(obj: dict) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise DataError("record must be a JSON object")
    missing = [f for f in _FIELDS if f not in obj]
    if missing:
        raise DataError(f"missing fields: {', '.join(missing)}")
    try:
        system = AtomicSystem(
            np.asarray(obj["atom_types"], dtype=np.int64),
            np.asarray(obj["cart"], dtype=np.float64),
            np.asarray(obj["frac"], dtype=np.float64),
            np.asarray(obj["lattice"], dtype=np.float64),
            periodic=bool(obj["periodic"]),
        )
        system.validate()
    except (ValueError, TypeError) as err:
        raise DataError(str(err)) from None
    return DatasetRecord(str(obj["id"]), system, int(obj["class_label"]))


def load_jsonl(path) -> list[DatasetRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(json.loads(line)))
            except json.JSONDecodeError as err:
                raise DataError(f"{path}:{lineno}: invalid JSON ({err.msg})") from None
            except DataError as err:
                raise DataError(f"{path}:{lineno}: {err}") from None
    return records


def dumps_jsonl(records: Iterable[DatasetRecord]) -> str:
    return "".join(json.dumps(record_to_json(r)) + "\n" for r in records)


def save_jsonl(records: Iterable[DatasetRecord], path) -> None:
    Path(path).write_text(dumps_jsonl(records), encoding="utf-8")


# ----------------------------------------------------------------- batches


@dataclass
class Batch:
    """Padded batch; real atoms occupy the first ``n_atoms[i]`` slots of row i."""

    atom_types: np.ndarray  # (B, N_max) int64, 0 = pad
    cart: np.ndarray  # (B, N_max, 3)
    frac: np.ndarray  # (B, N_max, 3)
    lattice: np.ndarray  # (B, 3, 3)
    class_labels: np.ndarray  # (B,)
    pad_mask: np.ndarray  # (B, N_max) bool, True for real atoms
    n_atoms: np.ndarray  # (B,)
    ids: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return int(self.atom_types.shape[0])

    @property
    def periodic(self) -> np.ndarray:
        return self.class_labels == CRYSTAL


def collate(records: Sequence[DatasetRecord], n_max: int) -> Batch:
    B = len(records)
    atom_types = np.zeros((B, n_max), dtype=np.int64)
    cart = np.zeros((B, n_max, 3))
    frac = np.zeros((B, n_max, 3))
    lattice = np.zeros((B, 3, 3))
    pad_mask = np.zeros((B, n_max), dtype=bool)
    n_atoms = np.zeros(B, dtype=np.int64)
    labels = np.zeros(B, dtype=np.int64)
    for i, rec in enumerate(records):
        s = rec.system
        n = s.num_atoms
        if n > n_max:
            raise DataError(f"record {rec.id} has {n} atoms > N_max={n_max}")
        atom_types[i, :n] = s.atom_types
        cart[i, :n] = s.cart_coords
        frac[i, :n] = s.frac_coords
        lattice[i] = s.lattice
        pad_mask[i, :n] = True
        n_atoms[i] = n
        labels[i] = rec.class_label
    return Batch(atom_types, cart, frac, lattice, labels, pad_mask, n_atoms, tuple(r.id for r in records))


def make_batches(
    records: Sequence[DatasetRecord],
    batch_size: int,
    n_max: int,
    rng: np.random.Generator | None,
    transform: Callable[[AtomicSystem, np.random.Generator], AtomicSystem] | None = None,
) -> Iterator[Batch]:
    """One epoch of padded batches, shuffled with ``rng`` (in order when rng is None).

    ``transform`` (e.g. augmentation) is applied per system with the same rng,
    after the shuffle permutation has been drawn.
    """
    for rec in records:
        if rec.system.num_atoms > n_max:
            raise DataError(f"record {rec.id} has {rec.system.num_atoms} atoms > N_max={n_max}")
    order = np.arange(len(records)) if rng is None else rng.permutation(len(records))
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        if transform is not None:
            chunk = [DatasetRecord(r.id, transform(r.system, rng), r.class_label) for r in chunk]
        yield collate(chunk, n_max)


# --------------------------------------------------------- atom counts


class AtomCountHistogram:
    """Empirical distribution of atom counts for one class."""

    def __init__(self, counts: dict[int, int]):
        if not counts or sum(counts.values()) == 0:
            raise DataError("empty atom-count histogram")
        self.sizes = np.array(sorted(counts), dtype=np.int64)
        total = sum(counts.values())
        self.probs = np.array([counts[k] / total for k in self.sizes])
        self.counts = {int(k): int(counts[k]) for k in self.sizes}

    def as_dict(self) -> dict[int, float]:
        return {int(k): float(p) for k, p in zip(self.sizes, self.probs)}

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.sizes, size=size, p=self.probs)

    def to_json(self) -> dict:
        return {str(k): v for k, v in self.counts.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "AtomCountHistogram":
        return cls({int(k): int(v) for k, v in obj.items()})


def atom_count_histogram(records: Iterable[DatasetRecord], class_label: int) -> AtomCountHistogram:
    counts = Counter(r.system.num_atoms for r in records if r.class_label == class_label)
    if not counts:
        raise DataError(f"no records of class {CLASS_NAMES.get(class_label, class_label)}")
    return AtomCountHistogram(dict(counts))
