"""Element vocabulary and the bundled per-element data tables.

Index 0 is padding, indices 1..100 are elements H..Fm (index == atomic
number) and index 101 is the MASK token used for denoising corruption.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

PAD_INDEX = 0
MASK_INDEX = 101
NUM_ELEMENTS = 100
VOCAB_SIZE = 102


@lru_cache(maxsize=None)
def _element_table() -> dict:
    text = resources.files("atomdiff.data").joinpath("elements.json").read_text("utf-8")
    return json.loads(text)


def element_data_version() -> dict:
    table = _element_table()
    return {"version": table["version"], "sources": table["sources"]}


@lru_cache(maxsize=None)
def _symbols() -> tuple[str, ...]:
    return tuple(e["symbol"] for e in _element_table()["elements"])


@lru_cache(maxsize=None)
def _symbol_to_index() -> dict[str, int]:
    return {s: i + 1 for i, s in enumerate(_symbols())}


class UnknownElementError(ValueError):
    pass


def symbol_to_index(symbol: str) -> int:
    """Map an element symbol (case-insensitive, e.g. ``"cl"``) to its index."""
    key = symbol.strip()
    key = key[:1].upper() + key[1:].lower()
    try:
        return _symbol_to_index()[key]
    except KeyError:
        raise UnknownElementError(f"unknown element symbol {symbol!r}") from None


def index_to_symbol(index: int) -> str:
    if not 1 <= int(index) <= NUM_ELEMENTS:
        raise UnknownElementError(f"index {index} is not an element (pad/mask/out of range)")
    return _symbols()[int(index) - 1]


def covalent_radius(index: int) -> float:
    """Covalent radius in Angstrom."""
    index_to_symbol(index)
    return float(_element_table()["elements"][int(index) - 1]["covalent_radius"])


@lru_cache(maxsize=None)
def oxidation_table() -> dict[int, tuple[int, ...]]:
    """Common oxidation states keyed by element index; may be empty for noble gases."""
    return {
        e["number"]: tuple(e["oxidation_states"]) for e in _element_table()["elements"]
    }
