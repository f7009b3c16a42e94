"""Original dataset class ids mapped onto the seven shared super classes.

Tables are tab-separated text, one row per original class::

    orig_id<TAB>name<TAB>used(0|1)<TAB>super_class

with ``#`` starting a comment line. ``super_class`` is one of the seven
names, ``void`` or ``other``. Unused rows (and void/other) remap to IGNORE.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from mtuda.errors import ValidationError
from mtuda.synth import CLASS_NAMES
from mtuda.tensor import IGNORE

SHIPPED = ("cityscapes", "gta5", "mapillary", "idd")
NON_CLASSES = ("void", "other")


@dataclass(frozen=True)
class MappingEntry:
    orig_id: int
    name: str
    used: bool
    super_class: str


@dataclass(frozen=True)
class ClassMapping:
    dataset_name: str
    entries: tuple

    def entry(self, orig_id: int) -> MappingEntry:
        for e in self.entries:
            if e.orig_id == orig_id:
                return e
        raise KeyError(orig_id)

    def lookup(self) -> dict:
        """``orig_id -> super-class index or IGNORE``."""
        return {
            e.orig_id: CLASS_NAMES.index(e.super_class) if e.used else IGNORE
            for e in self.entries
        }


def load_mapping(text: str, dataset_name: str = "custom") -> ClassMapping:
    errors, entries, seen = [], [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            errors.append((lineno, f"expected 4 tab-separated fields, got {len(parts)}"))
            continue
        oid, name, used, sup = (p.strip() for p in parts)
        try:
            oid = int(oid)
        except ValueError:
            errors.append((lineno, f"orig_id {oid!r} is not an integer"))
            continue
        if used not in ("0", "1"):
            errors.append((lineno, f"used must be 0 or 1, got {used!r}"))
            continue
        if sup not in CLASS_NAMES and sup not in NON_CLASSES:
            errors.append((lineno, f"unknown super class {sup!r}"))
            continue
        if used == "1" and sup in NON_CLASSES:
            errors.append((lineno, f"used entry {name!r} maps to {sup}"))
            continue
        if oid in seen:
            errors.append((lineno, f"duplicate orig_id {oid} (first on line {seen[oid]})"))
            continue
        seen[oid] = lineno
        entries.append(MappingEntry(oid, name, used == "1", sup))
    if not errors:
        hit = {e.super_class for e in entries if e.used}
        missing = [c for c in CLASS_NAMES if c not in hit]
        if missing:
            errors.append((0, f"no used entry maps to {', '.join(missing)}"))
    if errors:
        detail = "; ".join(f"line {n}: {m}" for n, m in errors)
        raise ValidationError(f"{dataset_name}: invalid mapping table ({detail})", errors)
    return ClassMapping(dataset_name, tuple(entries))


def dump_mapping(mapping: ClassMapping) -> str:
    rows = ["# orig_id\tname\tused\tsuper_class"]
    rows += [f"{e.orig_id}\t{e.name}\t{int(e.used)}\t{e.super_class}" for e in mapping.entries]
    return "\n".join(rows) + "\n"


def shipped_text(name: str) -> str:
    if name not in SHIPPED:
        raise KeyError(f"no shipped mapping {name!r}; have {SHIPPED}")
    return resources.files("mtuda").joinpath("data", "taxonomy", f"{name}.tsv").read_text()


def shipped_mapping(name: str) -> ClassMapping:
    return load_mapping(shipped_text(name), name)


def remap_labels(mapping: ClassMapping, labels) -> np.ndarray:
    """Original ids to super-class indices (0..6) or IGNORE, as uint8."""
    labels = np.asarray(labels)
    table = mapping.lookup()
    present = np.unique(labels)
    unknown = [int(v) for v in present if int(v) not in table]
    if unknown:
        raise ValidationError(f"{mapping.dataset_name}: label id(s) {unknown} not in mapping")
    out = np.empty(labels.shape, dtype=np.uint8)
    for v in present:
        out[labels == v] = table[int(v)]
    return out
