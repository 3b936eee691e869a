"""Class-set algebra: merging dataset label vocabularies under declared
semantic relations.

Set relations between label semantics (is "Tree" a kind of "Vegetation"?)
are not computable from pixels, so they arrive as human-authored
declarations: each supplemental class is exactly one of ``subset_of`` an
existing unified class, ``disjoint`` from all of them, or ``overlaps``
several.  Standard merging drops overlapping classes to the ignore id;
thrifty merging keeps them as extra trainable classes and records their
indices in the conflict set.

Merging is a one-shot pure computation; the resulting maps are immutable
and safe to share across workers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

IGNORE_ID = 255


class TaxonomyError(ValueError):
    """A class-set, relation declaration, or merge is inconsistent."""


def _key(name: str) -> str:
    # dataset files disagree on casing/whitespace
    return " ".join(name.strip().lower().split())


@dataclass(frozen=True)
class ClassSet:
    """A dataset's label vocabulary: ordered (class name, native id) pairs."""

    dataset: str
    classes: tuple

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple((str(n), int(i)) for n, i in self.classes))
        ids = [i for _, i in self.classes]
        if len(set(ids)) != len(ids):
            raise TaxonomyError(f"dataset {self.dataset!r}: duplicate native ids")
        if any(i < 0 for i in ids):
            raise TaxonomyError(f"dataset {self.dataset!r}: negative native id")
        if IGNORE_ID in ids:
            raise TaxonomyError(f"dataset {self.dataset!r}: native id {IGNORE_ID} is reserved")
        keys = [_key(n) for n, _ in self.classes]
        if len(set(keys)) != len(keys):
            raise TaxonomyError(f"dataset {self.dataset!r}: duplicate class names")

    def names(self) -> list[str]:
        return [n for n, _ in self.classes]

    def __len__(self) -> int:
        return len(self.classes)


_RELATION_RE = re.compile(r"^\s*subset_of\s*\(\s*(.+?)\s*\)\s*$")


@dataclass(frozen=True)
class Relation:
    kind: str  # subset_of | disjoint | overlaps
    target: str = ""

    @classmethod
    def parse(cls, text: str) -> "Relation":
        s = text.strip()
        if s == "disjoint":
            return cls("disjoint")
        if s == "overlaps":
            return cls("overlaps")
        m = _RELATION_RE.match(s)
        if m:
            return cls("subset_of", m.group(1))
        raise TaxonomyError(
            f"bad relation {text!r}: expected 'subset_of(<class>)', 'disjoint', or 'overlaps'"
        )

    def render(self) -> str:
        return f"subset_of({self.target})" if self.kind == "subset_of" else self.kind


class RelationDecl:
    """Exactly one relation per class of one supplemental dataset."""

    def __init__(self, relations: dict):
        self.relations = {
            _key(name): (Relation.parse(rel) if isinstance(rel, str) else rel)
            for name, rel in relations.items()
        }

    def validate_against(self, class_set: ClassSet) -> None:
        declared = set(self.relations)
        present = {_key(n) for n in class_set.names()}
        missing = sorted(present - declared)
        if missing:
            raise TaxonomyError(
                f"dataset {class_set.dataset!r}: no relation declared for {missing}"
            )
        unknown = sorted(declared - present)
        if unknown:
            raise TaxonomyError(
                f"dataset {class_set.dataset!r}: relations for unknown classes {unknown}"
            )

    def for_class(self, name: str) -> Relation:
        return self.relations[_key(name)]


@dataclass
class UnifiedTaxonomy:
    """Merged vocabulary: dense unified ids, conflict set, and provenance."""

    main_dataset: str
    sources: list  # dataset names in merge order, main first
    classes: list  # unified class names, id = position
    conflict_indices: frozenset
    provenance: list  # per class, datasets that contributed to it

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def index_of(self, name: str) -> int:
        try:
            return [_key(c) for c in self.classes].index(_key(name))
        except ValueError:
            raise TaxonomyError(f"class {name!r} not in unified taxonomy") from None


def _merge(main: ClassSet, supplements, keep_conflicts: bool):
    names = list(main.names())
    provenance = [[main.dataset] for _ in names]
    by_key = {_key(n): i for i, n in enumerate(names)}
    maps = {main.dataset: {native: i for i, (_, native) in enumerate(main.classes)}}
    sources = [main.dataset]
    conflicts = set()
    for class_set, decl in supplements:
        if class_set.dataset in maps:
            raise TaxonomyError(f"dataset {class_set.dataset!r} merged twice")
        decl.validate_against(class_set)
        mapping = {}
        for name, native in class_set.classes:
            rel = decl.for_class(name)
            if rel.kind == "subset_of":
                target = by_key.get(_key(rel.target))
                if target is None:
                    raise TaxonomyError(
                        f"dataset {class_set.dataset!r}: class {name!r} declared "
                        f"subset_of({rel.target!r}) but no such unified class exists"
                    )
                mapping[native] = target
                provenance[target].append(class_set.dataset)
            elif rel.kind == "disjoint" or (rel.kind == "overlaps" and keep_conflicts):
                if _key(name) in by_key:
                    raise TaxonomyError(
                        f"dataset {class_set.dataset!r}: new class {name!r} duplicates "
                        "an existing unified class"
                    )
                new_id = len(names)
                names.append(name)
                provenance.append([class_set.dataset])
                by_key[_key(name)] = new_id
                mapping[native] = new_id
                if rel.kind == "overlaps":
                    conflicts.add(new_id)
            else:  # overlaps under standard relabeling
                mapping[native] = IGNORE_ID
        maps[class_set.dataset] = mapping
        sources.append(class_set.dataset)
    taxonomy = UnifiedTaxonomy(main.dataset, sources, names, frozenset(conflicts), provenance)
    return taxonomy, maps


def merge_standard(main: ClassSet, supplements):
    """Merge keeping the main vocabulary verbatim; overlapping classes are
    dropped to the ignore id.  Returns (UnifiedTaxonomy, {dataset: relabel map})."""
    return _merge(main, supplements, keep_conflicts=False)


def merge_thrifty(main: ClassSet, supplements):
    """Like standard merging, but overlapping classes become extra unified
    classes whose ids are collected in ``conflict_indices``."""
    return _merge(main, supplements, keep_conflicts=True)


def relabel_image(label: np.ndarray, mapping: dict) -> np.ndarray:
    """Pointwise native-id -> unified-id substitution; the ignore id passes through."""
    label = np.asarray(label)
    if not np.issubdtype(label.dtype, np.integer):
        raise TaxonomyError(f"label map must be integer-typed, got {label.dtype}")
    lut = np.full(256, -1, dtype=np.int16)
    lut[IGNORE_ID] = IGNORE_ID
    for native, unified in mapping.items():
        lut[native] = unified
    if label.size and (label.min() < 0 or label.max() > 255):
        raise TaxonomyError("label values outside [0, 255]")
    out = lut[label]
    bad = out < 0
    if bad.any():
        values = sorted(np.unique(label[bad]).tolist())
        raise TaxonomyError(
            f"unmapped native ids {values} over {int(bad.sum())} pixels"
        )
    return out.astype(np.uint8)


def class_count_report(taxonomy: UnifiedTaxonomy) -> list[dict]:
    """Per-source growth summary: original / added / conflict class names."""
    rows = []
    for ds in taxonomy.sources:
        added = [
            name for i, name in enumerate(taxonomy.classes)
            if taxonomy.provenance[i][0] == ds and i not in taxonomy.conflict_indices
        ]
        conflict = [
            name for i, name in enumerate(taxonomy.classes)
            if taxonomy.provenance[i][0] == ds and i in taxonomy.conflict_indices
        ]
        if ds == taxonomy.main_dataset:
            rows.append({"dataset": ds, "original": len(added), "added": [], "conflict": conflict})
        else:
            rows.append({"dataset": ds, "original": 0, "added": added, "conflict": conflict})
    return rows


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_class_set(path, dataset: str) -> ClassSet:
    """Read a ``id<TAB>name`` class-set file."""
    classes = []
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TaxonomyError(f"{path}:{lineno}: expected 'id<TAB>name', got {line!r}")
            classes.append((parts[1], int(parts[0])))
    return ClassSet(dataset, tuple(classes))


def save_class_set(path, class_set: ClassSet) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        for name, native in class_set.classes:
            fp.write(f"{native}\t{name}\n")


def save_taxonomy(path, taxonomy: UnifiedTaxonomy) -> None:
    """Write ``id<TAB>name[<TAB>conflict]`` lines in unified-id order."""
    with open(path, "w", encoding="utf-8") as fp:
        for i, name in enumerate(taxonomy.classes):
            flag = "\tconflict" if i in taxonomy.conflict_indices else ""
            fp.write(f"{i}\t{name}{flag}\n")


def load_taxonomy_classes(path) -> tuple[list, frozenset]:
    """Read back a taxonomy file: (class names, conflict indices)."""
    names, conflicts = [], set()
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3) or int(parts[0]) != len(names):
                raise TaxonomyError(f"{path}:{lineno}: malformed taxonomy line {line!r}")
            names.append(parts[1])
            if len(parts) == 3:
                if parts[2] != "conflict":
                    raise TaxonomyError(f"{path}:{lineno}: unknown flag {parts[2]!r}")
                conflicts.add(len(names) - 1)
    return names, frozenset(conflicts)


def save_relabel_maps(path, maps: dict) -> None:
    """Write ``dataset<TAB>native_id<TAB>unified_id|IGNORE`` lines."""
    with open(path, "w", encoding="utf-8") as fp:
        for ds in maps:
            for native in sorted(maps[ds]):
                unified = maps[ds][native]
                word = "IGNORE" if unified == IGNORE_ID else str(unified)
                fp.write(f"{ds}\t{native}\t{word}\n")


def load_relabel_maps(path) -> dict:
    maps: dict = {}
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TaxonomyError(f"{path}:{lineno}: malformed relabel line {line!r}")
            ds, native, word = parts
            unified = IGNORE_ID if word == "IGNORE" else int(word)
            maps.setdefault(ds, {})[int(native)] = unified
    return maps


def load_relations_file(path) -> dict:
    """Read a relations JSON document: dataset -> {class: relation string}."""
    with open(path, "r", encoding="utf-8") as fp:
        doc = json.load(fp)
    if not isinstance(doc, dict):
        raise TaxonomyError(f"{path}: relations document must be a JSON object")
    return {ds: RelationDecl(rels) for ds, rels in doc.items()}


# ---------------------------------------------------------------------------
# shipped fixtures (Cityscapes-style urban sets plus an off-road supplement)
# ---------------------------------------------------------------------------

FIXTURE_DATASETS = ("cityscapes", "lostandfound", "kitti", "rellis3d")


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("segfuse").joinpath("fixtures", name)))


def load_builtin_class_set(dataset: str) -> ClassSet:
    if dataset not in FIXTURE_DATASETS:
        raise TaxonomyError(f"no built-in class set for {dataset!r}")
    return load_class_set(fixture_path(f"{dataset}.classes"), dataset)


def load_builtin_relations() -> dict:
    return load_relations_file(fixture_path("relations.json"))
