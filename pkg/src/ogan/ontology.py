"""Two-layer category ontology and one-hot label encoding.

Label indices are file positions: the i-th entry of ``sub_categories`` in the
JSON document is label ``i``. Nothing is sorted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Ontology",
    "OntologyError",
    "load_ontology",
    "save_ontology",
    "encode_sub_onehot",
    "encode_main_onehot",
    "parent_of",
]


class OntologyError(ValueError):
    """Raised for malformed ontology files or invalid label indices."""


@dataclass(frozen=True)
class Ontology:
    main_categories: tuple[str, ...]
    sub_categories: tuple[tuple[str, int], ...]
    version: str = ""

    def __post_init__(self):
        object.__setattr__(self, "main_categories", tuple(self.main_categories))
        object.__setattr__(
            self, "sub_categories", tuple((str(n), int(p)) for n, p in self.sub_categories)
        )
        _validate(self.main_categories, self.sub_categories)

    @property
    def num_main(self) -> int:
        return len(self.main_categories)

    @property
    def num_sub(self) -> int:
        return len(self.sub_categories)

    @property
    def sub_names(self) -> list[str]:
        return [name for name, _ in self.sub_categories]

    def num_labels(self, use_ontology: bool = True) -> int:
        """Size of the conditioning one-hot: sub-categories, or mains for the baseline."""
        return self.num_sub if use_ontology else self.num_main

    def sub_index(self, name: str) -> int:
        for i, (sub, _) in enumerate(self.sub_categories):
            if sub == name:
                return i
        raise OntologyError(f"unknown sub-category {name!r}")

    def children(self, main_index: int) -> list[int]:
        return [i for i, (_, p) in enumerate(self.sub_categories) if p == main_index]

    def label_for(self, sub_index: int, use_ontology: bool = True) -> int:
        """Conditioning label of an example: itself, or its parent for the baseline."""
        if use_ontology:
            _check_index(sub_index, self.num_sub, "sub_index")
            return int(sub_index)
        return parent_of(self, sub_index)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "main_categories": list(self.main_categories),
            "sub_categories": [{"name": n, "parent": p} for n, p in self.sub_categories],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Ontology":
        return _from_document(doc)


def _validate(mains, subs):
    if not mains:
        raise OntologyError("main_categories: must be non-empty")
    if not subs:
        raise OntologyError("sub_categories: must be non-empty")
    seen = {}
    for i, name in enumerate(mains):
        if name in seen:
            raise OntologyError(
                f"main_categories[{i}]: duplicate name {name!r} (first at index {seen[name]})"
            )
        seen[name] = i
    seen = {}
    for i, (name, parent) in enumerate(subs):
        if name in seen:
            raise OntologyError(
                f"sub_categories[{i}].name: duplicate name {name!r} (first at index {seen[name]})"
            )
        seen[name] = i
        if not 0 <= parent < len(mains):
            raise OntologyError(
                f"sub_categories[{i}].parent: dangling parent {parent} for {name!r}; "
                f"valid range is 0..{len(mains) - 1}"
            )


def _from_document(doc) -> Ontology:
    if not isinstance(doc, dict):
        raise OntologyError("top level: expected a JSON object")
    for key in ("main_categories", "sub_categories"):
        if key not in doc:
            raise OntologyError(f"{key}: missing required key")
    mains = doc["main_categories"]
    if not isinstance(mains, list) or not all(isinstance(m, str) for m in mains):
        raise OntologyError("main_categories: expected an array of strings")
    raw_subs = doc["sub_categories"]
    if not isinstance(raw_subs, list):
        raise OntologyError("sub_categories: expected an array of objects")
    subs = []
    for i, item in enumerate(raw_subs):
        if not isinstance(item, dict):
            raise OntologyError(f"sub_categories[{i}]: expected an object with name and parent")
        extra = set(item) - {"name", "parent"}
        if extra:
            # nested children would make a third layer
            raise OntologyError(
                f"sub_categories[{i}]: unexpected keys {sorted(extra)}; "
                "only two-layer ontologies are supported"
            )
        name, parent = item.get("name"), item.get("parent")
        if not isinstance(name, str) or not name:
            raise OntologyError(f"sub_categories[{i}].name: expected a non-empty string")
        if isinstance(parent, bool) or not isinstance(parent, int):
            raise OntologyError(f"sub_categories[{i}].parent: expected an integer index")
        subs.append((name, parent))
    version = doc.get("version", "")
    if not isinstance(version, str):
        raise OntologyError("version: expected a string")
    return Ontology(tuple(mains), tuple(subs), version)


def load_ontology(path) -> Ontology:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise OntologyError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return _from_document(doc)
    except OntologyError as exc:
        raise OntologyError(f"{path}: {exc}") from None


def save_ontology(ontology: Ontology, path) -> None:
    Path(path).write_text(json.dumps(ontology.to_dict(), indent=2) + "\n", encoding="utf-8")


def _check_index(index, size, what):
    if isinstance(index, bool) or not isinstance(index, (int, np.integer)):
        raise OntologyError(f"{what} must be an integer, got {index!r}")
    if not 0 <= index < size:
        raise OntologyError(f"{what} {index} out of range [0, {size})")


def _onehot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size, dtype=np.float32)
    v[index] = 1.0
    return v


def encode_sub_onehot(ontology: Ontology, sub_index: int) -> np.ndarray:
    _check_index(sub_index, ontology.num_sub, "sub_index")
    return _onehot(sub_index, ontology.num_sub)


def encode_main_onehot(ontology: Ontology, main_index: int) -> np.ndarray:
    _check_index(main_index, ontology.num_main, "main_index")
    return _onehot(main_index, ontology.num_main)


def parent_of(ontology: Ontology, sub_index: int) -> int:
    _check_index(sub_index, ontology.num_sub, "sub_index")
    return ontology.sub_categories[sub_index][1]
