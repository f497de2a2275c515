"""The ID / unknown / background label partition.

Internally labels are 0-based: ID classes occupy ``0..K-1``, the merged
unknown class sits at index ``K`` and background is last at ``K+1``, so a
classifier over the space emits ``K+2`` logits. Externally (manifests,
config echo, reports) labels are 1-based with ``K+1`` meaning unknown.
"""

from __future__ import annotations

from dataclasses import dataclass

UNKNOWN_NAME = "unknown"
BACKGROUND_NAME = "background"

KIND_ID = "id"
KIND_OOD = "ood"


@dataclass(frozen=True)
class LabelSpace:
    id_class_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.id_class_names) < 1:
            raise ValueError("label space needs at least one ID class")
        if len(set(self.id_class_names)) != len(self.id_class_names):
            raise ValueError(f"duplicate ID class names: {self.id_class_names}")
        reserved = {UNKNOWN_NAME, BACKGROUND_NAME}
        if reserved & set(self.id_class_names):
            raise ValueError(f"ID class names may not use reserved names {reserved}")

    @property
    def num_id_classes(self) -> int:
        return len(self.id_class_names)

    @property
    def unknown_index(self) -> int:
        return self.num_id_classes

    @property
    def background_index(self) -> int:
        return self.num_id_classes + 1

    @property
    def total_logits(self) -> int:
        return self.num_id_classes + 2

    @property
    def id_indices(self) -> range:
        return range(self.num_id_classes)

    def class_name(self, index: int) -> str:
        if 0 <= index < self.num_id_classes:
            return self.id_class_names[index]
        if index == self.unknown_index:
            return UNKNOWN_NAME
        if index == self.background_index:
            return BACKGROUND_NAME
        raise ValueError(f"label index {index} outside space of {self.total_logits} labels")

    def index_of(self, name: str) -> int:
        if name == UNKNOWN_NAME:
            return self.unknown_index
        if name == BACKGROUND_NAME:
            return self.background_index
        try:
            return self.id_class_names.index(name)
        except ValueError:
            raise ValueError(f"unknown class name {name!r}") from None

    def external_label(self, index: int) -> int:
        """1-based label for serialization; unknown maps to K+1."""
        if 0 <= index <= self.unknown_index:
            return index + 1
        raise ValueError(f"background has no external label (index {index})")

    def label_table(self) -> dict[int, str]:
        """External 1-based label -> name, covering ID classes and unknown."""
        table = {i + 1: n for i, n in enumerate(self.id_class_names)}
        table[self.unknown_index + 1] = UNKNOWN_NAME
        return table


def restricted_class_set(kind: str, space: LabelSpace) -> frozenset[int]:
    """Label indices a softmax is normalized over.

    ``"id"`` rows compete over all K+2 labels; ``"ood"`` rows compete only
    over {unknown, background}.
    """
    if kind == KIND_ID:
        return frozenset(range(space.total_logits))
    if kind == KIND_OOD:
        return frozenset((space.unknown_index, space.background_index))
    raise ValueError(f"kind must be '{KIND_ID}' or '{KIND_OOD}', got {kind!r}")
