"""Hierarchical diagnosis encoding.

Diagnosis codes arrive as pipe-separated paths ("cardio|shock|septic").
Every level of every path becomes a candidate binary feature; nodes seen
in at least a cutoff fraction of training stays are retained, and a code
below the cutoff still contributes through its retained ancestors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DatasetError

PREVALENCE_CUTOFF = 0.01
PATH_SEPARATOR = "|"


def path_ancestors(code_path: str) -> list[str]:
    """All hierarchy nodes named by a path, shallowest first."""
    parts = [p for p in code_path.split(PATH_SEPARATOR) if p]
    if not parts:
        return []
    return [PATH_SEPARATOR.join(parts[: i + 1]) for i in range(len(parts))]


@dataclass
class DiagnosisCodebook:
    """Ordered retained hierarchy nodes with their training prevalence."""

    nodes: list[str] = field(default_factory=list)
    prevalence: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        retained = set(self.nodes)
        for node in self.nodes:
            for ancestor in path_ancestors(node)[:-1]:
                if ancestor not in retained:
                    raise DatasetError(
                        f"codebook violates hierarchy closure: {node!r} is "
                        f"retained but its ancestor {ancestor!r} is not"
                    )

    def __len__(self) -> int:
        return len(self.nodes)

    def to_dict(self) -> dict:
        return {"nodes": list(self.nodes), "prevalence": dict(self.prevalence)}

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosisCodebook":
        return cls(nodes=list(d["nodes"]), prevalence=dict(d["prevalence"]))


def build_codebook(
    stay_paths: dict[int, list[str]], cutoff: float = PREVALENCE_CUTOFF
) -> DiagnosisCodebook:
    """Retain hierarchy nodes whose training prevalence reaches ``cutoff``.

    ``stay_paths`` maps each training stay to its code paths.  Prevalence
    is the fraction of stays whose expanded ancestor set contains the
    node; ancestors are always at least as prevalent as their children,
    so the retained set is closed under taking parents by construction.
    """
    if not stay_paths:
        return DiagnosisCodebook()
    counts: dict[str, int] = {}
    for paths in stay_paths.values():
        nodes = set()
        for path in paths:
            nodes.update(path_ancestors(path))
        for node in nodes:
            counts[node] = counts.get(node, 0) + 1
    n_stays = len(stay_paths)
    retained = sorted(n for n, c in counts.items() if c / n_stays >= cutoff)
    return DiagnosisCodebook(
        nodes=retained, prevalence={n: counts[n] / n_stays for n in retained}
    )


def encode_diagnoses(code_paths: list[str], codebook: DiagnosisCodebook) -> np.ndarray:
    """Binary vector over the codebook: 1 for every retained ancestor of
    every path.  Unretained nodes contribute nothing of their own."""
    vector = np.zeros(len(codebook), dtype=np.float64)
    if not code_paths:
        return vector
    index = {node: i for i, node in enumerate(codebook.nodes)}
    for path in code_paths:
        for node in path_ancestors(path):
            if node in index:
                vector[index[node]] = 1.0
    return vector
