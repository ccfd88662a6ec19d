"""Multi-subject time-series dataset and its on-disk layout.

A dataset directory holds ``labels.csv`` (columns ``node,network``) and one
``sub_<id>.csv`` per subject whose header lists node names and whose rows
are time points.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from common.errors import DataError, MissingLabels, NodeMismatch, NonFiniteData, UnknownNode

LOGGER = logging.getLogger(__name__)

LABELS_FILE = "labels.csv"
SUBJECT_PREFIX = "sub_"
MIN_TIME_POINTS = 8


@dataclass
class SubjectDataset:
    """Per-subject (time points x nodes) matrices sharing one node ordering"""

    subject_ids: List[str]
    nodes: List[str]
    networks: Dict[str, str]
    matrices: List[np.ndarray]
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.subject_ids) != len(self.matrices):
            raise DataError("one matrix per subject is required")
        if len(set(self.nodes)) != len(self.nodes):
            raise DataError("node labels must be unique")
        missing = [node for node in self.nodes if node not in self.networks]
        if missing:
            raise DataError(f"no network assignment for nodes {missing}")
        self.matrices = [np.asarray(m, dtype=float) for m in self.matrices]
        for subject_id, matrix in zip(self.subject_ids, self.matrices):
            if matrix.ndim != 2 or matrix.shape[1] != len(self.nodes):
                raise NodeMismatch(
                    f"subject {subject_id}: expected {len(self.nodes)} columns, got shape {matrix.shape}"
                )
            if matrix.shape[0] < MIN_TIME_POINTS:
                raise DataError(
                    f"subject {subject_id}: {matrix.shape[0]} time points, need {MIN_TIME_POINTS}"
                )
            if not np.all(np.isfinite(matrix)):
                row, col = np.argwhere(~np.isfinite(matrix))[0]
                raise NonFiniteData(
                    f"subject {subject_id}: non-finite value at row {row}, column {self.nodes[col]}",
                    row=int(row),
                    column=self.nodes[col],
                )
        self._index = {node: i for i, node in enumerate(self.nodes)}

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_rows(self) -> int:
        return int(sum(m.shape[0] for m in self.matrices))

    def node_index(self, node: str) -> int:
        try:
            return self._index[node]
        except KeyError:
            raise UnknownNode(f"unknown node '{node}'") from None

    def nodes_in(self, networks: Union[str, Iterable[str]]) -> List[str]:
        wanted = {networks} if isinstance(networks, str) else set(networks)
        return [node for node in self.nodes if self.networks[node] in wanted]

    def series(self, subject: int, node: str) -> np.ndarray:
        return self.matrices[subject][:, self.node_index(node)]

    def stacked(self, nodes: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        """Rows of all subjects for ``nodes`` plus the subject position of each row"""
        cols = [self.node_index(node) for node in nodes]
        x = np.vstack([m[:, cols] for m in self.matrices])
        subject_index = np.concatenate(
            [np.full(m.shape[0], i, dtype=np.int64) for i, m in enumerate(self.matrices)]
        )
        return x, subject_index

    def pooled(self, node: str) -> np.ndarray:
        col = self.node_index(node)
        return np.concatenate([m[:, col] for m in self.matrices])

    def subset(self, nodes: Sequence[str]) -> "SubjectDataset":
        cols = [self.node_index(node) for node in nodes]
        return SubjectDataset(
            subject_ids=list(self.subject_ids),
            nodes=list(nodes),
            networks={node: self.networks[node] for node in nodes},
            matrices=[m[:, cols] for m in self.matrices],
        )

    def equals(self, other: "SubjectDataset") -> bool:
        return (
            self.subject_ids == other.subject_ids
            and self.nodes == other.nodes
            and self.networks == other.networks
            and all(np.array_equal(a, b) for a, b in zip(self.matrices, other.matrices))
        )


def _subject_id(path: Path) -> str:
    return path.stem[len(SUBJECT_PREFIX):]


def load_dataset(directory: Union[str, Path]) -> SubjectDataset:
    directory = Path(directory)
    labels_path = directory / LABELS_FILE
    if not labels_path.is_file():
        raise MissingLabels(f"{labels_path} not found")
    labels = pd.read_csv(labels_path, dtype=str)
    if list(labels.columns[:2]) != ["node", "network"]:
        raise MissingLabels(f"{labels_path} must have columns node,network")
    nodes = labels["node"].tolist()
    networks = dict(zip(labels["node"], labels["network"]))

    subject_files = sorted(directory.glob(f"{SUBJECT_PREFIX}*.csv"), key=_subject_id)
    if not subject_files:
        raise DataError(f"no {SUBJECT_PREFIX}<id>.csv files in {directory}")

    subject_ids, matrices = [], []
    for path in subject_files:
        frame = pd.read_csv(path)
        if set(frame.columns) != set(nodes) or len(frame.columns) != len(nodes):
            raise NodeMismatch(f"{path}: columns {list(frame.columns)} do not match {LABELS_FILE}")
        frame = frame[nodes]
        try:
            values = frame.apply(pd.to_numeric).to_numpy(dtype=float)
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}: non-numeric cell ({exc})") from exc
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            row, col = bad[0]
            raise NonFiniteData(
                f"{path}: non-finite value at row {row + 1}, column {nodes[col]}",
                path=str(path),
                row=int(row) + 1,
                column=nodes[col],
            )
        subject_ids.append(_subject_id(path))
        matrices.append(values)

    LOGGER.info(
        "Loaded dataset",
        extra={"stage": "load", "subjects": len(subject_ids), "nodes": len(nodes)},
    )
    return SubjectDataset(subject_ids=subject_ids, nodes=nodes, networks=networks, matrices=matrices)


def write_dataset(dataset: SubjectDataset, directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [directory / LABELS_FILE]
    pd.DataFrame(
        {"node": dataset.nodes, "network": [dataset.networks[n] for n in dataset.nodes]}
    ).to_csv(written[0], index=False)
    for subject_id, matrix in zip(dataset.subject_ids, dataset.matrices):
        path = directory / f"{SUBJECT_PREFIX}{subject_id}.csv"
        pd.DataFrame(matrix, columns=dataset.nodes).to_csv(path, index=False, float_format="%.17g")
        written.append(path)
    return written
