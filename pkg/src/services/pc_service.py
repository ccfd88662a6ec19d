"""PC skeleton search with conditioning sets of size at most two.

Starts from the complete undirected graph and removes, level by level, the
edges whose endpoints test independent unconditionally, given one adjacent
node, and given two adjacent nodes. Removals of a level are collected first
and applied together, so the result does not depend on node order.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Set, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from common.errors import ConfigError, DataError
from common.seeding import derive_seed
from services.kernel_tests import NullConfig, cond_independence_test, uncond_independence_test

LOGGER = logging.getLogger(__name__)

NodePair = FrozenSet[str]

MAX_LEVEL = 2


@dataclass
class Skeleton:
    nodes: List[str]
    edges: Set[NodePair] = field(default_factory=set)
    separating_sets: Dict[NodePair, FrozenSet[str]] = field(default_factory=dict)

    def sorted_edges(self) -> List[Tuple[str, str]]:
        return sorted(tuple(sorted(edge)) for edge in self.edges)

    def restricted_to(self, nodes) -> Set[NodePair]:
        keep = set(nodes)
        return {edge for edge in self.edges if edge <= keep}

    def to_edge_list(self) -> str:
        return "".join(f"{a}\t{b}\n" for a, b in self.sorted_edges())

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_edge_list())

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "edges": [list(edge) for edge in self.sorted_edges()],
            "separating_sets": [
                {"pair": sorted(pair), "cond": sorted(cond)}
                for pair, cond in sorted(
                    self.separating_sets.items(), key=lambda item: sorted(item[0])
                )
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Skeleton":
        return cls(
            nodes=list(data["nodes"]),
            edges={frozenset(edge) for edge in data["edges"]},
            separating_sets={
                frozenset(item["pair"]): frozenset(item["cond"])
                for item in data["separating_sets"]
            },
        )


def read_edge_list(text: str) -> Set[NodePair]:
    return {frozenset(line.split("\t")) for line in text.splitlines() if line.strip()}


def _test_edge(data: Mapping[str, np.ndarray], a: str, b: str, candidates: List[str], level: int,
               alpha: float, cfg: NullConfig) -> Optional[Tuple[FrozenSet[str], float]]:
    """Best separating set of size ``level`` among ``candidates``, if any"""
    best = None
    with threadpool_limits(limits=1):
        for cond in combinations(candidates, level):
            seed = derive_seed(cfg.seed, "pc", level, a, b, *cond)
            sub_cfg = cfg.with_seed(seed)
            if level == 0:
                result = uncond_independence_test(data[a], data[b], sub_cfg)
            else:
                z = np.column_stack([data[c] for c in cond]) if level > 1 else data[cond[0]]
                result = cond_independence_test(data[a], data[b], z, sub_cfg)
            if result.pvalue > alpha and (best is None or result.pvalue > best[1]):
                best = (frozenset(cond), result.pvalue)
    return best


def pc_skeleton(data: Mapping[str, np.ndarray], alpha: float = 0.05,
                cfg: NullConfig = NullConfig(), n_jobs: int = 1) -> Skeleton:
    nodes = list(data)
    if len(nodes) < 2:
        raise ConfigError("pc_skeleton needs at least two nodes")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    lengths = {len(np.asarray(values)) for values in data.values()}
    if len(lengths) != 1:
        raise DataError(f"all series must have equal length, got {sorted(lengths)}")
    data = {node: np.asarray(values, dtype=float) for node, values in data.items()}

    skeleton = Skeleton(nodes=nodes, edges={frozenset(p) for p in combinations(nodes, 2)})
    for level in range(MAX_LEVEL + 1):
        work = []
        for edge in sorted(skeleton.edges, key=sorted):
            a, b = sorted(edge, key=nodes.index)
            neighbours = sorted(
                {n for e in skeleton.edges if a in e or b in e for n in e} - {a, b},
                key=nodes.index,
            )
            if len(neighbours) >= level:
                work.append((a, b, neighbours))
        if not work:
            break
        outcomes = Parallel(n_jobs=n_jobs)(
            delayed(_test_edge)(data, a, b, neighbours, level, alpha, cfg)
            for a, b, neighbours in work
        )
        removed = 0
        for (a, b, _), outcome in zip(work, outcomes):
            if outcome is not None:
                pair = frozenset((a, b))
                skeleton.edges.discard(pair)
                skeleton.separating_sets[pair] = outcome[0]
                removed += 1
        LOGGER.debug(
            "PC level done",
            extra={"stage": "skeleton", "level": level, "tested": len(work), "removed": removed},
        )
    return skeleton
