"""Ground-truth structural causal models for multi-subject datasets.

Generates subject-wise data by ancestral sampling with per-subject jitter of
the mechanism coefficients and noise scales, builds the five-node fixture
with two planted external confounders, and answers d-separation queries.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple, Union

import networkx as nx
import numpy as np

from common.errors import ConfigError, CyclicSpec, UnknownNode
from services.dataset_service import SubjectDataset

LOGGER = logging.getLogger(__name__)

Edge = Tuple[str, str]

STUDY_NETWORK = "study"
EXTERNAL_NETWORK = "external"
_MLP_HIDDEN = 4


class Role(str, Enum):
    IN_NETWORK = "in-network"
    EXTERNAL = "external"


class Mechanism(str, Enum):
    LINEAR_GAUSSIAN = "linear-gaussian"
    MLP_NONLINEAR = "mlp-nonlinear"


@dataclass(frozen=True)
class NodeSpec:
    name: str
    role: Role
    network: str


@dataclass
class ScmSpec:
    nodes: List[NodeSpec]
    edges: List[Edge]
    mechanism: Mechanism = Mechanism.LINEAR_GAUSSIAN
    heterogeneity: Tuple[float, float] = (0.7, 1.3)
    noise_scale: float = 1.0
    noise_heterogeneity: Tuple[float, float] = (0.5, 2.0)
    coefficient_range: Tuple[float, float] = (0.5, 1.5)
    weights: Dict[Edge, float] = field(default_factory=dict)
    aliases: Dict[str, str] = field(default_factory=dict)

    @property
    def node_names(self) -> List[str]:
        return [node.name for node in self.nodes]

    def names_with_role(self, role: Role) -> List[str]:
        return [node.name for node in self.nodes if node.role == Role(role)]

    def graph(self) -> nx.DiGraph:
        names = self.node_names
        if len(set(names)) != len(names):
            raise CyclicSpec("duplicate node names")
        graph = nx.DiGraph()
        graph.add_nodes_from(names)
        for parent, child in self.edges:
            for node in (parent, child):
                if node not in graph:
                    raise UnknownNode(f"edge {parent}->{child} references unknown node '{node}'")
            graph.add_edge(parent, child)
        if not nx.is_directed_acyclic_graph(graph):
            raise CyclicSpec(f"edge list contains a cycle: {nx.find_cycle(graph)}")
        return graph

    def true_skeleton(self, nodes: Optional[Iterable[str]] = None) -> Set[FrozenSet[str]]:
        keep = set(self.node_names if nodes is None else nodes)
        return {
            frozenset(edge) for edge in self.edges if edge[0] in keep and edge[1] in keep
        }

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"name": n.name, "role": n.role.value, "network": n.network} for n in self.nodes
            ],
            "edges": [list(edge) for edge in self.edges],
            "mechanism": self.mechanism.value,
            "heterogeneity": list(self.heterogeneity),
            "noise_scale": self.noise_scale,
            "noise_heterogeneity": list(self.noise_heterogeneity),
            "coefficient_range": list(self.coefficient_range),
            "weights": [[p, c, w] for (p, c), w in sorted(self.weights.items())],
            "aliases": dict(sorted(self.aliases.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScmSpec":
        return cls(
            nodes=[NodeSpec(n["name"], Role(n["role"]), n["network"]) for n in data["nodes"]],
            edges=[tuple(edge) for edge in data["edges"]],
            mechanism=Mechanism(data.get("mechanism", Mechanism.LINEAR_GAUSSIAN)),
            heterogeneity=tuple(data.get("heterogeneity", (0.7, 1.3))),
            noise_scale=float(data.get("noise_scale", 1.0)),
            noise_heterogeneity=tuple(data.get("noise_heterogeneity", (0.5, 2.0))),
            coefficient_range=tuple(data.get("coefficient_range", (0.5, 1.5))),
            weights={(p, c): float(w) for p, c, w in data.get("weights", [])},
            aliases=dict(data.get("aliases", {})),
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _base_coefficients(spec: ScmSpec, rng: np.random.Generator) -> Dict[Edge, float]:
    low, high = spec.coefficient_range
    coefficients = {}
    for edge in sorted(spec.edges):
        magnitude = rng.uniform(low, high)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        coefficients[edge] = spec.weights.get(edge, sign * magnitude)
    return coefficients


def _edge_mlps(spec: ScmSpec, rng: np.random.Generator) -> Dict[Edge, Tuple[np.ndarray, ...]]:
    """Monotone one-hidden-layer tanh maps with unit slope at the origin"""
    mlps = {}
    for edge in sorted(spec.edges):
        slopes = np.abs(rng.normal(size=_MLP_HIDDEN)) + 0.5
        offsets = rng.normal(scale=0.5, size=_MLP_HIDDEN)
        out = np.abs(rng.normal(size=_MLP_HIDDEN)) + 0.5
        out = out / np.sum(out * slopes / np.cosh(offsets) ** 2)
        mlps[edge] = (slopes, offsets, out)
    return mlps


def generate_random_scm(spec: ScmSpec, seed: int, n_subjects: int = 1,
                        n_samples: int = 500) -> SubjectDataset:
    """Ancestral sampling in topological order, one jittered mechanism per subject"""
    graph = spec.graph()
    order = list(nx.lexicographical_topological_sort(graph))
    names = spec.node_names
    column = {name: i for i, name in enumerate(names)}
    rng = np.random.default_rng(seed)
    coefficients = _base_coefficients(spec, rng)
    mlps = _edge_mlps(spec, rng) if spec.mechanism == Mechanism.MLP_NONLINEAR else {}
    width = max(3, len(str(n_subjects)))

    matrices = []
    for subject in range(n_subjects):
        subject_rng = np.random.default_rng([seed, subject])
        jitter = {edge: subject_rng.uniform(*spec.heterogeneity) for edge in sorted(spec.edges)}
        noise_mult = {name: subject_rng.uniform(*spec.noise_heterogeneity) for name in names}
        data = np.zeros((n_samples, len(names)))
        for node in order:
            value = spec.noise_scale * noise_mult[node] * subject_rng.standard_normal(n_samples)
            for parent in sorted(graph.predecessors(node)):
                edge = (parent, node)
                weight = coefficients[edge] * jitter[edge]
                source = data[:, column[parent]]
                if spec.mechanism == Mechanism.MLP_NONLINEAR:
                    slopes, offsets, out = mlps[edge]
                    scaled = source / (source.std() or 1.0)
                    source = np.tanh(np.outer(scaled, slopes) + offsets) @ out
                value = value + weight * source
            data[:, column[node]] = value
        matrices.append(data)

    return SubjectDataset(
        subject_ids=[str(i + 1).zfill(width) for i in range(n_subjects)],
        nodes=names,
        networks={node.name: node.network for node in spec.nodes},
        matrices=matrices,
    )


def five_node_spec(mechanism: Union[str, Mechanism] = Mechanism.LINEAR_GAUSSIAN) -> ScmSpec:
    """The five-node study network with two planted external confounders.

    In-network z1..z5, external s1..s5 with s2 = c1 and s4 = c2:

        c1 -> z1, c1 -> z2        (z1, z2 linked only through c1)
        c2 -> z4, c2 -> z5        (z4, z5 linked only through c2)
        z1 -> z3, z2 -> z3, z3 -> z4
        z1 -> s1 -> z3            (s1: partial mediator beside z1 -> z3)
        z2 -> s3 <- z5            (s3: collider child)
        s5                        (isolated)

    Without c1 and c2 a skeleton search keeps the spurious links z1-z2 and
    z4-z5; with them both links are explained away.
    """
    nodes = [NodeSpec(f"z{i}", Role.IN_NETWORK, STUDY_NETWORK) for i in range(1, 6)]
    nodes += [NodeSpec(f"s{i}", Role.EXTERNAL, EXTERNAL_NETWORK) for i in range(1, 6)]
    weights = {
        ("s2", "z1"): 1.0,
        ("s2", "z2"): 1.0,
        ("s4", "z4"): 1.0,
        ("s4", "z5"): 1.0,
        ("z1", "z3"): 0.8,
        ("z2", "z3"): 0.8,
        ("z3", "z4"): 0.7,
        ("z1", "s1"): 0.9,
        ("s1", "z3"): 0.6,
        ("z2", "s3"): 0.9,
        ("z5", "s3"): 0.9,
    }
    return ScmSpec(
        nodes=nodes,
        edges=list(weights),
        mechanism=Mechanism(mechanism),
        weights=weights,
        aliases={"c1": "s2", "c2": "s4"},
    )


def generate_five_node_scm(n_subjects: int = 40, n_samples: int = 500,
                           mechanism: Union[str, Mechanism] = Mechanism.LINEAR_GAUSSIAN,
                           seed: int = 0) -> Tuple[SubjectDataset, ScmSpec]:
    if n_subjects < 1:
        raise ConfigError(f"n_subjects must be at least 1, got {n_subjects}")
    if n_samples < 8:
        raise ConfigError(f"n_samples must be at least 8, got {n_samples}")
    spec = five_node_spec(mechanism)
    dataset = generate_random_scm(spec, seed=seed, n_subjects=n_subjects, n_samples=n_samples)
    LOGGER.debug(
        "Generated fixture",
        extra={"stage": "synth", "subjects": n_subjects, "samples": n_samples, "seed": seed},
    )
    return dataset, spec


def d_separated(spec: ScmSpec, a: str, b: str, cond: Iterable[str] = ()) -> bool:
    """Reachability over active trails (Bayes-ball)"""
    graph = spec.graph()
    cond = set(cond)
    for node in {a, b} | cond:
        if node not in graph:
            raise UnknownNode(f"unknown node '{node}'")
    if a in cond or b in cond:
        return True

    # colliders are active when they or a descendant are observed
    observed_ancestors = set(cond)
    for node in cond:
        observed_ancestors |= nx.ancestors(graph, node)

    # direction "up": arrived from a child; "down": arrived from a parent
    frontier = [(a, "up")]
    visited = set()
    reachable = set()
    while frontier:
        node, direction = frontier.pop()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node not in cond:
            reachable.add(node)
        if direction == "up" and node not in cond:
            frontier.extend((parent, "up") for parent in graph.predecessors(node))
            frontier.extend((child, "down") for child in graph.successors(node))
        elif direction == "down":
            if node not in cond:
                frontier.extend((child, "down") for child in graph.successors(node))
            if node in observed_ancestors:
                frontier.extend((parent, "up") for parent in graph.predecessors(node))
    return b not in reachable
