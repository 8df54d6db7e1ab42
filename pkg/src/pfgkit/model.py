"""Core domain model: life-cycle phases, product categories, process nodes,
and the phase-labeled process flow DAG with canonical text and JSON forms."""

from __future__ import annotations

import hashlib
import heapq
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping


class GraphCycleError(Exception):
    """An operation that requires an acyclic graph found a cycle."""


class DocumentFormatError(Exception):
    """A canonical process listing could not be parsed."""


class UntaggedPhaseError(DocumentFormatError):
    """A process line appeared before any phase header."""


class LifeCyclePhase(Enum):
    """The three life-cycle phases, totally ordered upstream < core < downstream."""

    UPSTREAM = "upstream"
    CORE = "core"
    DOWNSTREAM = "downstream"

    @property
    def rank(self) -> int:
        return _PHASE_RANKS[self]

    def __lt__(self, other: object):
        if not isinstance(other, LifeCyclePhase):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other: object):
        if not isinstance(other, LifeCyclePhase):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other: object):
        if not isinstance(other, LifeCyclePhase):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other: object):
        if not isinstance(other, LifeCyclePhase):
            return NotImplemented
        return self.rank >= other.rank

    @classmethod
    def parse(cls, text: str) -> "LifeCyclePhase":
        try:
            return cls(str(text).strip().lower())
        except ValueError:
            raise ValueError(f"not a life cycle phase: {text!r}") from None


PHASES: tuple[LifeCyclePhase, ...] = (
    LifeCyclePhase.UPSTREAM,
    LifeCyclePhase.CORE,
    LifeCyclePhase.DOWNSTREAM,
)
_PHASE_RANKS = {phase: i for i, phase in enumerate(PHASES)}

_CPC_RE = re.compile(r"^\d{2,5}$")


@dataclass(frozen=True)
class ProductCategory:
    """A product category identified by name and UN CPC codes."""

    name: str
    description: str = ""
    cpc_codes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name.strip():
            raise ValueError("category name must be nonempty")
        codes = tuple(str(c) for c in self.cpc_codes)
        for code in codes:
            if not _CPC_RE.match(code):
                raise ValueError(f"CPC code must be 2-5 decimal digits, got {code!r}")
        object.__setattr__(self, "cpc_codes", codes)

    @property
    def specificity(self) -> int:
        """Length of the shortest CPC code; 0 when no codes are attached."""
        return min((len(c) for c in self.cpc_codes), default=0)


def node_id(name: str, phase: LifeCyclePhase) -> str:
    """Content-derived node id, stable across regenerations of the same node."""
    digest = hashlib.sha256(f"{phase.value}\x1f{name}".encode("utf-8")).hexdigest()
    return digest[:16]


@dataclass(frozen=True)
class ProcessNode:
    """One life-cycle process. Immutable after construction."""

    id: str
    name: str
    phase: LifeCyclePhase
    description: str = ""
    is_subprocess: bool = False
    optional: bool = False
    rationale: str = ""

    def __post_init__(self):
        if not self.id:
            raise ValueError("node id must be nonempty")
        if not self.name.strip():
            raise ValueError("node name must be nonempty")
        # Canonical documents are line-based; embedded newlines would corrupt them.
        if "\n" in self.name or "\n" in self.description:
            raise ValueError("node name/description must not contain newlines")


def make_node(
    name: str,
    phase: LifeCyclePhase,
    description: str = "",
    *,
    is_subprocess: bool = False,
    optional: bool = False,
    rationale: str = "",
) -> ProcessNode:
    """Build a node with its content-derived id."""
    name = name.strip()
    return ProcessNode(
        id=node_id(name, phase),
        name=name,
        phase=phase,
        description=description,
        is_subprocess=is_subprocess,
        optional=optional,
        rationale=rationale,
    )


@dataclass(frozen=True)
class Violation:
    """One violated graph invariant, with the offending node/edge ids."""

    rule: str
    detail: str
    subjects: tuple[str, ...] = ()


def _as_edge_set(edges: Iterable) -> frozenset[tuple[str, str]]:
    out = set()
    for edge in edges:
        a, b = edge
        out.add((str(a), str(b)))
    return frozenset(out)


@dataclass(frozen=True)
class ProcessFlowGraph:
    """Phase-labeled process DAG: main (ordering) edges plus subprocess edges.

    Immutable after construction; safe to share between threads.
    """

    category: ProductCategory
    nodes: tuple[ProcessNode, ...] = ()
    main_edges: frozenset = frozenset()
    sub_edges: frozenset = frozenset()
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        nodes = tuple(sorted(self.nodes, key=lambda n: (n.phase.rank, n.name, n.id)))
        seen_ids: set[str] = set()
        seen_names: set[tuple[int, str]] = set()
        for node in nodes:
            if node.id in seen_ids:
                raise ValueError(f"duplicate node id {node.id!r}")
            key = (node.phase.rank, node.name)
            if key in seen_names:
                raise ValueError(
                    f"duplicate node name {node.name!r} within phase {node.phase.value}"
                )
            seen_ids.add(node.id)
            seen_names.add(key)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "main_edges", _as_edge_set(self.main_edges))
        object.__setattr__(self, "sub_edges", _as_edge_set(self.sub_edges))

    def node_map(self) -> dict[str, ProcessNode]:
        return {n.id: n for n in self.nodes}


def _cycle_nodes(edges: set[tuple[str, str]]) -> list[str]:
    """Ids of nodes that lie on at least one directed cycle."""
    adjacency: dict[str, set[str]] = {}
    for a, b in edges:
        adjacency.setdefault(a, set()).add(b)
    on_cycle = []
    for start in sorted(adjacency):
        stack = list(adjacency.get(start, ()))
        seen = set()
        while stack:
            cur = stack.pop()
            if cur == start:
                on_cycle.append(start)
                break
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(adjacency.get(cur, ()))
    return on_cycle


def validate_graph(graph: ProcessFlowGraph) -> list[Violation]:
    """Check every structural invariant; returns an empty list when the graph is valid.

    Violations are data, not errors: every broken rule is reported together
    with the offending node/edge ids.
    """
    violations: list[Violation] = []
    known = graph.node_map()

    for label, edges in (("main", graph.main_edges), ("sub", graph.sub_edges)):
        for a, b in sorted(edges):
            missing = tuple(x for x in (a, b) if x not in known)
            if missing:
                violations.append(
                    Violation(
                        "unknown-endpoint",
                        f"{label} edge ({a}, {b}) references unknown node id(s)",
                        missing,
                    )
                )
            if a == b:
                violations.append(
                    Violation("self-loop", f"{label} edge ({a}, {b}) is a self-loop", (a,))
                )

    for a, b in sorted(graph.main_edges & graph.sub_edges):
        violations.append(
            Violation(
                "edge-overlap",
                f"edge ({a}, {b}) appears in both main_edges and sub_edges",
                (a, b),
            )
        )

    for a, b in sorted(graph.main_edges):
        if a in known and b in known and known[a].phase.rank > known[b].phase.rank:
            violations.append(
                Violation(
                    "phase-monotonicity",
                    f"main edge ({a}, {b}) goes from {known[a].phase.value} "
                    f"back to {known[b].phase.value}",
                    (a, b),
                )
            )

    for a, b in sorted(graph.sub_edges):
        if a in known and b in known:
            if known[a].phase != known[b].phase:
                violations.append(
                    Violation(
                        "subprocess-locality",
                        f"sub edge ({a}, {b}) crosses phases "
                        f"{known[a].phase.value} -> {known[b].phase.value}",
                        (a, b),
                    )
                )
            if not known[a].is_subprocess:
                violations.append(
                    Violation(
                        "subprocess-locality",
                        f"sub edge ({a}, {b}) starts at a node not flagged is_subprocess",
                        (a, b),
                    )
                )

    usable = {
        (a, b)
        for a, b in graph.main_edges | graph.sub_edges
        if a in known and b in known and a != b
    }
    cyclic = _cycle_nodes(usable)
    if cyclic:
        violations.append(
            Violation(
                "cycle",
                "graph restricted to main_edges and sub_edges contains a cycle",
                tuple(sorted(cyclic)),
            )
        )
    return violations


def topological_order(graph: ProcessFlowGraph) -> list[str]:
    """Deterministic topological order over main and sub edges.

    Ties are broken by (phase, node name, node id), so identical graphs always
    produce identical orderings.
    """
    known = graph.node_map()
    indegree = {nid: 0 for nid in known}
    adjacency: dict[str, list[str]] = {nid: [] for nid in known}
    for a, b in graph.main_edges | graph.sub_edges:
        if a in known and b in known and a != b:
            adjacency[a].append(b)
            indegree[b] += 1

    def key(nid: str) -> tuple:
        node = known[nid]
        return (node.phase.rank, node.name, node.id)

    ready = [key(nid) + (nid,) for nid, deg in indegree.items() if deg == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        nid = heapq.heappop(ready)[-1]
        order.append(nid)
        for succ in sorted(set(adjacency[nid])):
            indegree[succ] -= 1
            if indegree[succ] == 0:
                heapq.heappush(ready, key(succ) + (succ,))
    if len(order) != len(known):
        raise GraphCycleError("cycle detected: no topological order exists")
    return order


def serialize_graph(graph: ProcessFlowGraph) -> str:
    """Render the canonical text document: one section per phase, in phase
    order, nodes in topological order, one "- name: description" line each."""
    order = topological_order(graph)
    known = graph.node_map()
    by_phase: dict[LifeCyclePhase, list[ProcessNode]] = {p: [] for p in PHASES}
    for nid in order:
        node = known[nid]
        by_phase[node.phase].append(node)

    blocks = []
    for phase in PHASES:
        lines = [f"{phase.value.capitalize()}:"]
        for node in by_phase[phase]:
            line = f"- {node.name}: {node.description}"
            if node.optional:
                line += " (optional)"
            lines.append(line)
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


_HEADER_PHASES = {f"{p.value.capitalize()}:": p for p in PHASES}
_OPTIONAL_SUFFIX = " (optional)"


def parse_document(
    text: str,
    category: ProductCategory | None = None,
    provenance: Mapping | None = None,
) -> ProcessFlowGraph:
    """Parse a canonical process listing back into a graph.

    Listed order within each phase is preserved as a chain of main edges, so
    serialize_graph(parse_document(doc)) reproduces doc byte for byte.
    """
    category = category or ProductCategory(name="unspecified")
    phase: LifeCyclePhase | None = None
    nodes: list[ProcessNode] = []
    main_edges: list[tuple[str, str]] = []
    previous_in_phase: str | None = None

    for raw_line in text.splitlines():
        stripped = raw_line.strip()
        if not stripped:
            continue
        if stripped in _HEADER_PHASES:
            phase = _HEADER_PHASES[stripped]
            previous_in_phase = None
            continue
        if not raw_line.startswith("- "):
            raise DocumentFormatError(f"unrecognized line: {raw_line!r}")
        if phase is None:
            raise UntaggedPhaseError(f"process line before any phase header: {raw_line!r}")
        body = raw_line[2:]
        optional = body.endswith(_OPTIONAL_SUFFIX)
        if optional:
            body = body[: -len(_OPTIONAL_SUFFIX)]
        name, sep, description = body.partition(": ")
        if not sep:
            if body.endswith(":"):
                name, description = body[:-1], ""
            else:
                raise DocumentFormatError(f"process line missing ': ' separator: {raw_line!r}")
        try:
            node = make_node(name, phase, description, optional=optional)
        except ValueError as exc:
            raise DocumentFormatError(str(exc)) from exc
        nodes.append(node)
        if previous_in_phase is not None:
            main_edges.append((previous_in_phase, node.id))
        previous_in_phase = node.id

    try:
        return ProcessFlowGraph(
            category=category,
            nodes=tuple(nodes),
            main_edges=frozenset(main_edges),
            provenance=dict(provenance or {}),
        )
    except ValueError as exc:
        raise DocumentFormatError(str(exc)) from exc


def graph_to_json_dict(graph: ProcessFlowGraph) -> dict:
    """JSON-ready dict in the interchange layout; nodes in topological order,
    edges sorted lexicographically."""
    order = topological_order(graph)
    known = graph.node_map()
    return {
        "category": {
            "name": graph.category.name,
            "description": graph.category.description,
            "cpc_codes": list(graph.category.cpc_codes),
        },
        "nodes": [
            {
                "id": known[nid].id,
                "name": known[nid].name,
                "description": known[nid].description,
                "phase": known[nid].phase.value,
                "is_subprocess": known[nid].is_subprocess,
                "optional": known[nid].optional,
                "rationale": known[nid].rationale,
            }
            for nid in order
        ],
        "main_edges": [list(e) for e in sorted(graph.main_edges)],
        "sub_edges": [list(e) for e in sorted(graph.sub_edges)],
        "provenance": dict(graph.provenance),
    }


def graph_from_json_dict(data: Mapping) -> ProcessFlowGraph:
    try:
        cat = data["category"]
        category = ProductCategory(
            name=cat["name"],
            description=cat.get("description", ""),
            cpc_codes=tuple(cat.get("cpc_codes", ())),
        )
        nodes = tuple(
            ProcessNode(
                id=n["id"],
                name=n["name"],
                phase=LifeCyclePhase.parse(n["phase"]),
                description=n.get("description", ""),
                is_subprocess=bool(n.get("is_subprocess", False)),
                optional=bool(n.get("optional", False)),
                rationale=n.get("rationale", ""),
            )
            for n in data["nodes"]
        )
        return ProcessFlowGraph(
            category=category,
            nodes=nodes,
            main_edges=_as_edge_set(data.get("main_edges", ())),
            sub_edges=_as_edge_set(data.get("sub_edges", ())),
            provenance=dict(data.get("provenance", {})),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"invalid PFG JSON: {exc}") from exc


def dumps_graph_json(graph: ProcessFlowGraph) -> str:
    return json.dumps(graph_to_json_dict(graph), indent=2) + "\n"


def save_graph_json(graph: ProcessFlowGraph, path: str | Path) -> None:
    Path(path).write_text(dumps_graph_json(graph), encoding="utf-8")


def load_graph_json(path: str | Path) -> ProcessFlowGraph:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid PFG JSON in {path}: {exc}") from exc
    return graph_from_json_dict(data)
