"""The staged generation workflow: sample products, per-product process
lists, embedding-based coarsening, and ordered graph assembly."""

from __future__ import annotations

import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from .clustering import ClusteringConfig, ClusteringError, default_k_candidates, select_k
from .gateway import ChatRequest, Gateway, GatewayError
from .model import (
    PHASES,
    LifeCyclePhase,
    ProcessFlowGraph,
    ProcessNode,
    ProductCategory,
    node_id,
    validate_graph,
)

SYSTEM_PROMPT = (
    "You are a careful assistant for industrial life cycle analysis. "
    "Follow the output format instructions exactly."
)

# Only the sample-product step needs diversity; everything downstream is
# deterministic extraction/ordering work.
PRODUCTS_TEMPERATURE = 0.7
DEFAULT_TEMPERATURE = 0.0

_MAX_TOKENS = {
    "sample_products": 2000,
    "product_components": 1500,
    "product_processes": 3000,
    "cluster_summary": 400,
    "dedup": 800,
    "ordering": 1200,
}

REPLAY_TIMESTAMP = "1970-01-01T00:00:00Z"


class PipelineError(Exception):
    """A stage failed; carries the stage label."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class MalformedOutputError(Exception):
    """An LLM response did not satisfy the requested schema."""


class AssemblyError(Exception):
    """Internal: the assembler produced an invalid graph (should not happen)."""


@dataclass(frozen=True)
class SampleProduct:
    name: str
    description: str = ""
    materials: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name.strip():
            raise ValueError("product name must be nonempty")
        object.__setattr__(self, "materials", tuple(str(m) for m in self.materials))


@dataclass(frozen=True)
class RawProcess:
    product: str
    name: str
    phase: LifeCyclePhase
    rationale: str

    def __post_init__(self):
        if not self.name.strip() or not self.rationale.strip():
            raise ValueError("raw process name and rationale must be nonempty")


@dataclass(frozen=True)
class CoarseProcess:
    name: str
    description: str
    phase: LifeCyclePhase
    members: tuple[RawProcess, ...]
    is_subprocess: bool = False

    def __post_init__(self):
        if not self.members:
            raise ValueError("coarse process must have at least one member")
        if any(m.phase != self.phase for m in self.members):
            raise ValueError("coarse process members must all share its phase")


@dataclass(frozen=True)
class PipelineConfig:
    n_products: int = 15
    model_id: str = "mock-model"
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    prompt_overrides: Mapping[str, str] = field(default_factory=dict)
    parallelism: int = 1

    def __post_init__(self):
        if self.n_products <= 0:
            raise ValueError("n_products must be positive")
        if self.parallelism <= 0:
            raise ValueError("parallelism must be positive")

    def config_hash(self) -> str:
        payload = json.dumps(
            {
                "n_products": self.n_products,
                "model_id": self.model_id,
                "clustering": {
                    "k_candidates": self.clustering.k_candidates,
                    "rng_seed": self.clustering.rng_seed,
                    "max_iterations": self.clustering.max_iterations,
                    "convergence_tolerance": self.clustering.convergence_tolerance,
                },
                "prompt_overrides": sorted(self.prompt_overrides),
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class StageReport:
    name: str
    n_calls: int
    duration_ms: int


@dataclass(frozen=True)
class RunReport:
    stages: tuple[StageReport, ...]
    total_cost_usd: float
    duration_ms: int
    model_id: str
    timestamp: str

    def to_json_dict(self) -> dict:
        return {
            "stages": [
                {"name": s.name, "n_calls": s.n_calls, "duration_ms": s.duration_ms}
                for s in self.stages
            ],
            "total_cost_usd": self.total_cost_usd,
            "duration_ms": self.duration_ms,
            "model_id": self.model_id,
            "timestamp": self.timestamp,
        }


# -- prompt plumbing --------------------------------------------------------

_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")


def load_prompt(name: str, overrides: Mapping[str, str] | None = None) -> str:
    if overrides and name in overrides:
        return overrides[name]
    return resources.files("pfgkit").joinpath("prompts", f"{name}.txt").read_text("utf-8")


def render_template(template: str, values: Mapping[str, str]) -> str:
    rendered = template
    for key, value in values.items():
        rendered = rendered.replace("{{" + key + "}}", str(value))
    leftover = _PLACEHOLDER_RE.search(rendered)
    if leftover:
        raise ValueError(f"unresolved template placeholder {leftover.group(0)}")
    return rendered


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\n(.*?)```", re.DOTALL)


def extract_json(text: str):
    """Parse a JSON object out of an LLM response, tolerating code fences and
    surrounding prose."""
    fenced = _FENCE_RE.search(text)
    if fenced:
        text = fenced.group(1)
    start, end = text.find("{"), text.rfind("}")
    if start == -1 or end <= start:
        raise MalformedOutputError("response contains no JSON object")
    try:
        return json.loads(text[start : end + 1])
    except json.JSONDecodeError as exc:
        raise MalformedOutputError(f"invalid JSON: {exc}") from exc


def _clean_text(text) -> str:
    return " ".join(str(text).split())


def _chat(gateway: Gateway, cfg: PipelineConfig, prompt_name: str, values: Mapping[str, str],
          *, temperature: float = DEFAULT_TEMPERATURE, expects_json: bool = True) -> str:
    prompt = render_template(load_prompt(prompt_name, cfg.prompt_overrides), values)
    req = ChatRequest(
        model_id=cfg.model_id,
        system_prompt=SYSTEM_PROMPT,
        user_prompt=prompt,
        temperature=temperature,
        max_tokens=_MAX_TOKENS[prompt_name],
        expects_json=expects_json,
    )
    return gateway.chat(req).response_text


# -- stage 1: sample products ------------------------------------------------


def _parse_products(text: str, expected: int) -> list[SampleProduct]:
    data = extract_json(text)
    items = data.get("products")
    if not isinstance(items, list):
        raise MalformedOutputError('missing "products" array')
    products = []
    for item in items:
        if not isinstance(item, dict) or not str(item.get("name", "")).strip():
            raise MalformedOutputError(f"product entry missing a name: {item!r}")
        products.append(
            SampleProduct(
                name=_clean_text(item["name"]),
                description=_clean_text(item.get("description", "")),
                materials=tuple(_clean_text(m) for m in item.get("materials", ())),
            )
        )
    names = [p.name for p in products]
    if len(set(names)) != len(names):
        raise MalformedOutputError("duplicate product names")
    if len(products) != expected:
        raise MalformedOutputError(f"expected {expected} products, got {len(products)}")
    return products


def generate_sample_products(gateway: Gateway, category: ProductCategory,
                             cfg: PipelineConfig) -> list[SampleProduct]:
    """Ask for a diverse list of exactly cfg.n_products real products; one
    repair round is allowed before giving up."""
    values = {
        "category_name": category.name,
        "category_description": category.description or "(none provided)",
        "cpc_codes": ", ".join(category.cpc_codes) or "unspecified",
        "n_products": str(cfg.n_products),
    }
    text = _chat(gateway, cfg, "sample_products", values, temperature=PRODUCTS_TEMPERATURE)
    try:
        return _parse_products(text, cfg.n_products)
    except MalformedOutputError as exc:
        repair = dict(values)
        template = load_prompt("sample_products", cfg.prompt_overrides)
        prompt = render_template(template, repair) + (
            f"\n\nYour previous response was invalid: {exc}. "
            "Return the corrected JSON object only."
        )
        req = ChatRequest(
            model_id=cfg.model_id,
            system_prompt=SYSTEM_PROMPT,
            user_prompt=prompt,
            temperature=PRODUCTS_TEMPERATURE,
            max_tokens=_MAX_TOKENS["sample_products"],
            expects_json=True,
        )
        return _parse_products(gateway.chat(req).response_text, cfg.n_products)


# -- stage 2: per-product process lists ---------------------------------------


def generate_process_list(gateway: Gateway, product: SampleProduct,
                          category: ProductCategory, cfg: PipelineConfig) -> list[RawProcess]:
    """Two chained calls per product: component elaboration, then phase-tagged
    process elicitation grounded in the component answer."""
    components = _chat(
        gateway,
        cfg,
        "product_components",
        {
            "product_name": product.name,
            "product_description": product.description or "(none provided)",
            "category_name": category.name,
            "materials": ", ".join(product.materials) or "unspecified",
        },
        expects_json=False,
    )
    text = _chat(
        gateway,
        cfg,
        "product_processes",
        {
            "product_name": product.name,
            "category_name": category.name,
            "components": components.strip(),
        },
    )
    data = extract_json(text)
    items = data.get("processes")
    if not isinstance(items, list) or not items:
        raise MalformedOutputError('missing or empty "processes" array')
    processes = []
    for item in items:
        if not isinstance(item, dict):
            raise MalformedOutputError(f"process entry is not an object: {item!r}")
        try:
            phase = LifeCyclePhase.parse(item.get("phase", ""))
        except ValueError as exc:
            raise MalformedOutputError(str(exc)) from exc
        name = _clean_text(item.get("name", ""))
        rationale = _clean_text(item.get("rationale", ""))
        if not name or not rationale:
            raise MalformedOutputError(f"process entry missing name or rationale: {item!r}")
        processes.append(RawProcess(product=product.name, name=name,
                                    phase=phase, rationale=rationale))
    return processes


# -- stage 3: coarsening -------------------------------------------------------

# Model selection needs at least 2 candidate clusters over at least 3 points;
# smaller phases pass through as singleton coarse processes.
MIN_CLUSTER_ITEMS = 3


def _summarize_cluster(gateway: Gateway, cfg: PipelineConfig, category: ProductCategory,
                       phase: LifeCyclePhase, members: Sequence[RawProcess]) -> CoarseProcess:
    text = _chat(
        gateway,
        cfg,
        "cluster_summary",
        {
            "category_name": category.name,
            "phase": phase.value,
            "members": "\n".join(f"- {m.name}: {m.rationale}" for m in members),
        },
    )
    data = extract_json(text)
    name = _clean_text(data.get("name", ""))
    if not name:
        raise MalformedOutputError("cluster summary missing a name")
    return CoarseProcess(
        name=name,
        description=_clean_text(data.get("description", "")),
        phase=phase,
        members=tuple(members),
    )


def _llm_dedup(gateway: Gateway, cfg: PipelineConfig, category: ProductCategory,
               coarse: list[CoarseProcess]) -> list[CoarseProcess]:
    text = _chat(
        gateway,
        cfg,
        "dedup",
        {
            "category_name": category.name,
            "processes": "\n".join(f"- {c.phase.value}: {c.name}" for c in coarse),
        },
    )
    data = extract_json(text)
    groups = data.get("duplicate_groups")
    if not isinstance(groups, list):
        raise MalformedOutputError('missing "duplicate_groups" array')
    dropped: set[int] = set()
    for group in groups:
        if not isinstance(group, list):
            continue
        wanted = {_clean_text(g).lower() for g in group if isinstance(g, str)}
        matched = [i for i, c in enumerate(coarse) if c.name.lower() in wanted]
        dropped.update(matched[1:])  # first by cluster order survives
    return [c for i, c in enumerate(coarse) if i not in dropped]


def coarsen(gateway: Gateway, raw: Sequence[RawProcess], category: ProductCategory,
            cfg: PipelineConfig) -> list[CoarseProcess]:
    """Per phase: embed "name: rationale", pick k by Davies-Bouldin, summarize
    each cluster with one LLM call, then run an LLM dedup pass."""
    if not raw:
        raise ValueError("coarsen requires at least one raw process")
    coarse: list[CoarseProcess] = []
    for phase in PHASES:
        items = [r for r in raw if r.phase == phase]
        if not items:
            continue
        if len(items) < MIN_CLUSTER_ITEMS:
            for item in items:
                coarse.append(CoarseProcess(name=item.name, description=item.rationale,
                                            phase=phase, members=(item,)))
            continue
        texts = [f"{r.name}: {r.rationale}" for r in items]
        vectors = gateway.embed(texts)
        distinct = len(set(texts))
        base = cfg.clustering.k_candidates or default_k_candidates(len(items))
        candidates = tuple(k for k in base if k <= distinct)
        if not candidates:
            # every item is textually identical; one cluster covers them all
            clusters = [list(items)]
        else:
            solution = select_k(
                np.array([v.values for v in vectors]),
                replace(cfg.clustering, k_candidates=candidates),
            )
            clusters = [
                [items[i] for i in solution.members(c)] for c in range(solution.k)
            ]
        for members in clusters:
            coarse.append(_summarize_cluster(gateway, cfg, category, phase, members))

    if len(coarse) > 1:
        coarse = _llm_dedup(gateway, cfg, category, coarse)
    # mechanical safety net: exact name repeats within a phase cannot coexist
    seen: set[tuple[int, str]] = set()
    unique = []
    for c in coarse:
        key = (c.phase.rank, c.name.lower())
        if key in seen:
            continue
        seen.add(key)
        unique.append(c)
    return unique


# -- stage 4: ordering and assembly -------------------------------------------


@dataclass(frozen=True)
class NodeSpec:
    """Assembler input: one prospective node."""

    name: str
    phase: LifeCyclePhase
    description: str = ""
    rationale: str = ""
    optional: bool = False


def _reaches(adjacency: Mapping[str, set], start: str, goal: str) -> bool:
    stack = [start]
    seen = set()
    while stack:
        current = stack.pop()
        if current == goal:
            return True
        if current in seen:
            continue
        seen.add(current)
        stack.extend(adjacency.get(current, ()))
    return False


def build_graph(category: ProductCategory, specs: Sequence[NodeSpec],
                candidates: Sequence[tuple[str, str, str]],
                provenance: Mapping) -> ProcessFlowGraph:
    """Construct a valid graph from untrusted node specs and candidate edges.

    Candidates are (source_id, target_id, kind) triples with kind "main" or
    "sub", in response order. Anything that would break an invariant (unknown
    endpoint, self-loop, duplicate, backward phase jump, cross-phase sub edge,
    cycle) is dropped, never raised. After edge acceptance, consecutive
    populated phases are bridged sink-to-source so the graph stays connected.
    """
    kept: dict[str, NodeSpec] = {}
    for spec in specs:
        name = _clean_text(spec.name)
        if not name:
            continue
        nid = node_id(name, spec.phase)
        if nid in kept:
            continue  # first spec for a (phase, name) wins
        kept[nid] = NodeSpec(
            name=name,
            phase=spec.phase,
            description=_clean_text(spec.description),
            rationale=_clean_text(spec.rationale),
            optional=spec.optional,
        )

    accepted: set[tuple[str, str]] = set()
    adjacency: dict[str, set] = {}
    main_edges: list[tuple[str, str]] = []
    sub_edges: list[tuple[str, str]] = []
    subprocess_ids: set[str] = set()

    def try_add(a: str, b: str, kind: str) -> None:
        if a not in kept or b not in kept or a == b or (a, b) in accepted:
            return
        if kind == "main" and kept[a].phase.rank > kept[b].phase.rank:
            return
        if kind == "sub" and kept[a].phase != kept[b].phase:
            return
        if _reaches(adjacency, b, a):
            return  # would close a cycle
        accepted.add((a, b))
        adjacency.setdefault(a, set()).add(b)
        if kind == "main":
            main_edges.append((a, b))
        else:
            sub_edges.append((a, b))
            subprocess_ids.add(a)

    for a, b, kind in candidates:
        if kind in ("main", "sub"):
            try_add(str(a), str(b), kind)

    # implicit cross-phase ordering: bridge sinks of one phase to sources of
    # the next populated phase (subprocess nodes hang off parents, not the
    # main flow, so they do not participate)
    flow_ids = [nid for nid in kept if nid not in subprocess_ids]
    out_degree = {nid: 0 for nid in flow_ids}
    in_degree = {nid: 0 for nid in flow_ids}
    for a, b in main_edges:
        if a in out_degree:
            out_degree[a] += 1
        if b in in_degree:
            in_degree[b] += 1
    populated = [
        phase for phase in PHASES if any(kept[nid].phase == phase for nid in flow_ids)
    ]
    for phase_a, phase_b in zip(populated, populated[1:]):
        sinks = sorted(
            (nid for nid in flow_ids if kept[nid].phase == phase_a and out_degree[nid] == 0),
            key=lambda nid: (kept[nid].name, nid),
        )
        sources = sorted(
            (nid for nid in flow_ids if kept[nid].phase == phase_b and in_degree[nid] == 0),
            key=lambda nid: (kept[nid].name, nid),
        )
        for a in sinks:
            for b in sources:
                if (a, b) not in accepted:
                    accepted.add((a, b))
                    main_edges.append((a, b))

    nodes = tuple(
        ProcessNode(
            id=nid,
            name=spec.name,
            phase=spec.phase,
            description=spec.description,
            is_subprocess=nid in subprocess_ids,
            optional=spec.optional,
            rationale=spec.rationale,
        )
        for nid, spec in kept.items()
    )
    graph = ProcessFlowGraph(
        category=category,
        nodes=nodes,
        main_edges=frozenset(main_edges),
        sub_edges=frozenset(sub_edges),
        provenance=dict(provenance),
    )
    violations = validate_graph(graph)
    if violations:
        raise AssemblyError(f"assembler produced an invalid graph: {violations[:3]}")
    return graph


def _parse_pairs(value) -> list[tuple[str, str]]:
    pairs = []
    if isinstance(value, list):
        for entry in value:
            if (
                isinstance(entry, (list, tuple))
                and len(entry) == 2
                and all(isinstance(x, str) for x in entry)
            ):
                pairs.append((_clean_text(entry[0]), _clean_text(entry[1])))
    return pairs


def order_and_assemble(gateway: Gateway, coarse: Sequence[CoarseProcess],
                       category: ProductCategory, cfg: PipelineConfig,
                       provenance: Mapping | None = None) -> ProcessFlowGraph:
    """One ordering call per populated phase, then repair-and-bridge assembly.

    The assembler never returns an invalid graph, whatever the model said.
    """
    if not coarse:
        raise ValueError("order_and_assemble requires at least one coarse process")
    specs = [
        NodeSpec(name=c.name, phase=c.phase, description=c.description,
                 rationale="; ".join(dict.fromkeys(m.rationale for m in c.members)))
        for c in coarse
    ]
    candidates: list[tuple[str, str, str]] = []
    for phase in PHASES:
        roster = [c for c in coarse if c.phase == phase]
        if len(roster) < 2:
            continue  # nothing to order within a single-process phase
        by_name = {_clean_text(c.name): node_id(_clean_text(c.name), phase) for c in roster}
        text = _chat(
            gateway,
            cfg,
            "ordering",
            {
                "category_name": category.name,
                "phase": phase.value,
                "processes": "\n".join(f"- {c.name}" for c in roster),
            },
        )
        data = extract_json(text)
        if not isinstance(data, dict):
            raise MalformedOutputError("ordering response is not a JSON object")
        for a, b in _parse_pairs(data.get("edges")):
            if a in by_name and b in by_name:
                candidates.append((by_name[a], by_name[b], "main"))
        for a, b in _parse_pairs(data.get("subprocess_links")):
            if a in by_name and b in by_name:
                candidates.append((by_name[a], by_name[b], "sub"))
    return build_graph(category, specs, candidates, provenance or {})


# -- full run -------------------------------------------------------------------


class _StageTracker:
    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self.stages: list[StageReport] = []

    def run(self, name: str, fn):
        before = len(self.gateway.transcripts)
        try:
            result = fn()
        except (GatewayError, MalformedOutputError, ClusteringError, ValueError) as exc:
            raise PipelineError(name, str(exc)) from exc
        new = self.gateway.transcripts[before:]
        self.stages.append(
            StageReport(
                name=name,
                n_calls=len(new),
                duration_ms=sum(t.latency_ms for t in new),
            )
        )
        return result


def _map_maybe_parallel(fn, items: Sequence, parallelism: int) -> list:
    if parallelism <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def run_timestamp(gateway: Gateway) -> str:
    """Wall clock in live/record mode; a fixed epoch in replay mode so replayed
    outputs are byte-identical."""
    if gateway.mode == "replay":
        return REPLAY_TIMESTAMP
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def run_pipeline(gateway: Gateway, category: ProductCategory,
                 cfg: PipelineConfig | None = None) -> tuple[ProcessFlowGraph, RunReport]:
    """Run all four stages and return the graph plus a run report with
    per-stage call counts, metered cost, and duration."""
    cfg = cfg or PipelineConfig()
    tracker = _StageTracker(gateway)
    cost_before = gateway.meter.total_usd if gateway.meter else 0.0
    timestamp = run_timestamp(gateway)
    provenance = {
        "generator": "pipeline",
        "model_id": cfg.model_id,
        "timestamp": timestamp,
        "config_hash": cfg.config_hash(),
    }

    products = tracker.run(
        "products", lambda: generate_sample_products(gateway, category, cfg)
    )
    raw_lists = tracker.run(
        "process-lists",
        lambda: _map_maybe_parallel(
            lambda p: generate_process_list(gateway, p, category, cfg),
            products,
            cfg.parallelism,
        ),
    )
    raw = [process for sublist in raw_lists for process in sublist]
    coarse = tracker.run("coarsen", lambda: coarsen(gateway, raw, category, cfg))
    graph = tracker.run(
        "assemble",
        lambda: order_and_assemble(gateway, coarse, category, cfg, provenance),
    )

    cost_after = gateway.meter.total_usd if gateway.meter else 0.0
    report = RunReport(
        stages=tuple(tracker.stages),
        total_cost_usd=cost_after - cost_before,
        duration_ms=sum(s.duration_ms for s in tracker.stages),
        model_id=cfg.model_id,
        timestamp=timestamp,
    )
    return graph, report
