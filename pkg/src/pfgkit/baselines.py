"""Single-prompt comparison generators: a chain-of-thought direct prompt and a
one-shot prompt with an example document. Both share the pipeline's repair and
validation path."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Mapping

from .gateway import ChatRequest, Gateway
from .model import LifeCyclePhase, ProcessFlowGraph, ProductCategory, node_id
from .pipeline import (
    MalformedOutputError,
    NodeSpec,
    RunReport,
    StageReport,
    SYSTEM_PROMPT,
    build_graph,
    extract_json,
    load_prompt,
    render_template,
    run_timestamp,
    _clean_text,
)

BASELINE_KINDS = ("direct", "example")
TEMPLATE_NAMES = {"direct": "baseline_direct", "example": "baseline_example"}
_MAX_TOKENS = 4000
_MAX_REPAIR_PROMPTS = 2


@dataclass(frozen=True)
class BaselineKind:
    kind: str
    example_document: str | None = None

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"baseline kind must be one of {BASELINE_KINDS}")
        if self.kind == "example" and not (self.example_document or "").strip():
            raise ValueError("example baseline requires a nonempty example document")

    @classmethod
    def direct(cls) -> "BaselineKind":
        return cls(kind="direct")

    @classmethod
    def example(cls, document: str | None = None) -> "BaselineKind":
        return cls(kind="example", example_document=document or load_default_example())


def load_default_example() -> str:
    """The bundled one-shot example: a baked-goods process listing."""
    return resources.files("pfgkit").joinpath("data", "baked_goods_example.txt").read_text("utf-8")


def render_baseline_prompt(kind: BaselineKind, category: ProductCategory) -> str:
    values = {
        "product_name": category.name,
        "product_description": category.description or "(none provided)",
    }
    if kind.kind == "example":
        values["example"] = kind.example_document
    return render_template(load_prompt(TEMPLATE_NAMES[kind.kind]), values)


def _parse_baseline_processes(text: str) -> list[dict]:
    data = extract_json(text)
    processes = data.get("processes")
    if not isinstance(processes, dict) or not processes:
        raise MalformedOutputError('missing or empty "processes" map')
    parsed = []
    for name, body in processes.items():
        if not isinstance(body, dict):
            raise MalformedOutputError(f"process {name!r} is not an object")
        try:
            phase = LifeCyclePhase.parse(body.get("process_category", ""))
        except ValueError as exc:
            raise MalformedOutputError(str(exc)) from exc
        flag = str(body.get("is_subprocess", "process")).strip().lower()
        if flag not in ("subprocess", "process"):
            raise MalformedOutputError(f"is_subprocess must be 'subprocess' or 'process', got {flag!r}")
        inputs = body.get("input_nodes", [])
        outputs = body.get("output_nodes", [])
        if not isinstance(inputs, list) or not isinstance(outputs, list):
            raise MalformedOutputError(f"process {name!r} has non-list input/output nodes")
        parsed.append(
            {
                "name": _clean_text(name),
                "phase": phase,
                "description": _clean_text(body.get("description", "")),
                "rationale": _clean_text(body.get("reasoning", "")),
                "is_subprocess": flag == "subprocess",
                "inputs": [_clean_text(i) for i in inputs if isinstance(i, str)],
                "outputs": [_clean_text(o) for o in outputs if isinstance(o, str)],
            }
        )
    return parsed


def _to_graph(parsed: list[dict], category: ProductCategory,
              provenance: Mapping) -> ProcessFlowGraph:
    specs = [
        NodeSpec(name=p["name"], phase=p["phase"], description=p["description"],
                 rationale=p["rationale"])
        for p in parsed
    ]
    by_name = {p["name"]: node_id(p["name"], p["phase"]) for p in parsed}
    candidates = []
    for p in parsed:
        src = by_name[p["name"]]
        kind = "sub" if p["is_subprocess"] else "main"
        # a declared subprocess hangs off its parents via its outgoing edges
        for out in p["outputs"]:
            if out in by_name:
                candidates.append((src, by_name[out], kind))
        for inp in p["inputs"]:
            if inp in by_name:
                candidates.append((by_name[inp], src, "main"))
    return build_graph(category, specs, candidates, provenance)


def run_baseline(gateway: Gateway, kind: BaselineKind, category: ProductCategory,
                 model_id: str) -> tuple[ProcessFlowGraph, RunReport]:
    """Render the baseline prompt, parse the mandated JSON shape (with up to
    two repair re-prompts), and assemble a validated graph."""
    base_prompt = render_baseline_prompt(kind, category)
    timestamp = run_timestamp(gateway)
    cost_before = gateway.meter.total_usd if gateway.meter else 0.0
    calls_before = len(gateway.transcripts)

    prompt = base_prompt
    parsed = None
    last_error: MalformedOutputError | None = None
    for _ in range(1 + _MAX_REPAIR_PROMPTS):
        req = ChatRequest(
            model_id=model_id,
            system_prompt=SYSTEM_PROMPT,
            user_prompt=prompt,
            temperature=0.0,
            max_tokens=_MAX_TOKENS,
            expects_json=True,
        )
        text = gateway.chat(req).response_text
        try:
            parsed = _parse_baseline_processes(text)
            break
        except MalformedOutputError as exc:
            last_error = exc
            prompt = base_prompt + (
                f"\n\nYour previous response could not be parsed: {exc}. "
                "Return a single JSON object in exactly the requested format."
            )
    if parsed is None:
        raise MalformedOutputError(
            f"baseline response unusable after {_MAX_REPAIR_PROMPTS} repair prompts: {last_error}"
        )

    provenance = {
        "generator": f"baseline-{kind.kind}",
        "model_id": model_id,
        "timestamp": timestamp,
        "config_hash": "-",
    }
    graph = _to_graph(parsed, category, provenance)
    new = gateway.transcripts[calls_before:]
    cost_after = gateway.meter.total_usd if gateway.meter else 0.0
    report = RunReport(
        stages=(
            StageReport(
                name="baseline",
                n_calls=len(new),
                duration_ms=sum(t.latency_ms for t in new),
            ),
        ),
        total_cost_usd=cost_after - cost_before,
        duration_ms=sum(t.latency_ms for t in new),
        model_id=model_id,
        timestamp=timestamp,
    )
    return graph, report
