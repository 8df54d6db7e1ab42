"""Deterministic schema-valid chat responses, derived only from the request
text and a seed. Powers the offline mock provider and fixture recording."""

from __future__ import annotations

import json
import re

from .gateway import ChatRequest, FixtureMissingError

_MATERIAL_POOL = (
    "glass", "steel", "organic fiber", "polymer", "aluminum",
    "ceramic", "timber", "natural rubber",
)

# (name, rationale) per phase; a few name variants appear across products so
# the coarsening stage has realistic near-duplicates to merge
_PROCESS_POOL = {
    "upstream": (
        ("Raw material cultivation",
         "Acquiring the primary raw materials drives land use and extraction impacts."),
        ("Packaging material production",
         "Packaging is manufactured before the product and carries its own footprint."),
        ("Inbound transport of materials",
         "Moving materials to the plant consumes fuel before manufacturing starts."),
    ),
    "core": (
        ("Primary processing",
         "Transforming raw inputs into intermediate product consumes process energy."),
        ("Product assembly and finishing",
         "Assembly and finishing steps complete the manufactured product."),
        ("Factory quality control",
         "Inspection and testing support manufacturing without transforming the product."),
    ),
    "downstream": (
        ("Distribution to retail",
         "Shipping finished goods to points of sale burns transport fuel."),
        ("Product use",
         "The use phase can dominate energy and water consumption."),
        ("End-of-life disposal",
         "Discarded products are landfilled, incinerated or recycled."),
    ),
}

_EXTRA_UPSTREAM = (
    "Water sourcing",
    "Water abstraction and treatment supports several production steps.",
)

_VARIANT_SUFFIX = " and auxiliary handling"


def _bullet_lines(prompt: str) -> list[str]:
    return [line[2:] for line in prompt.splitlines() if line.startswith("- ")]


def _first_match(pattern: str, prompt: str) -> str:
    match = re.search(pattern, prompt, re.MULTILINE)
    if not match:
        raise FixtureMissingError(f"synthetic responder could not find {pattern!r}")
    return match.group(1).strip()


class SyntheticLlm:
    """Routes each known prompt shape to a deterministic generator."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def respond(self, req: ChatRequest) -> str:
        prompt = req.user_prompt
        if '"products"' in prompt:
            return self._products(prompt)
        if '"process_category"' in prompt:
            return self._baseline(prompt)
        if '"subprocess_links"' in prompt:
            return self._ordering(prompt)
        if '"duplicate_groups"' in prompt:
            return self._dedup(prompt)
        if "Summarize this group" in prompt:
            return self._cluster_summary(prompt)
        if '"rationale"' in prompt:
            return self._process_list(prompt)
        if '"verdicts"' in prompt:
            return self._judge(prompt)
        if "Describe the components" in prompt:
            return self._components(prompt)
        raise FixtureMissingError("synthetic responder does not recognize this prompt")

    def _products(self, prompt: str) -> str:
        n = int(_first_match(r"List exactly (\d+) real products", prompt))
        category = _first_match(r"^Product category: (.+)$", prompt)
        products = []
        for i in range(1, n + 1):
            materials = [
                _MATERIAL_POOL[(i + self.seed + j) % len(_MATERIAL_POOL)] for j in range(2)
            ]
            products.append(
                {
                    "name": f"{category} sample {i:02d}",
                    "description": f"A representative {category.lower()} product, profile {i}.",
                    "materials": materials,
                }
            )
        return json.dumps({"products": products}, indent=2)

    def _components(self, prompt: str) -> str:
        product = _first_match(r"^Product: (.+)$", prompt)
        materials = _first_match(r"^Known materials: (.+)$", prompt)
        return (
            f"{product} is built from {materials}. Each material is refined from raw "
            "feedstock, formed into parts, and finished before assembly.\n\n"
            "Its packaging uses separately produced wrapping that is printed and cut to size."
        )

    def _process_list(self, prompt: str) -> str:
        product = _first_match(r"^Product: (.+)$", prompt)
        index = int(_first_match(r"sample (\d+)", prompt))
        processes = []
        for phase, pool in _PROCESS_POOL.items():
            for j, (name, rationale) in enumerate(pool):
                if (index + j) % 3 == 0:
                    name = name + _VARIANT_SUFFIX
                processes.append({"name": name, "phase": phase, "rationale": rationale})
        if index % 4 == 0:
            processes.append(
                {"name": _EXTRA_UPSTREAM[0], "phase": "upstream",
                 "rationale": _EXTRA_UPSTREAM[1]}
            )
        return json.dumps({"processes": processes}, indent=2)

    def _cluster_summary(self, prompt: str) -> str:
        members = _bullet_lines(prompt)
        first_name = members[0].split(": ", 1)[0]
        base = first_name.replace(_VARIANT_SUFFIX, "")
        base = re.sub(r"\s*\([^)]*\)$", "", base)
        return json.dumps(
            {
                "name": base,
                "description": f"Generalized process covering {len(members)} raw "
                               "processes observed across the sample products.",
            }
        )

    def _dedup(self, prompt: str) -> str:
        listed = _bullet_lines(prompt)
        by_name: dict[str, list[str]] = {}
        for entry in listed:
            phase, _, name = entry.partition(": ")
            by_name.setdefault(f"{phase}|{name.lower()}", []).append(name)
        groups = [names for names in by_name.values() if len(names) > 1]
        return json.dumps({"duplicate_groups": groups})

    def _ordering(self, prompt: str) -> str:
        roster = _bullet_lines(prompt)
        quality = [name for name in roster if "quality" in name.lower()]
        flow = [name for name in roster if name not in quality]
        edges = [[a, b] for a, b in zip(flow, flow[1:])]
        links = [[q, flow[0]] for q in quality if flow]
        return json.dumps({"edges": edges, "subprocess_links": links})

    def _judge(self, prompt: str) -> str:
        candidate_block = prompt.split("Candidate processes:", 1)[1]
        names = [line.split(": ", 1)[0] for line in _bullet_lines(candidate_block)]
        verdicts = [{"name": name, "included": True} for name in names]
        return json.dumps({"verdicts": verdicts})

    def _baseline(self, prompt: str) -> str:
        category = _first_match(r"The given product name is (.+)$", prompt)
        processes = {
            "Raw material extraction": {
                "description": f"Extracting the primary raw materials for {category.lower()}.",
                "process_category": "upstream",
                "is_subprocess": "process",
                "input_nodes": [],
                "output_nodes": ["Material transport"],
                "reasoning": "Raw materials must exist before anything can be made.",
            },
            "Material transport": {
                "description": "Moving raw materials to the manufacturing site.",
                "process_category": "upstream",
                "is_subprocess": "process",
                "input_nodes": ["Raw material extraction"],
                "output_nodes": ["Manufacturing"],
                "reasoning": "Transport links extraction with manufacturing.",
            },
            "Manufacturing": {
                "description": f"Producing finished {category.lower()} from raw inputs.",
                "process_category": "core",
                "is_subprocess": "process",
                "input_nodes": ["Material transport"],
                "output_nodes": ["Distribution"],
                "reasoning": "The central transformation step of the life cycle.",
            },
            "Quality inspection": {
                "description": "Testing samples from each production batch.",
                "process_category": "core",
                "is_subprocess": "subprocess",
                "input_nodes": [],
                "output_nodes": ["Manufacturing"],
                "reasoning": "Inspection supports manufacturing without transforming product.",
            },
            "Distribution": {
                "description": "Delivering packaged product to points of sale.",
                "process_category": "downstream",
                "is_subprocess": "process",
                "input_nodes": ["Manufacturing"],
                "output_nodes": ["Product use"],
                "reasoning": "Finished goods must reach the consumer.",
            },
            "Product use": {
                "description": "Consumer use of the product over its service life.",
                "process_category": "downstream",
                "is_subprocess": "process",
                "input_nodes": ["Distribution"],
                "output_nodes": ["End-of-life disposal"],
                "reasoning": "Use-phase impacts are part of the life cycle.",
            },
            "End-of-life disposal": {
                "description": "Collection and treatment of the discarded product.",
                "process_category": "downstream",
                "is_subprocess": "process",
                "input_nodes": ["Product use"],
                "output_nodes": [],
                "reasoning": "Disposal closes the life cycle.",
            },
        }
        body = json.dumps({"processes": processes}, indent=2)
        return f"```json\n{body}\n```"
