import json
import re

import pytest

from pfgkit.baselines import (
    BaselineKind,
    load_default_example,
    render_baseline_prompt,
    run_baseline,
)
from pfgkit.gateway import Gateway
from pfgkit.model import PHASES, ProductCategory, validate_graph
from pfgkit.pipeline import MalformedOutputError, load_prompt
from pfgkit.providers import MockProvider

from conftest import ScriptedChatProvider

CAT = ProductCategory(
    name="Asphalt Mixtures",
    description="Bituminous mixtures for road construction",
    cpc_codes=("15330",),
)

PLACEHOLDER_RE = re.compile(r"\{\{(product_name|product_description|example)\}\}")


def assert_differs_only_at_placeholders(template: str, rendered: str):
    """The rendered prompt must be the template with only the placeholder
    spans replaced: every inter-placeholder segment appears verbatim, in
    order, covering the whole rendered string."""
    segments = PLACEHOLDER_RE.split(template)[::2]  # drop captured names
    position = 0
    for index, segment in enumerate(segments):
        found = rendered.find(segment, position)
        assert found != -1, f"template segment missing from rendered prompt: {segment[:60]!r}"
        if index == 0:
            assert found == 0
        position = found + len(segment)
    assert position == len(rendered)


class TestBaselineKind:
    def test_kinds_validated(self):
        with pytest.raises(ValueError):
            BaselineKind(kind="midway")
        with pytest.raises(ValueError):
            BaselineKind(kind="example", example_document="   ")

    def test_example_defaults_to_bundled_document(self):
        kind = BaselineKind.example()
        assert "Baking" in kind.example_document
        assert kind.example_document == load_default_example()


class TestTemplateFidelity:
    def test_direct_prompt(self):
        rendered = render_baseline_prompt(BaselineKind.direct(), CAT)
        assert_differs_only_at_placeholders(load_prompt("baseline_direct"), rendered)
        assert CAT.name in rendered and CAT.description in rendered

    def test_example_prompt(self):
        kind = BaselineKind.example()
        rendered = render_baseline_prompt(kind, CAT)
        assert_differs_only_at_placeholders(load_prompt("baseline_example"), rendered)
        assert kind.example_document in rendered


class TestRunBaseline:
    def test_synthetic_fixture_parses_to_valid_graph(self):
        gw = Gateway(MockProvider(synthesize=True))
        graph, report = run_baseline(gw, BaselineKind.direct(), CAT, "mock-model")
        assert validate_graph(graph) == []
        assert {n.phase for n in graph.nodes} == set(PHASES)
        subprocesses = [n for n in graph.nodes if n.is_subprocess]
        assert [n.name for n in subprocesses] == ["Quality inspection"]
        assert len(graph.sub_edges) == 1
        assert report.stages[0].name == "baseline"
        assert report.stages[0].n_calls == 1

    def test_fenced_response_is_stripped(self):
        payload = {
            "processes": {
                "Mining": {"description": "d", "process_category": "upstream",
                           "is_subprocess": "process", "input_nodes": [],
                           "output_nodes": ["Smelting"], "reasoning": "r"},
                "Smelting": {"description": "d", "process_category": "core",
                             "is_subprocess": "process", "input_nodes": ["Mining"],
                             "output_nodes": [], "reasoning": "r"},
            }
        }

        def chat(req):
            return "Here you go:\n```json\n" + json.dumps(payload) + "\n```"

        graph, _ = run_baseline(Gateway(ScriptedChatProvider(chat)),
                                BaselineKind.direct(), CAT, "mock-model")
        names = {n.name for n in graph.nodes}
        assert names == {"Mining", "Smelting"}
        assert len(graph.main_edges) == 1  # duplicate input/output declarations collapse

    def test_invalid_phase_exhausts_repairs(self):
        calls = []

        def chat(req):
            calls.append(req.user_prompt)
            return json.dumps({"processes": {
                "X": {"description": "d", "process_category": "midstream",
                      "is_subprocess": "process", "input_nodes": [],
                      "output_nodes": [], "reasoning": "r"}
            }})

        with pytest.raises(MalformedOutputError):
            run_baseline(Gateway(ScriptedChatProvider(chat)), BaselineKind.direct(),
                         CAT, "mock-model")
        assert len(calls) == 3  # initial + 2 repair re-prompts
        assert "could not be parsed" in calls[1]

    def test_repair_prompt_can_recover(self):
        state = {"calls": 0}
        good = {"processes": {
            "Mining": {"description": "d", "process_category": "upstream",
                       "is_subprocess": "process", "input_nodes": [],
                       "output_nodes": [], "reasoning": "r"},
        }}

        def chat(req):
            state["calls"] += 1
            return "nonsense" if state["calls"] == 1 else json.dumps(good)

        graph, report = run_baseline(Gateway(ScriptedChatProvider(chat)),
                                     BaselineKind.direct(), CAT, "mock-model")
        assert state["calls"] == 2
        assert len(graph.nodes) == 1
        assert report.stages[0].n_calls == 2

    def test_backward_cross_phase_edges_are_dropped(self):
        payload = {"processes": {
            "Disposal": {"description": "d", "process_category": "downstream",
                         "is_subprocess": "process", "input_nodes": [],
                         "output_nodes": ["Mining"], "reasoning": "r"},
            "Mining": {"description": "d", "process_category": "upstream",
                       "is_subprocess": "process", "input_nodes": [],
                       "output_nodes": [], "reasoning": "r"},
        }}

        def chat(req):
            return json.dumps(payload)

        graph, _ = run_baseline(Gateway(ScriptedChatProvider(chat)),
                                BaselineKind.direct(), CAT, "mock-model")
        assert validate_graph(graph) == []
        ids = {n.name: n.id for n in graph.nodes}
        assert (ids["Disposal"], ids["Mining"]) not in graph.main_edges
        # bridging still connects the phases forward
        assert (ids["Mining"], ids["Disposal"]) in graph.main_edges
