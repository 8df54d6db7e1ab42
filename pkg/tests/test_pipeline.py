import json
import random

import pytest

from pfgkit.gateway import CostMeter, Gateway
from pfgkit.model import PHASES, ProductCategory, validate_graph
from pfgkit.pipeline import (
    CoarseProcess,
    MalformedOutputError,
    NodeSpec,
    PipelineConfig,
    PipelineError,
    RawProcess,
    SampleProduct,
    build_graph,
    coarsen,
    extract_json,
    generate_process_list,
    generate_sample_products,
    order_and_assemble,
    render_template,
    run_pipeline,
)
from pfgkit.providers import MockProvider

from conftest import ScriptedChatProvider

UP, CORE, DOWN = PHASES
CAT = ProductCategory(name="Wine", description="Wines from grapes", cpc_codes=("24212",))


def synthetic_gateway(**kwargs):
    return Gateway(MockProvider(synthesize=True), **kwargs)


class TestTemplates:
    def test_render_and_reject_leftovers(self):
        assert render_template("a {{x}} b", {"x": "1"}) == "a 1 b"
        with pytest.raises(ValueError):
            render_template("a {{x}} {{missing}}", {"x": "1"})

    def test_extract_json_tolerates_fences_and_prose(self):
        assert extract_json('noise ```json\n{"a": 1}\n``` trailing') == {"a": 1}
        assert extract_json('prefix {"a": {"b": 2}} suffix') == {"a": {"b": 2}}
        with pytest.raises(MalformedOutputError):
            extract_json("no json here")


class TestSampleProducts:
    def test_prompt_override_is_used(self):
        seen = []

        def chat(req):
            seen.append(req.user_prompt)
            return json.dumps({"products": [{"name": "Only", "materials": []}]})

        override = (
            "CUSTOM TEMPLATE {{category_name}} {{category_description}} "
            '{{cpc_codes}} List exactly {{n_products}} real products "products"'
        )
        cfg = PipelineConfig(n_products=1,
                             prompt_overrides={"sample_products": override})
        generate_sample_products(Gateway(ScriptedChatProvider(chat)), CAT, cfg)
        assert seen[0].startswith("CUSTOM TEMPLATE Wine")

    def test_count_and_names(self):
        for n in (3, 15):
            products = generate_sample_products(
                synthetic_gateway(), CAT, PipelineConfig(n_products=n)
            )
            assert len(products) == n
            assert len({p.name for p in products}) == n

    def test_duplicate_names_get_one_repair_round(self):
        calls = []

        def chat(req):
            calls.append(req.user_prompt)
            dup = {"products": [{"name": "Same", "materials": []},
                                {"name": "Same", "materials": []}]}
            return json.dumps(dup)

        gw = Gateway(ScriptedChatProvider(chat))
        with pytest.raises(MalformedOutputError):
            generate_sample_products(gw, CAT, PipelineConfig(n_products=2))
        assert len(calls) == 2
        assert "previous response was invalid" in calls[1]

    def test_repair_round_can_succeed(self):
        state = {"calls": 0}

        def chat(req):
            state["calls"] += 1
            if state["calls"] == 1:
                return "not json"
            return json.dumps({"products": [
                {"name": "A", "description": "", "materials": ["glass"]},
                {"name": "B", "description": "", "materials": []},
                {"name": "C", "description": "", "materials": []},
            ]})

        products = generate_sample_products(
            Gateway(ScriptedChatProvider(chat)), CAT, PipelineConfig(n_products=3)
        )
        assert [p.name for p in products] == ["A", "B", "C"]
        assert state["calls"] == 2


class TestProcessLists:
    PRODUCT = SampleProduct(name="Wine sample 01", description="d", materials=("glass",))

    def test_synthetic_round_trip_has_all_phases(self):
        raw = generate_process_list(synthetic_gateway(), self.PRODUCT, CAT,
                                    PipelineConfig())
        phases = {r.phase for r in raw}
        assert phases == {UP, CORE, DOWN}
        assert all(r.product == self.PRODUCT.name for r in raw)

    def test_invalid_phase_is_malformed(self):
        def chat(req):
            if "Describe the components" in req.user_prompt:
                return "components text"
            return json.dumps({"processes": [
                {"name": "X", "phase": "transport-phase", "rationale": "r"}
            ]})

        with pytest.raises(MalformedOutputError):
            generate_process_list(Gateway(ScriptedChatProvider(chat)),
                                  self.PRODUCT, CAT, PipelineConfig())

    def test_empty_list_is_malformed(self):
        def chat(req):
            if "Describe the components" in req.user_prompt:
                return "components text"
            return json.dumps({"processes": []})

        with pytest.raises(MalformedOutputError):
            generate_process_list(Gateway(ScriptedChatProvider(chat)),
                                  self.PRODUCT, CAT, PipelineConfig())


def _raw(name, phase, rationale="needed for the product", product="p"):
    return RawProcess(product=product, name=name, phase=phase, rationale=rationale)


class TestCoarsen:
    def test_two_well_separated_groups_give_two_coarse_processes(self):
        # two tight groups on orthogonal axes; intra-group spread << separation
        table = {}
        raw = []
        for i in range(6):
            name = f"grape cultivation v{i}"
            raw.append(_raw(name, UP, "growing grapes"))
            table[f"{name}: growing grapes"] = [1.0, 0.001 * i, 0.0]
        for i in range(6):
            name = f"bottle production v{i}"
            raw.append(_raw(name, UP, "making bottles"))
            table[f"{name}: making bottles"] = [0.0, 0.001 * i, 1.0]

        summaries = []

        def chat(req):
            if "Summarize this group" in req.user_prompt:
                members = [l for l in req.user_prompt.splitlines() if l.startswith("- ")]
                label = "Grape cultivation" if "grape" in members[0] else "Bottle production"
                summaries.append(label)
                return json.dumps({"name": label, "description": "d"})
            return json.dumps({"duplicate_groups": []})

        gw = Gateway(ScriptedChatProvider(chat, embed_table=table, embed_dim=3))
        coarse = coarsen(gw, raw, CAT, PipelineConfig())
        assert sorted(c.name for c in coarse) == ["Bottle production", "Grape cultivation"]
        assert {len(c.members) for c in coarse} == {6}

    def test_small_phase_passes_through_without_clustering(self):
        raw = [_raw("use", DOWN), _raw("dispose", DOWN)]

        def chat(req):
            return json.dumps({"duplicate_groups": []})

        gw = Gateway(ScriptedChatProvider(chat))
        coarse = coarsen(gw, raw, CAT, PipelineConfig())
        assert sorted(c.name for c in coarse) == ["dispose", "use"]
        # no embed or summary calls happened: only the dedup chat
        assert len(gw.transcripts) == 1

    def test_dedup_keeps_first_by_cluster_order(self):
        raw = [_raw("use", DOWN), _raw("use again", DOWN)]

        def chat(req):
            return json.dumps({"duplicate_groups": [["use", "use again"]]})

        coarse = coarsen(Gateway(ScriptedChatProvider(chat)), raw, CAT, PipelineConfig())
        assert [c.name for c in coarse] == ["use"]

    def test_phase_never_changes(self):
        raw = [_raw("a", UP), _raw("b", CORE), _raw("c", DOWN)]

        def chat(req):
            return json.dumps({"duplicate_groups": []})

        coarse = coarsen(Gateway(ScriptedChatProvider(chat)), raw, CAT, PipelineConfig())
        by_name = {c.name: c for c in coarse}
        for r in raw:
            assert by_name[r.name].phase == r.phase
            assert all(m.phase == r.phase for m in by_name[r.name].members)


def _coarse(name, phase, members=None):
    return CoarseProcess(
        name=name, description="d", phase=phase,
        members=tuple(members or (_raw(name, phase),)),
    )


class TestOrderAndAssemble:
    def test_llm_edge_is_honored(self):
        roster = [_coarse("Mixing dough", CORE), _coarse("Forming noodles with dough", CORE)]

        def chat(req):
            return json.dumps({
                "edges": [["Mixing dough", "Forming noodles with dough"]],
                "subprocess_links": [],
            })

        graph = order_and_assemble(Gateway(ScriptedChatProvider(chat)), roster, CAT,
                                   PipelineConfig())
        ids = {n.name: n.id for n in graph.nodes}
        assert (ids["Mixing dough"], ids["Forming noodles with dough"]) in graph.main_edges

    def test_cycle_inducing_edge_dropped_in_response_order(self):
        roster = [_coarse("a", CORE), _coarse("b", CORE)]

        def chat(req):
            return json.dumps({"edges": [["a", "b"], ["b", "a"]],
                               "subprocess_links": []})

        graph = order_and_assemble(Gateway(ScriptedChatProvider(chat)), roster, CAT,
                                   PipelineConfig())
        ids = {n.name: n.id for n in graph.nodes}
        assert (ids["a"], ids["b"]) in graph.main_edges
        assert (ids["b"], ids["a"]) not in graph.main_edges
        assert validate_graph(graph) == []

    def test_bridging_connects_phase_sinks_to_sources(self):
        roster = [
            _coarse("Bottle production", UP), _coarse("Grape pressing", UP),
            _coarse("Filling", CORE), _coarse("Labeling", CORE),
        ]

        def chat(req):
            if "upstream" in req.user_prompt:
                return json.dumps({"edges": [["Grape pressing", "Bottle production"]],
                                   "subprocess_links": []})
            return json.dumps({"edges": [["Filling", "Labeling"]],
                               "subprocess_links": []})

        graph = order_and_assemble(Gateway(ScriptedChatProvider(chat)), roster, CAT,
                                   PipelineConfig())
        ids = {n.name: n.id for n in graph.nodes}
        # upstream sink = Bottle production, core source = Filling
        assert (ids["Bottle production"], ids["Filling"]) in graph.main_edges
        assert (ids["Grape pressing"], ids["Filling"]) not in graph.main_edges

    def test_unknown_names_dropped(self):
        roster = [_coarse("a", CORE), _coarse("b", CORE)]

        def chat(req):
            return json.dumps({
                "edges": [["a", "nonexistent"], ["a", "b"]],
                "subprocess_links": [["ghost", "a"], 7, ["a"]],
            })

        graph = order_and_assemble(Gateway(ScriptedChatProvider(chat)), roster, CAT,
                                   PipelineConfig())
        assert len(graph.main_edges) == 1
        assert graph.sub_edges == frozenset()

    def test_subprocess_link_sets_flag_and_sub_edge(self):
        roster = [_coarse("Assembly", CORE), _coarse("Quality control", CORE)]

        def chat(req):
            return json.dumps({"edges": [],
                               "subprocess_links": [["Quality control", "Assembly"]]})

        graph = order_and_assemble(Gateway(ScriptedChatProvider(chat)), roster, CAT,
                                   PipelineConfig())
        node = {n.name: n for n in graph.nodes}
        assert node["Quality control"].is_subprocess
        assert (node["Quality control"].id, node["Assembly"].id) in graph.sub_edges
        assert validate_graph(graph) == []


class TestBuildGraphRepairs:
    def test_adversarial_candidates_always_yield_valid_graphs(self):
        rng = random.Random(99)
        names = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
        for _ in range(200):
            specs = [
                NodeSpec(name=rng.choice(names), phase=rng.choice(PHASES))
                for _ in range(rng.randint(0, 8))
            ]
            pool = [s.name for s in specs] + ["ghost"]
            candidates = []
            from pfgkit.model import node_id

            for _ in range(rng.randint(0, 14)):
                a = rng.choice(pool)
                b = rng.choice(pool)
                pa = rng.choice(PHASES)
                pb = rng.choice(PHASES)
                candidates.append(
                    (node_id(a, pa), node_id(b, pb), rng.choice(["main", "sub", "junk"]))
                )
            graph = build_graph(CAT, specs, candidates, {})
            assert validate_graph(graph) == []


class TestRunPipeline:
    def test_full_run_call_accounting(self):
        meter = CostMeter({"mock-model": {"prompt_per_1k": 1.0, "completion_per_1k": 1.0}})
        gw = synthetic_gateway(meter=meter)
        cfg = PipelineConfig(n_products=6)
        graph, report = run_pipeline(gw, CAT, cfg)
        assert validate_graph(graph) == []
        stages = {s.name: s for s in report.stages}
        assert stages["products"].n_calls == 1
        # two chat calls per product in the elicitation stage
        assert stages["process-lists"].n_calls == 2 * cfg.n_products
        assert report.total_cost_usd == pytest.approx(meter.total_usd)
        assert report.model_id == "mock-model"

    def test_coarse_count_bounded_by_raw_count(self):
        gw = synthetic_gateway()
        cfg = PipelineConfig(n_products=3)
        products = generate_sample_products(gw, CAT, cfg)
        raw = [r for p in products for r in generate_process_list(gw, p, CAT, cfg)]
        coarse = coarsen(gw, raw, CAT, cfg)
        for phase in PHASES:
            raw_count = sum(1 for r in raw if r.phase == phase)
            coarse_count = sum(1 for c in coarse if c.phase == phase)
            assert coarse_count <= raw_count

    def test_stage_errors_carry_stage_label(self):
        def chat(req):
            return "garbage"

        with pytest.raises(PipelineError) as err:
            run_pipeline(Gateway(ScriptedChatProvider(chat)), CAT, PipelineConfig())
        assert err.value.stage == "products"

    def test_parallel_run_matches_serial(self):
        from pfgkit.model import graph_to_json_dict

        serial_graph, _ = run_pipeline(synthetic_gateway(), CAT,
                                       PipelineConfig(n_products=3))
        parallel_graph, _ = run_pipeline(synthetic_gateway(), CAT,
                                         PipelineConfig(n_products=3, parallelism=4))
        serial, parallel = (graph_to_json_dict(g) for g in (serial_graph, parallel_graph))
        # live-mode provenance timestamps have second resolution and the two
        # runs may straddle a boundary
        serial["provenance"].pop("timestamp")
        parallel["provenance"].pop("timestamp")
        assert serial == parallel
