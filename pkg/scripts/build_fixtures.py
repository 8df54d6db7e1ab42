#!/usr/bin/env python3
"""Regenerate the offline test fixtures: the synthetic ground-truth corpus,
pairing files, the recorded transcript cache, and the golden outputs.

Everything here is deterministic, so reruns leave git clean. Run from the
repository root:

    python3 scripts/build_fixtures.py
"""

from __future__ import annotations

import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from pfgkit import cli  # noqa: E402
from pfgkit.model import (  # noqa: E402
    LifeCyclePhase,
    ProcessFlowGraph,
    ProductCategory,
    make_node,
    parse_document,
    save_graph_json,
)

FIXTURES = ROOT / "tests" / "fixtures"
CACHE = FIXTURES / "cache"
CORPUS = FIXTURES / "corpus"
GOLDEN = FIXTURES / "golden"
PAIRS = FIXTURES / "pairs"

FIXTURE_PROVENANCE = {
    "generator": "ground-truth-fixture",
    "model_id": "none",
    "timestamp": "1970-01-01T00:00:00Z",
    "config_hash": "-",
}

WINE_ARGS = [
    "--category", "Wine",
    "--description", "Still and sparkling wines fermented from grapes",
    "--cpc", "24212",
]
ASPHALT_ARGS = [
    "--category", "Asphalt Mixtures",
    "--description", "Bituminous mixtures for road construction and maintenance",
    "--cpc", "15330", "--cpc", "3794",
]


def build_wine_truth() -> ProcessFlowGraph:
    up, core, down = LifeCyclePhase.UPSTREAM, LifeCyclePhase.CORE, LifeCyclePhase.DOWNSTREAM
    nodes = {
        "cultivation": make_node("Grape cultivation", up,
                                 "Growing, tending and harvesting wine grapes."),
        "bottles": make_node("Glass bottle production", up,
                             "Manufacturing glass bottles, corks and closures."),
        "transport": make_node("Transport of materials to winery", up,
                               "Moving grapes and packaging to the winery."),
        "crushing": make_node("Crushing and pressing", core,
                              "Crushing grapes and pressing juice for fermentation."),
        "fermentation": make_node("Fermentation and aging", core,
                                  "Fermenting juice and aging wine in tanks or barrels."),
        "quality": make_node("Quality testing", core,
                             "Laboratory testing of must and wine during production.",
                             is_subprocess=True),
        "bottling": make_node("Bottling and packaging", core,
                              "Filling, corking and labeling bottles."),
        "distribution": make_node("Distribution to retail", down,
                                  "Transporting packaged wine to retailers."),
        "consumption": make_node("Wine consumption", down,
                                 "Storage and consumption by the end consumer."),
        "eol": make_node("Packaging end-of-life", down,
                         "Collection and recycling of bottles and packaging.",
                         optional=True),
    }
    main_edges = {
        (nodes["cultivation"].id, nodes["transport"].id),
        (nodes["bottles"].id, nodes["transport"].id),
        (nodes["transport"].id, nodes["crushing"].id),
        (nodes["crushing"].id, nodes["fermentation"].id),
        (nodes["fermentation"].id, nodes["bottling"].id),
        (nodes["bottling"].id, nodes["distribution"].id),
        (nodes["distribution"].id, nodes["consumption"].id),
        (nodes["consumption"].id, nodes["eol"].id),
    }
    sub_edges = {(nodes["quality"].id, nodes["fermentation"].id)}
    return ProcessFlowGraph(
        category=ProductCategory(
            name="Wine",
            description="Still and sparkling wines fermented from grapes",
            cpc_codes=("24212",),
        ),
        nodes=tuple(nodes.values()),
        main_edges=frozenset(main_edges),
        sub_edges=frozenset(sub_edges),
        provenance=dict(FIXTURE_PROVENANCE),
    )


_LISTING_CORPUS = {
    "asphalt_truth": (
        ProductCategory(
            name="Asphalt Mixtures",
            description="Bituminous mixtures for road construction and maintenance",
            cpc_codes=("15330", "3794"),
        ),
        """Upstream:
- Aggregate extraction: Quarrying and crushing mineral aggregates.
- Bitumen production: Refining bitumen binder from crude oil.
- Additive production: Producing polymers and other asphalt additives.
- Transport of raw materials: Hauling aggregates and binder to the mixing plant.

Core:
- Drying and heating aggregates: Drying aggregates in the drum before mixing.
- Mixing asphalt: Blending hot aggregate, bitumen and additives.
- Plant maintenance: Maintaining the mixing plant between campaigns. (optional)

Downstream:
- Transport to site: Hauling hot mix to the paving site.
- Paving and compaction: Laying and compacting the asphalt mixture.
- Road maintenance: Periodic resurfacing and repair of the laid asphalt.
- Milling and recycling: Removing old asphalt and recycling it into new mix. (optional)
""",
    ),
    "railways_truth": (
        ProductCategory(
            name="Railways",
            description="Railway track infrastructure",
            cpc_codes=("53212",),
        ),
        """Upstream:
- Production of rail steel: Producing and rolling steel rails.
- Production of sleepers and ballast: Manufacturing sleepers and quarrying ballast.

Core:
- Track construction: Assembling rails, sleepers and ballast into track.

Downstream:
- Track maintenance and renewal: Inspecting, maintaining and renewing track.
""",
    ),
    "bottled_water_truth": (
        ProductCategory(
            name="Bottled Water",
            description="Bottled waters, not sweetened or flavoured",
            cpc_codes=("24410",),
        ),
        """Upstream:
- Water abstraction: Drawing raw water from springs or wells.
- PET resin production: Producing PET resin for bottles.
- Bottle preform production: Injection molding bottle preforms.
- Label and cap production: Producing labels, caps and secondary packaging.

Core:
- Water treatment: Filtering and treating the abstracted water.
- Bottle blowing: Blowing preforms into finished bottles.
- Filling and capping: Filling bottles with water and capping them.
- Packing into cases: Bundling bottles into trays and cases.

Downstream:
- Distribution: Transporting cases to warehouses and shops.
- Retail refrigeration: Chilled storage at the point of sale. (optional)
- Consumption: Drinking the bottled water.
- Bottle end-of-life: Collection, recycling or disposal of empty bottles.
""",
    ),
    "graphite_truth": (
        ProductCategory(
            name="Graphite Products",
            description="Graphite electrodes, blocks and specialties",
            cpc_codes=("3799",),
        ),
        """Upstream:
- Coke production: Producing petroleum coke feedstock.
- Pitch production: Producing coal-tar pitch binder.

Core:
- Mixing and forming: Mixing coke with pitch and forming green shapes.
- Baking and graphitization: Baking formed shapes and graphitizing at high temperature.
- Machining: Machining graphitized blocks to final dimensions.

Downstream:
- Distribution to customers: Shipping finished graphite products.
- End-of-life treatment: Disposal or recycling of spent graphite products.
""",
    ),
}


def build_generated_fixture(name: str, category: ProductCategory, listing: str) -> Path:
    graph = parse_document(listing, category=category, provenance=dict(FIXTURE_PROVENANCE))
    path = CORPUS / f"{name}.pfg.json"
    save_graph_json(graph, path)
    return path


def write_corpus() -> dict[str, Path]:
    CORPUS.mkdir(parents=True, exist_ok=True)
    paths = {"wine_truth": CORPUS / "wine_truth.pfg.json"}
    save_graph_json(build_wine_truth(), paths["wine_truth"])
    for name, (category, listing) in _LISTING_CORPUS.items():
        paths[name] = build_generated_fixture(name, category, listing)
    return paths


def write_pairs(paths: dict[str, Path]) -> None:
    """Pairing fixtures that reproduce published-style precision/recall rows."""
    from pfgkit.model import load_graph_json

    PAIRS.mkdir(parents=True, exist_ok=True)

    # Railways: 4 truth nodes, 1 generated node matching one of them
    # -> precision 1, recall 0.25, f1 0.4
    railways_truth = load_graph_json(paths["railways_truth"])
    generated = parse_document(
        """Upstream:

Core:
- Construction of railway tracks: Building the track from rails and sleepers.

Downstream:
""",
        category=railways_truth.category,
        provenance=dict(FIXTURE_PROVENANCE),
    )
    generated_path = CORPUS / "railways_generated.pfg.json"
    save_graph_json(generated, generated_path)
    truth_by_name = {n.name: n.id for n in railways_truth.nodes}
    gen_id = generated.nodes[0].id
    pairs = [{"generated": gen_id, "truth": truth_by_name["Track construction"],
              "label": "match"}]
    for name, nid in sorted(truth_by_name.items()):
        if name != "Track construction":
            pairs.append({"generated": "N/A", "truth": nid, "label": "missing"})
    (PAIRS / "railways_pairs.json").write_text(
        json.dumps({"pairs": pairs}, indent=2) + "\n", encoding="utf-8"
    )

    # Bottled water: 12 truth nodes, 5 generated nodes all matched
    # -> precision 1, recall 5/12, f1 0.59
    water_truth = load_graph_json(paths["bottled_water_truth"])
    water_generated = parse_document(
        """Upstream:
- Water sourcing: Drawing water from a protected spring.

Core:
- Bottle production: Blowing PET bottles from preforms.
- Filling: Filling and sealing the bottles.

Downstream:
- Distribution to retail: Shipping bottled water to shops.
- Recycling of bottles: Recycling collected PET bottles.
""",
        category=water_truth.category,
        provenance=dict(FIXTURE_PROVENANCE),
    )
    water_generated_path = CORPUS / "bottled_water_generated.pfg.json"
    save_graph_json(water_generated, water_generated_path)
    truth_ids = {n.name: n.id for n in water_truth.nodes}
    gen_ids = {n.name: n.id for n in water_generated.nodes}
    matches = [
        ("Water sourcing", "Water abstraction"),
        ("Bottle production", "Bottle blowing"),
        ("Filling", "Filling and capping"),
        ("Distribution to retail", "Distribution"),
        ("Recycling of bottles", "Bottle end-of-life"),
    ]
    pairs = [{"generated": gen_ids[g], "truth": truth_ids[t], "label": "match"}
             for g, t in matches]
    matched_truth = {truth_ids[t] for _, t in matches}
    for node in water_truth.nodes:
        if node.id not in matched_truth:
            pairs.append({"generated": "N/A", "truth": node.id, "label": "missing"})
    (PAIRS / "bottled_water_pairs.json").write_text(
        json.dumps({"pairs": pairs}, indent=2) + "\n", encoding="utf-8"
    )


def write_prices() -> Path:
    path = FIXTURES / "prices.json"
    path.write_text(
        json.dumps(
            {
                "mock-model": {"prompt_per_1k": 0.003, "completion_per_1k": 0.012},
                "mock-embed": {"prompt_per_1k": 0.0001, "completion_per_1k": 0.0},
                "mock-scorer": {"prompt_per_1k": 0.0005, "completion_per_1k": 0.0},
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return path


def run_cli(argv: list[str]) -> None:
    rc = cli.main(argv)
    if rc != 0:
        raise SystemExit(f"fixture command failed ({rc}): {' '.join(argv)}")


def main() -> None:
    for directory in (CACHE, GOLDEN):
        shutil.rmtree(directory, ignore_errors=True)
    CACHE.mkdir(parents=True)
    GOLDEN.mkdir(parents=True)

    corpus = write_corpus()
    write_pairs(corpus)
    prices = write_prices()

    common_record = ["--provider", "mock", "--cache-mode", "record",
                     "--cache-dir", str(CACHE), "--price-table", str(prices)]
    common_replay = ["--provider", "mock", "--cache-mode", "replay",
                     "--cache-dir", str(CACHE), "--price-table", str(prices)]

    with tempfile.TemporaryDirectory() as scratch_str:
        scratch = Path(scratch_str)
        # Record every transcript the golden runs will need. The ablation
        # sweep covers the n=15 pipeline run used by plain generate.
        run_cli(["ablate", *WINE_ARGS, "--samples-grid", "3,6,9,12,15",
                 "--truth", str(corpus["wine_truth"]),
                 "--out", str(scratch / "ablate.csv"), *common_record])
        run_cli(["baseline", *ASPHALT_ARGS, "--method", "direct",
                 "--out", str(scratch / "direct.json"), *common_record])
        run_cli(["baseline", *ASPHALT_ARGS, "--method", "example",
                 "--out", str(scratch / "example.json"), *common_record])

        # Golden outputs come from replay runs so their timestamps are frozen.
        run_cli(["generate", *WINE_ARGS, "--samples", "15",
                 "--out", str(GOLDEN / "wine.pfg.json"),
                 "--report", str(GOLDEN / "wine.report.json"), *common_replay])
        run_cli(["export", "--in", str(GOLDEN / "wine.pfg.json"),
                 "--format", "dot", "--out", str(GOLDEN / "wine.dot")])
        run_cli(["ablate", *WINE_ARGS, "--samples-grid", "3,6,9,12,15",
                 "--truth", str(corpus["wine_truth"]),
                 "--out", str(GOLDEN / "ablate_wine.csv"), *common_replay])
        run_cli(["baseline", *ASPHALT_ARGS, "--method", "direct",
                 "--out", str(GOLDEN / "asphalt_direct.pfg.json"),
                 "--report", str(GOLDEN / "asphalt_direct.report.json"), *common_replay])

        # Record the scoring/judge transcripts used by evaluate, then freeze
        # the replayed evaluation report.
        run_cli(["evaluate", "--generated", str(GOLDEN / "wine.pfg.json"),
                 "--truth", str(corpus["wine_truth"]), "--metrics",
                 "pmi,judge,rouge,bleu", "--out", str(scratch / "eval.json"),
                 *common_record])
        run_cli(["evaluate", "--generated", str(GOLDEN / "wine.pfg.json"),
                 "--truth", str(corpus["wine_truth"]), "--metrics",
                 "pmi,judge,rouge,bleu", "--out", str(GOLDEN / "wine_eval.json"),
                 *common_replay])

    entries = len(list(CACHE.glob("*.json")))
    print(f"fixtures rebuilt: {entries} cache entries, goldens in {GOLDEN}")


if __name__ == "__main__":
    main()
