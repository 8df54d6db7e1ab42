"""Command-line surface: generate, baseline, evaluate, ablate, export."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import baselines, evaluation, pipeline
from .gateway import CACHE_MODES, CostMeter, Gateway, GatewayError, load_price_table
from .model import (
    PHASES,
    ProcessFlowGraph,
    ProductCategory,
    load_graph_json,
    save_graph_json,
    topological_order,
)
from .providers import ENV_API_BASE, ENV_API_KEY, ENV_SCORER_BASE, HttpProvider, MockProvider

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

SAMPLE_CHOICES = (3, 6, 9, 12, 15)
METRIC_CHOICES = ("pmi", "f1", "judge", "rouge", "bleu")
PROVIDER_CHOICES = ("openai", "mock")


@dataclass(frozen=True)
class RunConfig:
    provider: str = "mock"
    api_base: str = ""
    api_key: str = ""
    scorer_base: str = ""
    model_id: str = "mock-model"
    scorer_model_id: str = "mock-scorer"
    embed_model_id: str = "mock-embed"
    cache_mode: str = "live"
    cache_dir: str = ""
    parallelism: int = 1
    price_table: str = ""
    out_dir: str = "."


def _load_config_file(path: str) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError("config file must contain a JSON object")
    return data


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < environment < command-line flags."""
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config))
    for env, key in ((ENV_API_BASE, "api_base"), (ENV_API_KEY, "api_key"),
                     (ENV_SCORER_BASE, "scorer_base")):
        if os.environ.get(env):
            merged[key] = os.environ[env]
    for flag in ("provider", "model", "scorer_model", "embed_model", "cache_mode",
                 "cache_dir", "parallelism", "price_table", "out_dir"):
        value = getattr(args, flag, None)
        if value is not None:
            merged[{"model": "model_id", "scorer_model": "scorer_model_id",
                    "embed_model": "embed_model_id"}.get(flag, flag)] = value
    if "provider" not in merged:
        merged["provider"] = "openai" if merged.get("api_base") else "mock"
    allowed = RunConfig.__dataclass_fields__
    config = RunConfig(**{k: v for k, v in merged.items() if k in allowed})
    if config.cache_mode not in CACHE_MODES:
        raise UsageError(f"cache mode must be one of {CACHE_MODES}")
    if config.provider not in PROVIDER_CHOICES:
        raise UsageError(f"provider must be one of {PROVIDER_CHOICES}")
    if config.cache_mode in ("record", "replay") and not config.cache_dir:
        raise UsageError(f"cache mode {config.cache_mode!r} requires --cache-dir")
    if config.cache_mode == "replay" and not Path(config.cache_dir).is_dir():
        raise UsageError(f"replay mode requires an existing cache directory: {config.cache_dir}")
    return config


class UsageError(Exception):
    pass


def build_gateway(config: RunConfig) -> Gateway:
    meter = CostMeter(load_price_table(config.price_table) if config.price_table else {})
    if config.cache_mode == "replay":
        provider = None  # replay must issue zero network calls
    elif config.provider == "mock":
        provider = MockProvider(synthesize=True)
    else:
        if not config.api_base:
            raise UsageError(f"provider 'openai' requires {ENV_API_BASE} or api_base in config")
        provider = HttpProvider(
            config.api_base,
            api_key=config.api_key,
            scorer_base_url=config.scorer_base or None,
        )
    return Gateway(
        provider,
        cache_dir=config.cache_dir or None,
        mode=config.cache_mode,
        meter=meter,
        embed_model_id=config.embed_model_id,
        scorer_model_id=config.scorer_model_id,
    )


def _category_from_args(args: argparse.Namespace) -> ProductCategory:
    return ProductCategory(
        name=args.category,
        description=args.description or "",
        cpc_codes=tuple(args.cpc or ()),
    )


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def _default_out(config: RunConfig, name: str) -> Path:
    return Path(config.out_dir) / name


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in name.lower()).strip("-")


# -- subcommands -----------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    config = resolve_run_config(args)
    gateway = build_gateway(config)
    category = _category_from_args(args)
    cfg = pipeline.PipelineConfig(
        n_products=args.samples,
        model_id=config.model_id,
        parallelism=config.parallelism,
    )
    try:
        graph, report = pipeline.run_pipeline(gateway, category, cfg)
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else _default_out(config, f"{_slug(category.name)}.pfg.json")
    report_path = Path(args.report) if args.report else out.with_suffix("").with_suffix(".report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph_json(graph, out)
    _write_json(report_path, report.to_json_dict())
    print(f"wrote {out} and {report_path}")
    print(f"total_cost_usd={report.total_cost_usd:.6f} duration_ms={report.duration_ms}")
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    config = resolve_run_config(args)
    gateway = build_gateway(config)
    category = _category_from_args(args)
    if args.method == "direct":
        kind = baselines.BaselineKind.direct()
    else:
        document = Path(args.example_file).read_text(encoding="utf-8") if args.example_file else None
        kind = baselines.BaselineKind.example(document)
    try:
        graph, report = baselines.run_baseline(gateway, kind, category, config.model_id)
    except (pipeline.MalformedOutputError, GatewayError) as exc:
        print(f"error: baseline: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else _default_out(
        config, f"{_slug(category.name)}.{args.method}.pfg.json"
    )
    report_path = Path(args.report) if args.report else out.with_suffix("").with_suffix(".report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph_json(graph, out)
    _write_json(report_path, report.to_json_dict())
    print(f"wrote {out} and {report_path}")
    print(f"total_cost_usd={report.total_cost_usd:.6f} duration_ms={report.duration_ms}")
    return EXIT_OK


def _parse_metrics(raw: str) -> list[str]:
    metrics = [m.strip() for m in raw.split(",") if m.strip()]
    unknown = sorted(set(metrics) - set(METRIC_CHOICES))
    if unknown:
        raise UsageError(f"unknown metrics: {', '.join(unknown)}")
    if not metrics:
        raise UsageError("at least one metric is required")
    return metrics


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = resolve_run_config(args)
    metrics = _parse_metrics(args.metrics)
    if "f1" in metrics and not args.pairs:
        raise UsageError("--metrics f1 requires --pairs")
    generated = load_graph_json(args.generated)
    truth = load_graph_json(args.truth)
    report = evaluation.EvalReport(
        provenance={
            "scorer_model_id": config.scorer_model_id,
            "judge_model_id": config.model_id,
            "preprocessing": {"strip_references": True, "optional_markers": True},
            "pmi_direction": "prefix=generated,target=truth",
        }
    )
    lines: list[str] = []
    try:
        if "pmi" in metrics or "rouge" in metrics or "bleu" in metrics:
            generated_text = evaluation.preprocess_truth(generated)
            truth_text = evaluation.preprocess_truth(truth)
        if "pmi" in metrics:
            gateway = build_gateway(config)
            report.normalized_pmi = evaluation.normalized_pmi(
                generated_text, truth_text, gateway
            )
            lines.append(f"pmi: normalized_pmi={report.normalized_pmi:.6f}")
        if "f1" in metrics:
            pairs_data = json.loads(Path(args.pairs).read_text(encoding="utf-8"))
            record = evaluation.PairingRecord.from_json_dict(pairs_data)
            tally = evaluation.tally_pairings(record, generated, truth)
            report.precision, report.recall, report.f1 = evaluation.qual_scores(tally)
            lines.append(
                f"f1: precision={report.precision:.4f} "
                f"recall={report.recall:.4f} f1={report.f1:.4f}"
            )
        if "judge" in metrics:
            gateway = build_gateway(config)
            result = evaluation.llm_judge(gateway, generated, truth, config.model_id)
            report.judge_precision = result.precision
            report.judge_recall = result.recall
            report.judge_f1 = result.f1
            report.provenance["judge_verdicts"] = {
                "generated_included_in_truth": [
                    {"name": name, "included": included}
                    for name, included in result.forward_verdicts
                ],
                "truth_covered_by_generated": [
                    {"name": name, "included": included}
                    for name, included in result.reverse_verdicts
                ],
            }
            lines.append(
                f"judge: precision={result.precision:.4f} "
                f"recall={result.recall:.4f} f1={result.f1:.4f}"
            )
        if "rouge" in metrics:
            report.rouge_l = evaluation.rouge_l(generated_text, truth_text)
            lines.append(f"rouge: rouge_l={report.rouge_l:.6f}")
        if "bleu" in metrics:
            report.bleu = evaluation.bleu(generated_text, truth_text)
            lines.append(f"bleu: bleu={report.bleu:.6f}")
    except (evaluation.EvaluationError, pipeline.MalformedOutputError, GatewayError) as exc:
        print(f"error: evaluate: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else _default_out(config, "eval_report.json")
    _write_json(out, report.to_json_dict())
    for line in lines:
        print(line)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_run_config(args)
    try:
        grid = [int(v) for v in args.samples_grid.split(",") if v.strip()]
    except ValueError:
        raise UsageError("--samples-grid must be a comma list of integers") from None
    if not grid or any(v not in SAMPLE_CHOICES for v in grid):
        raise UsageError(f"--samples-grid values must be from {SAMPLE_CHOICES}")
    category = _category_from_args(args)
    truth = load_graph_json(args.truth)
    truth_text = evaluation.preprocess_truth(truth)

    def run_cell(n: int):
        gateway = build_gateway(config)
        cfg = pipeline.PipelineConfig(n_products=n, model_id=config.model_id)
        graph, report = pipeline.run_pipeline(gateway, category, cfg)
        generated_text = evaluation.preprocess_truth(graph)
        score = evaluation.normalized_pmi(generated_text, truth_text, gateway)
        return score, report

    def safe_cell(n: int):
        try:
            return run_cell(n)
        except (pipeline.PipelineError, evaluation.EvaluationError, GatewayError) as exc:
            print(f"cell n_samples={n} failed: {exc}", file=sys.stderr)
            return None

    if config.parallelism > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(safe_cell, grid))
    else:
        results = [safe_cell(n) for n in grid]

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["category", "n_samples", "normalized_pmi", "cost_usd", "duration_ms"])
    for n, result in zip(grid, results):
        if result is None:
            writer.writerow([category.name, n, "", "", ""])
        else:
            score, report = result
            writer.writerow(
                [category.name, n, f"{score:.6f}", f"{report.total_cost_usd:.6f}",
                 report.duration_ms]
            )
    out = Path(args.out) if args.out else _default_out(config, f"{_slug(category.name)}.ablation.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buffer.getvalue(), encoding="utf-8")
    print(f"wrote {out}")
    if all(result is None for result in results):
        print("error: every grid cell failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def export_dot(graph: ProcessFlowGraph) -> str:
    """Deterministic DOT rendering: one cluster per phase, solid main edges,
    dashed sub edges."""
    order = topological_order(graph)
    ids = {nid: f"n{i}" for i, nid in enumerate(order)}
    known = graph.node_map()
    lines = ["digraph pfg {", "  rankdir=LR;", "  node [shape=box];"]
    for phase in PHASES:
        lines.append(f"  subgraph cluster_{phase.value} {{")
        lines.append(f'    label="{phase.value}";')
        for nid in order:
            node = known[nid]
            if node.phase == phase:
                label = _dot_escape(node.name) + f"\\n[{phase.value}]"
                lines.append(f'    {ids[nid]} [label="{label}"];')
        lines.append("  }")
    for a, b in sorted(graph.main_edges, key=lambda e: (ids[e[0]], ids[e[1]])):
        lines.append(f"  {ids[a]} -> {ids[b]};")
    for a, b in sorted(graph.sub_edges, key=lambda e: (ids[e[0]], ids[e[1]])):
        lines.append(f"  {ids[a]} -> {ids[b]} [style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_export(args: argparse.Namespace) -> int:
    try:
        graph = load_graph_json(args.infile)
    except (ValueError, OSError) as exc:
        print(f"error: export: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    rendered = export_dot(graph)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rendered, encoding="utf-8")
        print(f"wrote {out}")
    else:
        sys.stdout.write(rendered)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file mirroring the run configuration")
    parser.add_argument("--provider", choices=PROVIDER_CHOICES)
    parser.add_argument("--model", help="chat model id")
    parser.add_argument("--scorer-model", help="log-prob scoring model id")
    parser.add_argument("--embed-model", help="embedding model id")
    parser.add_argument("--cache-mode", choices=CACHE_MODES)
    parser.add_argument("--cache-dir", help="transcript cache directory")
    parser.add_argument("--parallelism", type=int)
    parser.add_argument("--price-table", help="JSON price table path")
    parser.add_argument("--out-dir", help="default output directory")


def _add_category_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--category", required=True, help="product category name")
    parser.add_argument("--description", default="", help="product category description")
    parser.add_argument("--cpc", action="append", default=None,
                        help="UN CPC code (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfgkit",
        description="Generate and evaluate life-cycle process flow graphs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run the staged generation workflow")
    _add_category_options(p)
    p.add_argument("--samples", type=int, choices=SAMPLE_CHOICES, default=15)
    p.add_argument("--out", help="output PFG JSON path")
    p.add_argument("--report", help="output run report path")
    _add_run_options(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("baseline", help="run a single-prompt baseline generator")
    _add_category_options(p)
    p.add_argument("--method", required=True, choices=baselines.BASELINE_KINDS)
    p.add_argument("--example-file", help="example document for the one-shot method")
    p.add_argument("--out", help="output PFG JSON path")
    p.add_argument("--report", help="output run report path")
    _add_run_options(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="compare a generated PFG against a ground truth PFG")
    p.add_argument("--generated", required=True, help="generated PFG JSON path")
    p.add_argument("--truth", required=True, help="ground-truth PFG JSON path")
    p.add_argument("--metrics", required=True,
                   help=f"comma list from {{{','.join(METRIC_CHOICES)}}}")
    p.add_argument("--pairs", help="pairing JSON path (required for f1)")
    p.add_argument("--out", help="output EvalReport JSON path")
    _add_run_options(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep the sample-product count and emit CSV")
    _add_category_options(p)
    p.add_argument("--samples-grid", default="3,6,9,12,15")
    p.add_argument("--truth", required=True, help="ground-truth PFG JSON path for scoring")
    p.add_argument("--out", help="output CSV path")
    _add_run_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="export a PFG to Graphviz DOT")
    p.add_argument("--in", dest="infile", required=True, help="PFG JSON path")
    p.add_argument("--format", choices=("dot",), default="dot")
    p.add_argument("--out", help="output path (stdout if omitted)")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
