#!/usr/bin/env python3
"""Offline evaluation sweep over the bundled fixture corpus.

For every category with a generated/truth pair in tests/fixtures, compute the
pairing-based precision/recall/F1 (when a pairing file exists) plus normalized
PMI, ROUGE-L and BLEU under the deterministic mock scorer, and print one row
per category. No network access is required.

    python3 scripts/run_fixture_eval.py
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from pfgkit.evaluation import (  # noqa: E402
    PairingRecord,
    bleu,
    normalized_pmi,
    preprocess_truth,
    qual_scores,
    rouge_l,
    tally_pairings,
)
from pfgkit.gateway import Gateway  # noqa: E402
from pfgkit.model import load_graph_json  # noqa: E402
from pfgkit.providers import MockProvider  # noqa: E402

FIXTURES = ROOT / "tests" / "fixtures"

CASES = [
    ("Wine", "golden/wine.pfg.json", "corpus/wine_truth.pfg.json", None),
    ("Railways", "corpus/railways_generated.pfg.json",
     "corpus/railways_truth.pfg.json", "pairs/railways_pairs.json"),
    ("Bottled Water", "corpus/bottled_water_generated.pfg.json",
     "corpus/bottled_water_truth.pfg.json", "pairs/bottled_water_pairs.json"),
]


def main() -> None:
    gateway = Gateway(MockProvider())
    header = f"{'category':<16} {'PMI':>8} {'ROUGE-L':>8} {'BLEU':>8} " \
             f"{'P':>6} {'R':>6} {'F1':>6}"
    print(header)
    print("-" * len(header))
    for name, generated_path, truth_path, pairs_path in CASES:
        generated = load_graph_json(FIXTURES / generated_path)
        truth = load_graph_json(FIXTURES / truth_path)
        generated_text = preprocess_truth(generated)
        truth_text = preprocess_truth(truth)
        score = normalized_pmi(generated_text, truth_text, gateway)
        rouge = rouge_l(generated_text, truth_text)
        blue = bleu(generated_text, truth_text)
        if pairs_path:
            record = PairingRecord.from_json_dict(
                json.loads((FIXTURES / pairs_path).read_text(encoding="utf-8"))
            )
            precision, recall, f1 = qual_scores(tally_pairings(record, generated, truth))
            quals = f"{precision:>6.2f} {recall:>6.2f} {f1:>6.2f}"
        else:
            quals = f"{'-':>6} {'-':>6} {'-':>6}"
        print(f"{name:<16} {score:>8.4f} {rouge:>8.4f} {blue:>8.4f} {quals}")


if __name__ == "__main__":
    main()
