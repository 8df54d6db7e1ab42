"""Comparison metrics between a generated graph and a ground-truth graph:
normalized log-prob PMI, pairing-based precision/recall/F1, an LLM judge,
ROUGE-L and BLEU."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .gateway import ChatRequest, Gateway
from .model import ProcessFlowGraph, parse_document, serialize_graph
from .pipeline import (
    MalformedOutputError,
    SYSTEM_PROMPT,
    extract_json,
    load_prompt,
    render_template,
)


class EvaluationError(Exception):
    pass


class DegenerateSelfPmiError(EvaluationError):
    """The ground truth has zero self-PMI, so normalization is undefined."""


class PairingValidationError(EvaluationError):
    pass


# -- canonical text preprocessing ---------------------------------------------

# Ground-truth listings carry citation debris that the generated side never
# has; these rules remove it without any LLM rephrasing.
_STRIP_PATTERNS = (
    re.compile(r"\[[^\]]*\]"),                      # bracketed references
    re.compile(r"https?://\S+"),                     # links
    re.compile(r"\(\s*see\s+section\s+[\d.]+\s*\)", re.IGNORECASE),
    re.compile(r"see\s+section\s+[\d.]+", re.IGNORECASE),
    re.compile(r"see\s+calculation\s+[\d.]+", re.IGNORECASE),
)


def _strip_references(line: str) -> str:
    for pattern in _STRIP_PATTERNS:
        line = pattern.sub("", line)
    line = re.sub(r"[ \t]{2,}", " ", line)
    return line.rstrip()


def preprocess_truth(doc: ProcessFlowGraph | str) -> str:
    """Produce the canonical scoring text: phase sections in order, nodes in
    topological order, optional markers kept, reference debris stripped."""
    graph = parse_document(doc) if isinstance(doc, str) else doc
    text = serialize_graph(graph)
    return "\n".join(_strip_references(line) for line in text.splitlines()) + "\n"


# -- log-prob PMI ---------------------------------------------------------------


def pmi(generated: str, truth: str, gateway: Gateway, model_id: str | None = None) -> float:
    """log P(truth | generated) - log P(truth), both from per-token log-probs
    of the scoring model (natural log)."""
    if not truth:
        raise ValueError("truth text must be nonempty")
    conditioned = gateway.score_continuation(generated, truth, model_id).target_logprob_sum
    unconditioned = gateway.score_continuation("", truth, model_id).target_logprob_sum
    return conditioned - unconditioned


def normalized_pmi(generated: str, truth: str, gateway: Gateway,
                   model_id: str | None = None) -> float:
    """PMI(generated, truth) / PMI(truth, truth).

    A scorer that ignores its prefix yields 0/0, which is reported as 0.0 (the
    texts share no measurable information); a nonzero PMI over a zero self-PMI
    is degenerate and raises instead of dividing.
    """
    raw = pmi(generated, truth, gateway, model_id)
    self_pmi = pmi(truth, truth, gateway, model_id)
    if self_pmi == 0.0:
        if raw == 0.0:
            return 0.0
        raise DegenerateSelfPmiError("PMI(truth, truth) is zero")
    return raw / self_pmi


# -- pairing-based scores --------------------------------------------------------

NA = "N/A"
PAIRING_LABELS = ("match", "subprocess", "specific", "wrong", "missing")
# a ground-truth node in several pairings counts once, under its strongest label
_LABEL_PRECEDENCE = {"match": 0, "subprocess": 1, "specific": 2}


@dataclass(frozen=True)
class Pairing:
    generated: str  # node id or "N/A"
    truth: str      # node id or "N/A"
    label: str

    def __post_init__(self):
        if self.label not in PAIRING_LABELS:
            raise ValueError(f"unknown pairing label {self.label!r}")


@dataclass(frozen=True)
class PairingRecord:
    pairs: tuple[Pairing, ...]
    source: str = "human-file"

    @classmethod
    def from_json_dict(cls, data: Mapping, source: str = "human-file") -> "PairingRecord":
        try:
            pairs = tuple(
                Pairing(generated=str(p["generated"]), truth=str(p["truth"]),
                        label=str(p["label"]))
                for p in data["pairs"]
            )
        except (KeyError, TypeError) as exc:
            raise PairingValidationError(f"invalid pairing file: {exc}") from exc
        return cls(pairs=pairs, source=source)


@dataclass(frozen=True)
class PairingTally:
    n_match: int
    n_subprocess: int
    n_specific: int
    n_wrong: int
    n_groundtruth: int
    n_generated: int

    def __post_init__(self):
        if self.n_match + self.n_subprocess + self.n_specific > self.n_groundtruth:
            raise ValueError("labeled ground-truth nodes exceed the ground-truth total")
        if self.n_wrong > self.n_generated:
            raise ValueError("wrong-labeled nodes exceed the generated total")


def validate_pairing_record(record: PairingRecord, generated: ProcessFlowGraph,
                            truth: ProcessFlowGraph) -> None:
    """Reject records that break the coverage or label rules before tallying."""
    generated_ids = set(generated.node_map())
    truth_ids = set(truth.node_map())
    covered_generated: set[str] = set()
    covered_truth: set[str] = set()
    for pair in record.pairs:
        if pair.generated == NA and pair.truth == NA:
            raise PairingValidationError("pair with N/A on both sides")
        if pair.generated != NA and pair.generated not in generated_ids:
            raise PairingValidationError(f"unknown generated node id {pair.generated!r}")
        if pair.truth != NA and pair.truth not in truth_ids:
            raise PairingValidationError(f"unknown truth node id {pair.truth!r}")
        if (pair.label == "wrong") != (pair.truth == NA):
            raise PairingValidationError(
                f"label 'wrong' must pair a generated node with N/A truth: {pair}"
            )
        if (pair.label == "missing") != (pair.generated == NA):
            raise PairingValidationError(
                f"label 'missing' must pair a truth node with N/A generated: {pair}"
            )
        if pair.generated != NA:
            covered_generated.add(pair.generated)
        if pair.truth != NA:
            covered_truth.add(pair.truth)
    if covered_generated != generated_ids:
        missing = sorted(generated_ids - covered_generated)
        raise PairingValidationError(f"generated nodes not covered by any pair: {missing}")
    if covered_truth != truth_ids:
        missing = sorted(truth_ids - covered_truth)
        raise PairingValidationError(f"truth nodes not covered by any pair: {missing}")


def tally_pairings(record: PairingRecord, generated: ProcessFlowGraph,
                   truth: ProcessFlowGraph) -> PairingTally:
    validate_pairing_record(record, generated, truth)
    best_label: dict[str, int] = {}
    wrong_nodes: set[str] = set()
    for pair in record.pairs:
        if pair.label in _LABEL_PRECEDENCE and pair.truth != NA:
            rank = _LABEL_PRECEDENCE[pair.label]
            if pair.truth not in best_label or rank < best_label[pair.truth]:
                best_label[pair.truth] = rank
        elif pair.label == "wrong":
            wrong_nodes.add(pair.generated)
    counts = Counter(best_label.values())
    return PairingTally(
        n_match=counts.get(0, 0),
        n_subprocess=counts.get(1, 0),
        n_specific=counts.get(2, 0),
        n_wrong=len(wrong_nodes),
        n_groundtruth=len(truth.nodes),
        n_generated=len(generated.nodes),
    )


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def qual_scores(tally: PairingTally) -> tuple[float, float, float]:
    """(precision, recall, f1): recall = labeled truth fraction, precision =
    1 - wrong fraction of generated."""
    if tally.n_groundtruth <= 0 or tally.n_generated <= 0:
        raise EvaluationError("tally requires nonzero ground-truth and generated totals")
    recall = (tally.n_specific + tally.n_subprocess + tally.n_match) / tally.n_groundtruth
    precision = 1.0 - tally.n_wrong / tally.n_generated
    return precision, recall, f1_score(precision, recall)


# -- LLM as a judge ----------------------------------------------------------------


@dataclass(frozen=True)
class JudgeResult:
    precision: float
    recall: float
    f1: float
    forward_verdicts: tuple[tuple[str, bool], ...]  # generated node -> included in truth?
    reverse_verdicts: tuple[tuple[str, bool], ...]  # truth node -> covered by generated?


def _node_lines(graph: ProcessFlowGraph) -> list[str]:
    return [f"- {n.name}: {n.description}" for n in graph.nodes]


def _judge_pass(gateway: Gateway, model_id: str, candidates: list[str],
                reference: list[str]) -> list[tuple[str, bool]]:
    prompt = render_template(
        load_prompt("judge_inclusion"),
        {
            "reference_lines": "\n".join(reference),
            "candidate_lines": "\n".join(candidates),
        },
    )
    req = ChatRequest(
        model_id=model_id,
        system_prompt=SYSTEM_PROMPT,
        user_prompt=prompt,
        temperature=0.0,
        max_tokens=2000,
        expects_json=True,
    )
    data = extract_json(gateway.chat(req).response_text)
    verdicts = data.get("verdicts")
    if not isinstance(verdicts, list) or len(verdicts) != len(candidates):
        got = len(verdicts) if isinstance(verdicts, list) else "none"
        raise MalformedOutputError(
            f"expected {len(candidates)} verdicts, got {got}"
        )
    out = []
    for verdict in verdicts:
        if not isinstance(verdict, dict) or not isinstance(verdict.get("included"), bool):
            raise MalformedOutputError(f"verdict entry malformed: {verdict!r}")
        out.append((str(verdict.get("name", "")), verdict["included"]))
    return out


def llm_judge(gateway: Gateway, generated: ProcessFlowGraph, truth: ProcessFlowGraph,
              model_id: str) -> JudgeResult:
    """Two passes: generated-against-truth gives precision, truth-against-
    generated gives recall; per-process verdicts are kept for audit."""
    if not generated.nodes or not truth.nodes:
        raise EvaluationError("judge requires nonempty graphs on both sides")
    forward = _judge_pass(gateway, model_id, _node_lines(generated), _node_lines(truth))
    reverse = _judge_pass(gateway, model_id, _node_lines(truth), _node_lines(generated))
    precision = sum(1 for _, included in forward if included) / len(forward)
    recall = sum(1 for _, included in reverse if included) / len(reverse)
    return JudgeResult(
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        forward_verdicts=tuple(forward),
        reverse_verdicts=tuple(reverse),
    )


# -- classical text metrics -----------------------------------------------------------

_WORD_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; whitespace and punctuation both delimit."""
    return _WORD_RE.findall(text.lower())


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[len(b)]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F-measure with beta = 1."""
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        raise EvaluationError("rouge_l requires nonempty texts after tokenization")
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


_BLEU_EPSILON = 1e-9


def bleu(candidate: str, reference: str) -> float:
    """BLEU with uniform weights over 1..4-grams (capped at the candidate
    length), clipped counts, add-epsilon smoothing on zero matches, and
    brevity penalty e^(1 - r/c) when the candidate is shorter."""
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        raise EvaluationError("bleu requires nonempty texts after tokenization")
    max_order = min(4, len(cand))
    log_precisions = []
    for n in range(1, max_order + 1):
        cand_ngrams = Counter(tuple(cand[i : i + n]) for i in range(len(cand) - n + 1))
        ref_ngrams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
        clipped = sum(min(count, ref_ngrams[gram]) for gram, count in cand_ngrams.items())
        total = len(cand) - n + 1
        numerator = clipped if clipped > 0 else _BLEU_EPSILON
        log_precisions.append(math.log(numerator / total))
    geometric = math.exp(sum(log_precisions) / max_order)
    if len(cand) < len(ref):
        brevity = math.exp(1.0 - len(ref) / len(cand))
    else:
        brevity = 1.0
    return brevity * geometric


# -- report ------------------------------------------------------------------------


@dataclass
class EvalReport:
    normalized_pmi: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    judge_precision: float | None = None
    judge_recall: float | None = None
    judge_f1: float | None = None
    rouge_l: float | None = None
    bleu: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.precision is not None and self.recall is not None and self.f1 is not None:
            if abs(self.f1 - f1_score(self.precision, self.recall)) > 1e-9:
                raise ValueError("f1 inconsistent with precision/recall")

    def to_json_dict(self) -> dict:
        return {
            "normalized_pmi": self.normalized_pmi,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "judge_precision": self.judge_precision,
            "judge_recall": self.judge_recall,
            "judge_f1": self.judge_f1,
            "rouge_l": self.rouge_l,
            "bleu": self.bleu,
            "provenance": self.provenance,
        }
