"""Greedy evaluation with both oracle metrics, plus quote-wrap instrumentation."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import protocol
from .errors import BackendError
from .external import oracle_free_score, oracle_ref_score
from .policy import QUOTE_PAIRS, generate, strip_quote_pair
from .task import CipherSpec

log = logging.getLogger(__name__)


def detect_extraneous_quotes(answer_text: str) -> bool:
    """True iff the whole answer sits inside one matching straight or curly double-quote pair."""
    text = answer_text.strip()
    return any(len(text) >= 2 and text.startswith(left) and text.endswith(right)
               for left, right in QUOTE_PAIRS)


@dataclass
class EvalReport:
    ref_score: dict  # direction -> mean reference-based oracle score (raw answers)
    free_score: dict  # direction -> mean reference-free oracle score (raw answers)
    aggregated: float
    exact_match: float
    format_rate: float
    quote_wrap_rate: float
    mean_answer_tokens: float
    raw_score: float
    stripped_score: float
    stripped_ref_score: dict = field(default_factory=dict)
    stripped_free_score: dict = field(default_factory=dict)
    n_prompts: int = 0
    coverage: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "EvalReport":
        return cls(**obj)


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else 0.0


def _aggregate(ref: dict, free: dict) -> float:
    cells = [ref[d] for d in sorted(ref)] + [free[d] for d in sorted(free)]
    return _mean(cells)


def evaluate(backend, prompts, cipher: Optional[CipherSpec], temperature: float = 0.0,
             max_tokens: int = 64) -> EvalReport:
    """Decode every prompt greedily and score the extracted answers.

    Malformed replies score zero on both metrics. Each metric is also
    computed after stripping one surrounding quote pair, so a quote-wrapping
    policy shows up as a gap between ``raw_score`` and ``stripped_score``.
    Backend failures shrink ``coverage`` instead of aborting.
    """
    cells = defaultdict(lambda: defaultdict(list))
    exact, formatted, quoted, answer_tokens = [], [], [], []
    coverage = 0
    for p in prompts:
        try:
            gen = generate(backend, protocol.render_actor_prompt(p.tgt_lang, p.src_text),
                           temperature, max_tokens, seed=0)
        except BackendError as e:
            log.warning("evaluation of %s failed: %s", p.id, e)
            continue
        coverage += 1
        ref = p.ref_text if p.ref_text is not None else cipher.translate(p.src_text)
        verdict = protocol.check_format(gen.text)
        formatted.append(verdict.ok)
        cell = cells[p.direction]
        if not verdict.ok:
            for key in ("ref", "free", "ref_s", "free_s"):
                cell[key].append(0.0)
            exact.append(False)
            continue
        answer = protocol.extract_answer(gen.text, verdict)
        stripped = strip_quote_pair(answer)
        quoted.append(detect_extraneous_quotes(answer))
        answer_tokens.append(len(answer.split()))
        exact.append(answer.split() == ref.split())
        cell["ref"].append(oracle_ref_score(p.src_text, answer, ref))
        cell["ref_s"].append(oracle_ref_score(p.src_text, stripped, ref))
        if cipher is not None:
            cell["free"].append(oracle_free_score(p.src_text, answer, cipher))
            cell["free_s"].append(oracle_free_score(p.src_text, stripped, cipher))

    ref = {d: _mean(c["ref"]) for d, c in cells.items()}
    free = {d: _mean(c["free"]) for d, c in cells.items() if cipher is not None}
    ref_s = {d: _mean(c["ref_s"]) for d, c in cells.items()}
    free_s = {d: _mean(c["free_s"]) for d, c in cells.items() if cipher is not None}
    aggregated = _aggregate(ref, free)
    return EvalReport(
        ref_score=dict(sorted(ref.items())),
        free_score=dict(sorted(free.items())),
        aggregated=aggregated,
        exact_match=_mean(exact),
        format_rate=_mean(formatted),
        quote_wrap_rate=_mean(quoted),
        mean_answer_tokens=_mean(answer_tokens),
        raw_score=aggregated,
        stripped_score=_aggregate(ref_s, free_s),
        stripped_ref_score=dict(sorted(ref_s.items())),
        stripped_free_score=dict(sorted(free_s.items())),
        n_prompts=len(prompts),
        coverage=coverage,
    )


def select_best_checkpoint(reports) -> int:
    """Step with the highest aggregated score; ties go to the earliest step.

    ``reports`` is a mapping or sequence of ``(step, EvalReport | float)``.
    """
    items = list(reports.items()) if isinstance(reports, dict) else list(reports)
    if not items:
        raise ValueError("need at least one report")

    def score(r):
        return r.aggregated if isinstance(r, EvalReport) else float(r)

    best_step, best = None, -np.inf
    for step, report in sorted(items, key=lambda kv: kv[0]):
        s = score(report)
        if s > best:
            best_step, best = step, s
    return best_step


def format_report(report: EvalReport) -> str:
    rows = []
    for d in report.ref_score:
        rows.append((d, report.ref_score[d], report.free_score.get(d, float("nan")),
                     report.stripped_ref_score.get(d, float("nan"))))
    lines = [f"{'direction':<14}{'ref':>8}{'free':>8}{'ref(strip)':>12}"]
    lines += [f"{d:<14}{r:>8.4f}{f:>8.4f}{s:>12.4f}" for d, r, f, s in rows]
    lines.append("")
    for name in ("aggregated", "raw_score", "stripped_score", "exact_match", "format_rate",
                 "quote_wrap_rate", "mean_answer_tokens"):
        lines.append(f"{name:<20}{getattr(report, name):.4f}")
    lines.append(f"{'coverage':<20}{report.coverage}/{report.n_prompts}")
    return "\n".join(lines)


def write_report(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
