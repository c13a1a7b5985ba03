"""Actor/judge prompt rendering and the think/answer response format.

The same system preamble heads both prompts, so a judge reply is parsed with
the same format gate as an actor reply.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Optional, Tuple

from .errors import FormatError, InvalidInput, ProtocolMismatch

TEMPLATE_VERSION = "v1"

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
_TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

# first maximal decimal number, optional sign, no exponent
_NUMBER_RE = re.compile(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)")
_TAG_LIKE_RE = re.compile(r"<(/?)(think|answer)>", re.IGNORECASE)


@dataclass(frozen=True)
class TranslationPrompt:
    id: str
    src_lang: str
    tgt_lang: str
    src_text: str
    ref_text: Optional[str] = None

    def __post_init__(self):
        if self.src_lang == self.tgt_lang:
            raise InvalidInput(f"{self.id}: src_lang and tgt_lang must differ ({self.src_lang!r})")
        if not self.src_text or not self.src_text.strip():
            raise InvalidInput(f"{self.id}: empty src_text")

    @property
    def direction(self) -> str:
        return f"{self.src_lang}->{self.tgt_lang}"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "src_lang": self.src_lang,
            "tgt_lang": self.tgt_lang,
            "src_text": self.src_text,
            "ref_text": self.ref_text,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TranslationPrompt":
        return cls(
            id=str(obj["id"]),
            src_lang=obj["src_lang"],
            tgt_lang=obj["tgt_lang"],
            src_text=obj["src_text"],
            ref_text=obj.get("ref_text"),
        )


class FailureReason(str, Enum):
    MISSING_THINK = "missing_think"
    MISSING_ANSWER = "missing_answer"
    WRONG_ORDER = "wrong_order"
    DUPLICATE_TAGS = "duplicate_tags"
    EXTRA_TEXT = "extra_text"
    EMPTY_ANSWER = "empty_answer"


@dataclass(frozen=True)
class FormatVerdict:
    ok: bool
    answer_span: Optional[Tuple[int, int]] = None
    failure_reason: Optional[FailureReason] = None


@dataclass(frozen=True)
class Judgment:
    raw_text: str
    score: Optional[float] = None
    parse_ok: bool = False


@lru_cache(maxsize=None)
def _asset(name: str) -> str:
    return resources.files("ssrmt.templates").joinpath(name).read_text(encoding="utf-8")


def _preamble() -> str:
    return _asset(f"preamble_{TEMPLATE_VERSION}.txt")


def escape_tags(text: str) -> str:
    """Neutralise think/answer tags so a candidate cannot forge the judge's format."""
    return _TAG_LIKE_RE.sub(lambda m: f"&lt;{m.group(1)}{m.group(2)}&gt;", text)


def render_actor_prompt(tgt_lang: str, src_text: str) -> str:
    if not src_text or not src_text.strip():
        raise InvalidInput("src_text must be nonempty")
    if not tgt_lang:
        raise InvalidInput("tgt_lang must be nonempty")
    body = _asset(f"actor_{TEMPLATE_VERSION}.txt").format(tgt_lang=tgt_lang, src_text=src_text)
    return (_preamble() + body).rstrip("\n")


def render_judge_prompt(
    src_lang: str,
    tgt_lang: str,
    src_text: str,
    translated_text: str,
    ref_text: Optional[str] = None,
) -> str:
    """Render the self-evaluation prompt.

    ``translated_text`` must be the extracted answer, not the full response.
    When ``ref_text`` is given, a ``"{tgt_lang} reference: ..."`` line follows
    the translation line.
    """
    for name, value in (("src_text", src_text), ("translated_text", translated_text)):
        if not value or not value.strip():
            raise InvalidInput(f"{name} must be nonempty")
    if ref_text is not None and not ref_text.strip():
        raise InvalidInput("ref_text, when given, must be nonempty")
    reference_line = "" if ref_text is None else f"{tgt_lang} reference: {escape_tags(ref_text)}\n"
    body = _asset(f"judge_{TEMPLATE_VERSION}.txt").format(
        src_lang=src_lang,
        tgt_lang=tgt_lang,
        src_text=escape_tags(src_text),
        translated_text=escape_tags(translated_text),
        reference_line=reference_line,
    )
    return (_preamble() + body).rstrip("\n")


_ACTOR_RE = re.compile(
    r"\nUser:\nTranslate the following text to (?P<tgt>[^\n]+):\n(?P<src>.*)\nAssistant:\Z", re.DOTALL
)
_JUDGE_RE = re.compile(
    r"\nUser:\nScore the following translation from (?P<src_lang>[^\n]+?) to (?P<tgt_lang>[^\n]+?) on a "
    r"continuous scale.*?\n\n(?P=src_lang) source: (?P<src>[^\n]*)\n"
    r"(?P=tgt_lang) translation: (?P<mt>[^\n]*)\n"
    r"(?:(?P=tgt_lang) reference: (?P<ref>[^\n]*)\n)?Assistant:\Z",
    re.DOTALL,
)


def parse_actor_prompt(prompt_text: str) -> Tuple[str, str]:
    """Inverse of :func:`render_actor_prompt`: returns ``(tgt_lang, src_text)``."""
    if not prompt_text.startswith(_preamble()):
        raise ProtocolMismatch("prompt does not start with the think/answer preamble")
    m = _ACTOR_RE.match(prompt_text, len(_preamble()))
    if m is None:
        raise ProtocolMismatch("not an actor prompt")
    return m.group("tgt"), m.group("src")


def parse_judge_prompt(prompt_text: str) -> dict:
    """Inverse of :func:`render_judge_prompt` for single-line texts."""
    if not prompt_text.startswith(_preamble()):
        raise ProtocolMismatch("prompt does not start with the think/answer preamble")
    m = _JUDGE_RE.match(prompt_text, len(_preamble()))
    if m is None:
        raise ProtocolMismatch("not a judge prompt")
    return {
        "src_lang": m.group("src_lang"),
        "tgt_lang": m.group("tgt_lang"),
        "src_text": m.group("src"),
        "translated_text": m.group("mt"),
        "ref_text": m.group("ref"),
    }


def is_actor_prompt(prompt_text: str) -> bool:
    try:
        parse_actor_prompt(prompt_text)
    except ProtocolMismatch:
        return False
    return True


def check_format(response_text: str) -> FormatVerdict:
    """Strict gate: one think block, then one answer block, whitespace elsewhere."""
    counts = {tag: response_text.count(tag) for tag in _TAGS}
    if any(c > 1 for c in counts.values()):
        return FormatVerdict(False, failure_reason=FailureReason.DUPLICATE_TAGS)
    if not counts[THINK_OPEN] or not counts[THINK_CLOSE]:
        return FormatVerdict(False, failure_reason=FailureReason.MISSING_THINK)
    if not counts[ANSWER_OPEN] or not counts[ANSWER_CLOSE]:
        return FormatVerdict(False, failure_reason=FailureReason.MISSING_ANSWER)

    to = response_text.index(THINK_OPEN)
    tc = response_text.index(THINK_CLOSE)
    ao = response_text.index(ANSWER_OPEN)
    ac = response_text.index(ANSWER_CLOSE)
    if not (to < tc < ao < ac):
        return FormatVerdict(False, failure_reason=FailureReason.WRONG_ORDER)

    outside = (
        response_text[:to],
        response_text[tc + len(THINK_CLOSE):ao],
        response_text[ac + len(ANSWER_CLOSE):],
    )
    if any(part.strip() for part in outside):
        return FormatVerdict(False, failure_reason=FailureReason.EXTRA_TEXT)

    start, end = ao + len(ANSWER_OPEN), ac
    if not response_text[start:end].strip():
        return FormatVerdict(False, failure_reason=FailureReason.EMPTY_ANSWER)
    return FormatVerdict(True, answer_span=(start, end))


def extract_answer(response_text: str, verdict: Optional[FormatVerdict] = None) -> str:
    verdict = verdict if verdict is not None else check_format(response_text)
    if not verdict.ok:
        raise FormatError(f"response failed format check: {verdict.failure_reason.value}")
    start, end = verdict.answer_span
    return response_text[start:end].strip()


def parse_score(judge_response_text: str) -> Judgment:
    """Pull the first number out of the judge's answer block and clamp it to [0, 100]."""
    verdict = check_format(judge_response_text)
    if not verdict.ok:
        return Judgment(raw_text=judge_response_text)
    m = _NUMBER_RE.search(extract_answer(judge_response_text, verdict))
    if m is None:
        return Judgment(raw_text=judge_response_text)
    score = min(100.0, max(0.0, float(m.group(0))))
    return Judgment(raw_text=judge_response_text, score=score, parse_ok=True)
