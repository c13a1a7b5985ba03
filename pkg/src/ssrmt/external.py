"""External reward sources.

Two analytic oracles stand in for trained MT metrics (one needs a reference,
one derives it from the cipher), and :class:`HttpScorer` talks to a real
scoring service over a small JSON protocol::

    POST {"src": ..., "mt": ..., "ref": ...}  ->  {"score": float}
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import requests

from .errors import InvalidInput, ScorerUnavailable
from .task import CipherSpec

log = logging.getLogger(__name__)

REFERENCE_BASED = "reference_based"
REFERENCE_FREE = "reference_free"


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Edit distance over arbitrary token sequences (unit costs)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def oracle_ref_score(src_text: str, mt_text: str, ref_text: Optional[str]) -> float:
    """1 - normalized token-level edit distance between ``mt_text`` and ``ref_text``."""
    if ref_text is None or not ref_text.split():
        raise InvalidInput("reference-based scoring needs a nonempty ref_text")
    mt, ref = mt_text.split(), ref_text.split()
    return 1.0 - levenshtein(mt, ref) / max(len(mt), len(ref))


def oracle_free_score(src_text: str, mt_text: str, cipher: CipherSpec) -> float:
    return oracle_ref_score(src_text, mt_text, cipher.translate(src_text))


@dataclass
class RefOracleScorer:
    kind: str = REFERENCE_BASED
    identity: str = "oracle-ref/levenshtein"

    def score(self, src_text, mt_text, ref_text=None) -> float:
        return oracle_ref_score(src_text, mt_text, ref_text)


@dataclass
class FreeOracleScorer:
    cipher: CipherSpec
    kind: str = REFERENCE_FREE
    identity: str = "oracle-free/levenshtein"

    def score(self, src_text, mt_text, ref_text=None) -> float:
        return oracle_free_score(src_text, mt_text, self.cipher)


class HttpScorer:
    """Client for a COMET-style scoring service.

    Retries ``retries`` times with exponential backoff, then raises
    :class:`ScorerUnavailable`. At most ``max_concurrency`` requests are in
    flight at once across threads.
    """

    def __init__(
        self,
        url: str,
        kind: str = REFERENCE_BASED,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        max_concurrency: int = 4,
        api_key_env: Optional[str] = None,
        session: Optional[requests.Session] = None,
    ):
        if not url:
            raise InvalidInput("scorer endpoint URL is not configured")
        if kind not in (REFERENCE_BASED, REFERENCE_FREE):
            raise InvalidInput(f"unknown scorer kind {kind!r}")
        self.url = url
        self.kind = kind
        self.identity = f"http:{url}"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.api_key_env = api_key_env
        self._session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(max(1, max_concurrency))

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env) if self.api_key_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def score(self, src_text, mt_text, ref_text=None) -> float:
        if self.kind == REFERENCE_BASED and ref_text is None:
            raise InvalidInput("reference-based scorer called without ref_text")
        payload = {"src": src_text, "mt": mt_text}
        if ref_text is not None:
            payload["ref"] = ref_text

        last_err = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._session.post(self.url, json=payload, headers=self._headers(), timeout=self.timeout)
                resp.raise_for_status()
                value = float(resp.json()["score"])
            except (requests.RequestException, ValueError, KeyError, TypeError) as e:
                last_err = e
                log.warning("scorer %s attempt %d/%d failed: %s", self.url, attempt + 1, self.retries + 1, e)
                continue
            if value != value:  # NaN
                last_err = ValueError("scorer returned NaN")
                continue
            return min(1.0, max(0.0, value))
        raise ScorerUnavailable(f"{self.url} unavailable after {self.retries + 1} attempts: {last_err}",
                                attempts=self.retries + 1)


def http_score(endpoint, src_text, mt_text, ref_text=None, **kwargs) -> float:
    kind = REFERENCE_BASED if ref_text is not None else REFERENCE_FREE
    return HttpScorer(endpoint, kind=kind, **kwargs).score(src_text, mt_text, ref_text)
