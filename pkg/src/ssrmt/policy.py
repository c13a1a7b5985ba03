"""Model backends that serve both the actor and the judge role.

:class:`ToyBackend` is a small differentiable stand-in for an LLM on the cipher
task. A completion is produced by a fixed sequence of decisions:

1. format  -- wrap the reply in think/answer tags, or emit bare text
2. copy    -- echo the source untranslated (wrong language), or translate
3. quote   -- wrap the answer content in ASCII double quotes
4. one categorical draw per source token from that token's row of logits
   (skipped when copying)

Each decision has a log-probability under the current parameters; the list of
them is the completion's log-prob trace. The judge role scores a candidate by
the policy's own mean probability of the candidate tokens, so whatever the
actor learns the judge learns too.

:class:`HttpChatBackend` posts chat-completions-style requests and can only
generate.
"""

from __future__ import annotations

import logging
import os
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import requests

from . import protocol
from .errors import (
    BackendError,
    InvalidCompletion,
    InvalidInput,
    ProtocolMismatch,
    UnsupportedBackend,
)

log = logging.getLogger(__name__)

QUOTE_PAIRS = (('"', '"'), ("“", "”"))


@dataclass
class GenerationResult:
    text: str
    token_logprobs: Optional[np.ndarray] = None
    seed_used: Optional[int] = None


class PolicyBackend(ABC):
    """The model M_self. ``can_train`` implies ``can_logprob``."""

    name = "abstract"
    version = "0"
    can_generate = True
    can_logprob = False
    can_train = False

    @property
    def identity(self) -> str:
        return f"{self.name}/{self.version}"

    @abstractmethod
    def generate(self, prompt_text: str, temperature: float = 1.0, max_tokens: int = 64,
                 seed: Optional[int] = None) -> GenerationResult:
        ...

    def score_logprobs(self, prompt_text: str, completion_text: str) -> np.ndarray:
        raise UnsupportedBackend(f"{self.identity} cannot score log-probabilities")


def generate(backend: PolicyBackend, prompt_text: str, temperature: float, max_tokens: int,
             seed: Optional[int] = None) -> GenerationResult:
    if max_tokens < 1:
        raise InvalidInput("max_tokens must be >= 1")
    if temperature < 0:
        raise InvalidInput("temperature must be >= 0")
    return backend.generate(prompt_text, temperature=temperature, max_tokens=max_tokens, seed=seed)


def score_logprobs(backend: PolicyBackend, prompt_text: str, completion_text: str) -> np.ndarray:
    return backend.score_logprobs(prompt_text, completion_text)


# ---------------------------------------------------------------------------
# toy policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyVocab:
    lang_a: str
    lang_b: str
    tokens_a: tuple
    tokens_b: tuple

    def __post_init__(self):
        if len(self.tokens_a) != len(self.tokens_b):
            raise InvalidInput("toy vocabularies must have equal size")
        object.__setattr__(self, "_index_a", {t: i for i, t in enumerate(self.tokens_a)})
        object.__setattr__(self, "_index_b", {t: i for i, t in enumerate(self.tokens_b)})

    @property
    def size(self) -> int:
        return len(self.tokens_a)

    def direction_for(self, tgt_lang: str) -> str:
        if tgt_lang == self.lang_b:
            return "ab"
        if tgt_lang == self.lang_a:
            return "ba"
        raise ProtocolMismatch(f"unknown target language {tgt_lang!r}")

    def source_index(self, direction):
        return self._index_a if direction == "ab" else self._index_b

    def target_index(self, direction):
        return self._index_b if direction == "ab" else self._index_a

    def target_tokens(self, direction):
        return self.tokens_b if direction == "ab" else self.tokens_a

    def langs(self, direction):
        return (self.lang_a, self.lang_b) if direction == "ab" else (self.lang_b, self.lang_a)

    def to_json(self) -> dict:
        return {"lang_a": self.lang_a, "lang_b": self.lang_b,
                "tokens_a": list(self.tokens_a), "tokens_b": list(self.tokens_b)}

    @classmethod
    def from_json(cls, obj) -> "ToyVocab":
        return cls(obj["lang_a"], obj["lang_b"], tuple(obj["tokens_a"]), tuple(obj["tokens_b"]))

    @classmethod
    def from_cipher(cls, cipher) -> "ToyVocab":
        from .task import LANG_A, LANG_B
        return cls(LANG_A, LANG_B, tuple(cipher.v_src), tuple(cipher.v_tgt))


_ARRAY_FIELDS = ("ab", "ba", "format_logit", "quote_logit", "copy_logit")


@dataclass
class ToyPolicyParams:
    """Learnable state of the toy policy (also used as the gradient container).

    ``ab[i, j]`` is the logit of emitting LangB token ``j`` for LangA token
    ``i``; ``ba`` is the reverse direction. The three scalar logits drive the
    format, quote and copy decisions through a sigmoid.
    """

    vocab: ToyVocab
    ab: np.ndarray
    ba: np.ndarray
    format_logit: float = 0.0
    quote_logit: float = 0.0
    copy_logit: float = 0.0

    def __post_init__(self):
        n = self.vocab.size
        self.ab = np.asarray(self.ab, dtype=np.float64)
        self.ba = np.asarray(self.ba, dtype=np.float64)
        for name in ("ab", "ba"):
            if getattr(self, name).shape != (n, n):
                raise InvalidInput(f"{name} must have shape {(n, n)}, got {getattr(self, name).shape}")
        self.format_logit = float(self.format_logit)
        self.quote_logit = float(self.quote_logit)
        self.copy_logit = float(self.copy_logit)

    def matrix(self, direction: str) -> np.ndarray:
        return self.ab if direction == "ab" else self.ba

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.ab.ravel(), self.ba.ravel(),
                               [self.format_logit, self.quote_logit, self.copy_logit]])

    def with_vector(self, vec) -> "ToyPolicyParams":
        vec = np.asarray(vec, dtype=np.float64)
        n = self.vocab.size
        if vec.shape != (2 * n * n + 3,):
            raise InvalidInput(f"parameter vector must have length {2 * n * n + 3}, got {vec.shape}")
        return ToyPolicyParams(self.vocab, vec[:n * n].reshape(n, n).copy(),
                               vec[n * n:2 * n * n].reshape(n, n).copy(), *vec[2 * n * n:])

    def zeros_like(self) -> "ToyPolicyParams":
        n = self.vocab.size
        return ToyPolicyParams(self.vocab, np.zeros((n, n)), np.zeros((n, n)))

    def copy(self) -> "ToyPolicyParams":
        return replace(self, ab=self.ab.copy(), ba=self.ba.copy())

    def arrays(self) -> dict:
        return {
            "ab": self.ab,
            "ba": self.ba,
            "format_logit": np.array(self.format_logit),
            "quote_logit": np.array(self.quote_logit),
            "copy_logit": np.array(self.copy_logit),
        }

    def norm(self) -> float:
        return float(np.linalg.norm(self.to_vector()))


@dataclass(frozen=True)
class ToyInit:
    """Starting point of the toy policy, a crude "pretrained" model.

    Rows put ``prior_strength`` extra logit on the correct cipher token, so
    the policy's own preference (and hence its judge) leans the right way,
    while ``copy_prob`` makes it mostly echo the source untranslated.
    """

    prior_strength: float = 1.0
    init_noise: float = 0.1
    format_prob: float = 0.5
    quote_prob: float = 0.05
    copy_prob: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("format_prob", "quote_prob", "copy_prob"):
            p = getattr(self, name)
            if not 0.0 < p < 1.0:
                raise InvalidInput(f"{name} must lie strictly inside (0, 1), got {p}")


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def init_params(cipher, init: ToyInit = ToyInit()) -> ToyPolicyParams:
    vocab = ToyVocab.from_cipher(cipher)
    n = vocab.size
    rng = np.random.default_rng([init.seed, 99])
    ab = init.init_noise * rng.standard_normal((n, n))
    ba = init.init_noise * rng.standard_normal((n, n))
    for src, tgt in cipher.mapping.items():
        i, j = vocab.tokens_a.index(src), vocab.tokens_b.index(tgt)
        ab[i, j] += init.prior_strength
        ba[j, i] += init.prior_strength
    return ToyPolicyParams(vocab, ab, ba, logit(init.format_prob), logit(init.quote_prob), logit(init.copy_prob))


def uniform_params(vocab: ToyVocab, format_logit=0.0, quote_logit=-20.0, copy_logit=-20.0) -> ToyPolicyParams:
    n = vocab.size
    return ToyPolicyParams(vocab, np.zeros((n, n)), np.zeros((n, n)), format_logit, quote_logit, copy_logit)


def saturated_params(cipher, strength=20.0, format_logit=20.0, quote_logit=-20.0, copy_logit=-20.0):
    """Near-deterministic correct translator; the standard 'perfect policy' fixture."""
    p = init_params(cipher, ToyInit(prior_strength=strength, init_noise=0.0))
    p.format_logit, p.quote_logit, p.copy_logit = format_logit, quote_logit, copy_logit
    return p


def _log_sigmoid(z: float) -> float:
    return -float(np.logaddexp(0.0, -z))


def _sigmoid(z: float) -> float:
    return float(np.exp(_log_sigmoid(z)))


def _log_softmax(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=-1, keepdims=True)
    shifted = rows - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class _Decisions:
    direction: str
    fmt: int
    copy: int
    quote: int
    src_idx: np.ndarray
    tgt_idx: np.ndarray  # empty when copying
    src_tokens: tuple = field(default=())


def _think_text(src_lang: str, tgt_lang: str) -> str:
    return f"I need to translate this sentence from {src_lang} to {tgt_lang}."


def _render(vocab: ToyVocab, d: _Decisions) -> str:
    if d.copy:
        tokens = d.src_tokens[:len(d.src_idx)]
    else:
        targets = vocab.target_tokens(d.direction)
        tokens = [targets[j] for j in d.tgt_idx]
    content = " ".join(tokens)
    if d.quote:
        content = f'"{content}"'
    if not d.fmt:
        return content
    src_lang, tgt_lang = vocab.langs(d.direction)
    return f"<think>{_think_text(src_lang, tgt_lang)}</think><answer>{content}</answer>"


def _parse_actor(vocab: ToyVocab, prompt_text: str):
    tgt_lang, src_text = protocol.parse_actor_prompt(prompt_text)
    direction = vocab.direction_for(tgt_lang)
    index = vocab.source_index(direction)
    tokens = tuple(src_text.split())
    if not tokens or any(t not in index for t in tokens):
        raise ProtocolMismatch(f"source text is not in the {vocab.langs(direction)[0]} vocabulary")
    return direction, tokens, np.array([index[t] for t in tokens], dtype=np.int64)


def _decision_logprobs(params: ToyPolicyParams, d: _Decisions) -> np.ndarray:
    heads = [
        _log_sigmoid(params.format_logit if d.fmt else -params.format_logit),
        _log_sigmoid(params.copy_logit if d.copy else -params.copy_logit),
        _log_sigmoid(params.quote_logit if d.quote else -params.quote_logit),
    ]
    if d.copy:
        return np.array(heads)
    logp = _log_softmax(params.matrix(d.direction)[d.src_idx])
    return np.concatenate([heads, logp[np.arange(len(d.tgt_idx)), d.tgt_idx]])


def _binary_entropy(z: float) -> float:
    p = _sigmoid(z)
    return -(p * _log_sigmoid(z) + (1 - p) * _log_sigmoid(-z))


def _decision_entropies(params: ToyPolicyParams, d: _Decisions) -> np.ndarray:
    heads = [_binary_entropy(params.format_logit), _binary_entropy(params.copy_logit),
             _binary_entropy(params.quote_logit)]
    if d.copy:
        return np.array(heads)
    logp = _log_softmax(params.matrix(d.direction)[d.src_idx])
    return np.concatenate([heads, -(np.exp(logp) * logp).sum(axis=1)])


def _sample_binary(z: float, temperature: float, rng) -> int:
    if temperature == 0:
        return int(z >= 0.0)  # exact ties resolve to the event
    return int(rng.random() < _sigmoid(z / temperature))


def toy_act(params: ToyPolicyParams, actor_prompt: str, temperature: float = 1.0,
            seed: Optional[int] = None, max_tokens: int = 64) -> GenerationResult:
    """One actor sample. ``max_tokens`` caps the number of answer tokens.

    Recorded log-probs are under the untempered policy, so they match
    :meth:`ToyBackend.score_logprobs` for the same parameters.
    """
    direction, src_tokens, src_idx = _parse_actor(params.vocab, actor_prompt)
    rng = np.random.default_rng(seed)
    fmt = _sample_binary(params.format_logit, temperature, rng)
    copy = _sample_binary(params.copy_logit, temperature, rng)
    quote = _sample_binary(params.quote_logit, temperature, rng)
    src_idx = src_idx[:max_tokens]
    if copy:
        tgt_idx = np.zeros(0, dtype=np.int64)
    else:
        rows = params.matrix(direction)[src_idx]
        if temperature == 0:
            tgt_idx = rows.argmax(axis=1)
        else:
            probs = np.exp(_log_softmax(rows / temperature))
            u = rng.random(len(src_idx))
            tgt_idx = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), rows.shape[1] - 1)
    d = _Decisions(direction, fmt, copy, quote, src_idx, tgt_idx, src_tokens)
    return GenerationResult(_render(params.vocab, d), _decision_logprobs(params, d), seed)


def strip_quote_pair(text: str) -> str:
    for left, right in QUOTE_PAIRS:
        if len(text) >= 2 and text.startswith(left) and text.endswith(right):
            return text[len(left):-len(right)]
    return text


def toy_confidence(params: ToyPolicyParams, direction: str, src_text: str, candidate: str,
                   ref_text: Optional[str] = None) -> float:
    """Unrounded judge score in [0, 1]."""
    vocab = params.vocab
    src_index, tgt_index = vocab.source_index(direction), vocab.target_index(direction)
    src = src_text.split()
    if any(t not in src_index for t in src):
        raise ProtocolMismatch("judge source is not in the expected vocabulary")
    cand = strip_quote_pair(candidate.strip()).split()
    # zero rules: wrong length or any token outside the target language
    if len(cand) != len(src) or any(t not in tgt_index for t in cand):
        return 0.0
    rows = params.matrix(direction)[[src_index[t] for t in src]]
    probs = np.exp(_log_softmax(rows))
    conf = float(probs[np.arange(len(cand)), [tgt_index[t] for t in cand]].mean())
    if ref_text is not None:
        ref = ref_text.split()
        agree = float(np.mean([c == r for c, r in zip(cand, ref)])) if len(ref) == len(cand) else 0.0
        conf = 0.5 * (conf + agree)
    return conf


def toy_judge(params: ToyPolicyParams, judge_prompt: str) -> GenerationResult:
    """Deterministic self-evaluation; temperature is always zero."""
    fields = protocol.parse_judge_prompt(judge_prompt)
    direction = params.vocab.direction_for(fields["tgt_lang"])
    conf = toy_confidence(params, direction, fields["src_text"], fields["translated_text"], fields["ref_text"])
    score = int(np.floor(100.0 * conf + 0.5))
    think = f"Checking each {fields['tgt_lang']} token against the {fields['src_lang']} source."
    return GenerationResult(f"<think>{think}</think><answer>{score}</answer>", None, None)


class ToyBackend(PolicyBackend):
    name = "toy-cipher"
    version = "1"
    can_logprob = True

    def __init__(self, params: ToyPolicyParams, trainable: bool = True):
        self.params = params
        self.can_train = trainable

    def generate(self, prompt_text, temperature=1.0, max_tokens=64, seed=None) -> GenerationResult:
        if protocol.is_actor_prompt(prompt_text):
            return toy_act(self.params, prompt_text, temperature, seed, max_tokens)
        return toy_judge(self.params, prompt_text)

    def _decode(self, prompt_text: str, completion_text: str) -> _Decisions:
        vocab = self.params.vocab
        direction, src_tokens, src_idx = _parse_actor(vocab, prompt_text)
        verdict = protocol.check_format(completion_text)
        if verdict.ok:
            fmt, content = 1, protocol.extract_answer(completion_text, verdict)
        else:
            fmt, content = 0, completion_text
        quote = int(len(content) >= 2 and content[0] == '"' and content[-1] == '"')
        if quote:
            content = content[1:-1]
        tokens = content.split()
        if not 1 <= len(tokens) <= len(src_tokens):
            raise InvalidCompletion(f"completion has {len(tokens)} tokens for a {len(src_tokens)}-token source")
        tgt_index = vocab.target_index(direction)
        if tuple(tokens) == src_tokens[:len(tokens)]:
            d = _Decisions(direction, fmt, 1, quote, src_idx[:len(tokens)], np.zeros(0, dtype=np.int64), src_tokens)
        elif all(t in tgt_index for t in tokens):
            d = _Decisions(direction, fmt, 0, quote, src_idx[:len(tokens)],
                           np.array([tgt_index[t] for t in tokens], dtype=np.int64), src_tokens)
        else:
            raise InvalidCompletion("completion contains tokens outside the target vocabulary")
        if _render(vocab, d) != completion_text:
            raise InvalidCompletion("completion is not producible by the toy decision structure")
        return d

    def score_logprobs(self, prompt_text, completion_text) -> np.ndarray:
        return _decision_logprobs(self.params, self._decode(prompt_text, completion_text))

    def decision_entropies(self, prompt_text, completion_text) -> np.ndarray:
        return _decision_entropies(self.params, self._decode(prompt_text, completion_text))

    def backward(self, prompt_text, completion_text, dlogp, dentropy=None, out=None) -> ToyPolicyParams:
        """Accumulate ``sum_t dlogp[t] * grad(logp_t) + dentropy[t] * grad(H_t)`` into ``out``."""
        p = self.params
        d = self._decode(prompt_text, completion_text)
        out = out if out is not None else p.zeros_like()
        dlogp = np.asarray(dlogp, dtype=np.float64)
        dent = np.zeros_like(dlogp) if dentropy is None else np.asarray(dentropy, dtype=np.float64)
        if dlogp.shape != dent.shape:
            raise InvalidInput("dlogp and dentropy must align")
        n_heads = 3
        expected = n_heads + (0 if d.copy else len(d.tgt_idx))
        if dlogp.shape != (expected,):
            raise InvalidInput(f"expected {expected} decision weights, got {dlogp.shape}")

        for k, (attr, outcome) in enumerate((("format_logit", d.fmt), ("copy_logit", d.copy),
                                             ("quote_logit", d.quote))):
            z = getattr(p, attr)
            s = _sigmoid(z)
            g = dlogp[k] * (outcome - s) + dent[k] * (-z * s * (1 - s))
            setattr(out, attr, getattr(out, attr) + g)

        if not d.copy:
            logp = _log_softmax(p.matrix(d.direction)[d.src_idx])
            probs = np.exp(logp)
            ent = -(probs * logp).sum(axis=1)
            w = dlogp[n_heads:, None]
            rows_grad = -w * probs
            rows_grad[np.arange(len(d.tgt_idx)), d.tgt_idx] += dlogp[n_heads:]
            rows_grad += dent[n_heads:, None] * (-probs * (logp + ent[:, None]))
            np.add.at(out.matrix(d.direction), d.src_idx, rows_grad)
        return out


def apply_gradient(params: ToyPolicyParams, gradient: ToyPolicyParams, learning_rate: float) -> ToyPolicyParams:
    """Return ``params + learning_rate * gradient`` (ascent direction supplied by the caller)."""
    if not isinstance(gradient, ToyPolicyParams):
        raise InvalidInput("gradient must be a ToyPolicyParams")
    if gradient.ab.shape != params.ab.shape or gradient.ba.shape != params.ba.shape:
        raise InvalidInput("gradient shape does not match parameters")
    return params.with_vector(params.to_vector() + learning_rate * gradient.to_vector())


# ---------------------------------------------------------------------------
# remote backend
# ---------------------------------------------------------------------------


class HttpChatBackend(PolicyBackend):
    """Chat-completions client; generation only.

    POSTs ``{model, messages, temperature, max_tokens, seed}`` and returns the
    first choice's message content.
    """

    name = "http-chat"
    version = "1"

    def __init__(self, url: str, model: str = "default", api_key_env: Optional[str] = "SSRMT_API_KEY",
                 timeout: float = 60.0, retries: int = 2, backoff: float = 0.5,
                 session: Optional[requests.Session] = None):
        if not url:
            raise InvalidInput("backend URL is not configured")
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._session = session or requests.Session()

    @property
    def identity(self) -> str:
        return f"{self.name}/{self.version}:{self.model}@{self.url}"

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env) if self.api_key_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def generate(self, prompt_text, temperature=1.0, max_tokens=64, seed=None) -> GenerationResult:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt_text}],
            "temperature": temperature,
            "max_tokens": max_tokens,
            "seed": seed,
        }
        last_status, last_err = None, None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._session.post(self.url, json=body, headers=self._headers(), timeout=self.timeout)
                last_status = resp.status_code
                if resp.status_code >= 500 or resp.status_code == 429:
                    last_err = f"HTTP {resp.status_code}"
                    continue
                resp.raise_for_status()
                choice = resp.json()["choices"][0]
                text = choice["message"]["content"] if "message" in choice else choice["text"]
                return GenerationResult(text or "", None, seed)
            except requests.HTTPError as e:
                raise BackendError(f"{self.url}: {e}", attempts=attempt + 1, last_status=last_status,
                                   retryable=False) from e
            except (requests.RequestException, ValueError, KeyError, IndexError, TypeError) as e:
                last_err = e
                log.warning("backend %s attempt %d failed: %s", self.url, attempt + 1, e)
        raise BackendError(f"{self.url} failed after {self.retries + 1} attempts: {last_err}",
                           attempts=self.retries + 1, last_status=last_status)
