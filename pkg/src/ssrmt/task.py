"""Synthetic cipher-translation corpus.

Two toy languages share no tokens: LangA uses ``a0..a{N-1}``, LangB uses
``b0..b{N-1}``. A seeded bijection maps one onto the other token by token, so
every source sentence has exactly one correct translation in each direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInput
from .protocol import TranslationPrompt

LANG_A = "LangA"
LANG_B = "LangB"


@dataclass(frozen=True)
class CipherSpec:
    v_src: tuple
    v_tgt: tuple
    mapping: dict  # v_src token -> v_tgt token
    seed: int

    def __post_init__(self):
        if set(self.v_src) & set(self.v_tgt):
            raise InvalidInput("vocabularies must be disjoint")
        if sorted(self.mapping) != sorted(self.v_src) or sorted(self.mapping.values()) != sorted(self.v_tgt):
            raise InvalidInput("mapping must be a bijection v_src -> v_tgt")

    @property
    def inverse(self) -> dict:
        return {t: s for s, t in self.mapping.items()}

    @property
    def languages(self) -> dict:
        return {LANG_A: self.v_src, LANG_B: self.v_tgt}

    def language_of(self, token: str) -> str | None:
        if token in self._src_set:
            return LANG_A
        if token in self._tgt_set:
            return LANG_B
        return None

    @property
    def _src_set(self):
        return frozenset(self.v_src)

    @property
    def _tgt_set(self):
        return frozenset(self.v_tgt)

    def translate(self, text: str) -> str:
        """Apply the cipher in whichever direction the source language dictates."""
        tokens = text.split()
        if not tokens:
            raise InvalidInput("empty source text")
        if all(t in self.mapping for t in tokens):
            table = self.mapping
        else:
            table = self.inverse
            if not all(t in table for t in tokens):
                bad = [t for t in tokens if t not in self.mapping and t not in table]
                raise InvalidInput(f"out-of-vocabulary or mixed-language source tokens: {bad or tokens}")
        return " ".join(table[t] for t in tokens)

    def to_json(self) -> dict:
        return {"v_src": list(self.v_src), "v_tgt": list(self.v_tgt), "mapping": dict(self.mapping), "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "CipherSpec":
        return cls(tuple(obj["v_src"]), tuple(obj["v_tgt"]), dict(obj["mapping"]), int(obj["seed"]))


@dataclass
class Corpus:
    parallel: list  # (pair_id, src_tokens, tgt_tokens)
    monolingual: list  # TranslationPrompt, both directions
    split: dict = field(default_factory=dict)  # {"train": [pair ids], "test": [pair ids]}

    def _prompts_for(self, pair_ids) -> list:
        keep = set(pair_ids)
        return [p for p in self.monolingual if pair_id_of(p) in keep]

    @property
    def train(self) -> list:
        return self._prompts_for(self.split.get("train", ()))

    @property
    def test(self) -> list:
        return self._prompts_for(self.split.get("test", ()))


def pair_id_of(prompt: TranslationPrompt) -> str:
    return prompt.id.rsplit("-", 1)[0]


def make_cipher(seed: int, vocab_size: int) -> CipherSpec:
    if vocab_size < 2:
        raise InvalidInput("vocab_size must be >= 2")
    rng = np.random.default_rng(seed)
    v_src = tuple(f"a{i}" for i in range(vocab_size))
    v_tgt = tuple(f"b{i}" for i in range(vocab_size))
    perm = rng.permutation(vocab_size)
    return CipherSpec(v_src, v_tgt, {v_src[i]: v_tgt[int(perm[i])] for i in range(vocab_size)}, seed)


def monolingualize(pairs: Iterable[Sequence]) -> list:
    """Split each (pair_id, src_tokens, tgt_tokens) into an A->B and a B->A prompt."""
    prompts = []
    for pair_id, src, tgt in pairs:
        a, b = " ".join(src), " ".join(tgt)
        prompts.append(TranslationPrompt(f"{pair_id}-ab", LANG_A, LANG_B, a, ref_text=b))
        prompts.append(TranslationPrompt(f"{pair_id}-ba", LANG_B, LANG_A, b, ref_text=a))
    return prompts


def gen_corpus(
    seed: int = 7,
    vocab_size: int = 20,
    n_pairs: int = 500,
    len_min: int = 5,
    len_max: int = 12,
    test_fraction: float = 0.5,
):
    """Return ``(CipherSpec, Corpus)``; a pure function of its arguments."""
    if vocab_size < 2:
        raise InvalidInput("vocab_size must be >= 2")
    if n_pairs < 1:
        raise InvalidInput("n_pairs must be >= 1")
    if len_min < 1 or len_min > len_max:
        raise InvalidInput(f"need 1 <= len_min <= len_max, got {len_min}, {len_max}")
    if not 0.0 <= test_fraction < 1.0:
        raise InvalidInput("test_fraction must lie in [0, 1)")

    cipher = make_cipher(seed, vocab_size)
    rng = np.random.default_rng([seed, 1])
    parallel = []
    for k in range(n_pairs):
        length = int(rng.integers(len_min, len_max + 1))
        src = [cipher.v_src[int(i)] for i in rng.integers(0, vocab_size, size=length)]
        parallel.append((f"p{k:05d}", src, [cipher.mapping[t] for t in src]))

    ids = [pid for pid, _, _ in parallel]
    order = np.random.default_rng([seed, 2]).permutation(n_pairs)
    n_test = int(round(test_fraction * n_pairs))
    test_ids = sorted(ids[int(i)] for i in order[:n_test])
    train_ids = sorted(ids[int(i)] for i in order[n_test:])
    corpus = Corpus(parallel, monolingualize(parallel), {"train": train_ids, "test": test_ids})
    return cipher, corpus


def write_jsonl(path, prompts) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for p in prompts:
            f.write(json.dumps(p.to_json(), ensure_ascii=False) + "\n")


def read_jsonl(path) -> list:
    with Path(path).open(encoding="utf-8") as f:
        return [TranslationPrompt.from_json(json.loads(line)) for line in f if line.strip()]


def write_cipher(path, cipher: CipherSpec) -> None:
    Path(path).write_text(json.dumps(cipher.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_cipher(path) -> CipherSpec:
    return CipherSpec.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
