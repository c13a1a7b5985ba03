import numpy as np
import pytest

from ssrmt import protocol
from ssrmt.grpo import group_advantages
from ssrmt.policy import ToyBackend, ToyInit, init_params
from ssrmt.task import gen_corpus

ACCEPTANCE_LINES = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus7():
    return gen_corpus(seed=7, vocab_size=20, n_pairs=500, len_min=5, len_max=12, test_fraction=0.5)


@pytest.fixture(scope="session")
def small_corpus():
    return gen_corpus(seed=3, vocab_size=5, n_pairs=40, len_min=2, len_max=4, test_fraction=0.5)


class Group:
    """Minimal rollout group for gradient checks."""

    def __init__(self, actor_prompt, candidates, rewards):
        self.actor_prompt = actor_prompt
        self.candidates = candidates
        self.advantages = group_advantages(rewards)

    @property
    def texts(self):
        return [c.text for c in self.candidates]

    @property
    def old_logprobs(self):
        return [c.token_logprobs for c in self.candidates]


def sample_groups(backend, prompts, G, seed):
    rng = np.random.default_rng(seed)
    groups = []
    for b, p in enumerate(prompts):
        actor = protocol.render_actor_prompt(p.tgt_lang, p.src_text)
        cands = [backend.generate(actor, 1.0, 64, seed=seed * 1000 + b * G + j) for j in range(G)]
        groups.append(Group(actor, cands, rng.normal(size=G)))
    return groups


def mixed_backend(cipher, seed):
    """Policy with every decision head well away from saturation."""
    init = ToyInit(prior_strength=0.5, init_noise=0.5, format_prob=0.6, quote_prob=0.4, copy_prob=0.3, seed=seed)
    return ToyBackend(init_params(cipher, init))
