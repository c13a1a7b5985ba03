"""Group-relative advantages, the clipped surrogate, and its analytic gradient.

Traces are ragged: one 1-D array of per-decision log-probs per candidate.
Every per-token quantity is averaged within a candidate first, then across
the candidates of the group.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInput, UnsupportedBackend

RATIO_LEVELS = ("token", "sequence")


@dataclass
class GrpoConfig:
    epsilon: float = 0.2
    beta: float = 0.0
    entropy_coef: float = 0.0
    ratio_level: str = "token"
    sigma_min: float = 1e-8
    inner_updates: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidInput("epsilon must be > 0")
        if self.beta < 0 or self.entropy_coef < 0:
            raise InvalidInput("beta and entropy_coef must be >= 0")
        if self.ratio_level not in RATIO_LEVELS:
            raise InvalidInput(f"ratio_level must be one of {RATIO_LEVELS}")
        if not self.sigma_min > 0:
            raise InvalidInput("sigma_min must be > 0")
        if int(self.inner_updates) != self.inner_updates or self.inner_updates < 1:
            raise InvalidInput("inner_updates must be an integer >= 1")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AdvantageSet:
    values: np.ndarray
    group_mean: float
    group_std: float

    def __len__(self):
        return len(self.values)


def group_advantages(rewards: Sequence[float], sigma_min: float = 1e-8) -> AdvantageSet:
    """Standardize rewards within the group (population std); flat groups get zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise InvalidInput("need a nonempty 1-D group of rewards")
    if not np.all(np.isfinite(r)):
        raise InvalidInput("rewards must be finite")
    mean = float(r.mean())
    std = float(r.std())
    if std <= sigma_min:
        return AdvantageSet(np.zeros_like(r), mean, std)
    return AdvantageSet((r - mean) / std, mean, std)


def _as_trace(trace, name) -> list:
    out = [np.asarray(t, dtype=np.float64) for t in trace]
    if any(t.ndim != 1 for t in out):
        raise InvalidInput(f"{name}: every candidate trace must be 1-D")
    return out


def _check_aligned(a, b, what):
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise InvalidInput(f"{what}: traces are not aligned in shape")


def _adv_values(advantages) -> np.ndarray:
    return np.asarray(advantages.values if isinstance(advantages, AdvantageSet) else advantages, dtype=np.float64)


def _clip_terms(ratio, adv, eps):
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * adv
    return unclipped, clipped


def _nested_mean(per_token: Sequence[np.ndarray]) -> float:
    return float(np.mean([t.mean() if t.size else 0.0 for t in per_token]))


def surrogate_terms(logp_new, logp_old, advantages, config: GrpoConfig) -> list:
    """Per-candidate clipped terms (token level: one per decision)."""
    new, old = _as_trace(logp_new, "logp_new"), _as_trace(logp_old, "logp_old")
    _check_aligned(new, old, "clipped_surrogate")
    adv = _adv_values(advantages)
    if len(adv) != len(new):
        raise InvalidInput(f"{len(adv)} advantages for {len(new)} candidates")
    out = []
    for n, o, a in zip(new, old, adv):
        if config.ratio_level == "token":
            ratio = np.exp(n - o)
        else:
            ratio = np.array([np.exp(n.sum() - o.sum())])
        out.append(np.minimum(*_clip_terms(ratio, a, config.epsilon)))
    return out


def kl_terms(logp_theta, logp_ref) -> list:
    theta, ref = _as_trace(logp_theta, "logp_theta"), _as_trace(logp_ref, "logp_ref")
    _check_aligned(theta, ref, "kl_penalty")
    # k3 estimator: e^x - x - 1 >= 0 with x = log(ref/theta)
    return [np.expm1(r - t) - (r - t) for t, r in zip(theta, ref)]


def kl_penalty(logp_theta, logp_ref) -> float:
    terms = kl_terms(logp_theta, logp_ref)
    if not terms:
        raise InvalidInput("empty trace")
    return max(0.0, _nested_mean(terms))


def clipped_surrogate(logp_new, logp_old, advantages, config: Optional[GrpoConfig] = None,
                      logp_ref=None, entropies=None) -> float:
    """Group objective: mean clipped surrogate, minus beta*KL, plus entropy bonus."""
    config = config or GrpoConfig()
    objective = _nested_mean(surrogate_terms(logp_new, logp_old, advantages, config))
    if config.beta > 0:
        if logp_ref is None:
            raise InvalidInput("beta > 0 needs reference log-probs")
        objective -= config.beta * kl_penalty(logp_new, logp_ref)
    if config.entropy_coef > 0:
        if entropies is None:
            raise InvalidInput("entropy_coef > 0 needs per-decision entropies")
        objective += config.entropy_coef * _nested_mean(_as_trace(entropies, "entropies"))
    return objective


def surrogate_weights(logp_new, logp_old, advantages, config: GrpoConfig, logp_ref=None) -> list:
    """d(group objective)/d(logp_new) per decision, excluding the entropy bonus."""
    new, old = _as_trace(logp_new, "logp_new"), _as_trace(logp_old, "logp_old")
    _check_aligned(new, old, "surrogate_weights")
    adv = _adv_values(advantages)
    g = len(new)
    eps = config.epsilon
    weights = []
    for n, o, a in zip(new, old, adv):
        t = len(n)
        if config.ratio_level == "token":
            ratio = np.exp(n - o)
            unclipped, clipped = _clip_terms(ratio, a, eps)
            inside = (ratio >= 1 - eps) & (ratio <= 1 + eps)
            active = inside | (unclipped <= clipped)
            w = np.where(active, ratio * a, 0.0) / (t * g)
        else:
            ratio = float(np.exp(n.sum() - o.sum()))
            unclipped, clipped = _clip_terms(ratio, a, eps)
            inside = 1 - eps <= ratio <= 1 + eps
            active = inside or unclipped <= clipped
            w = np.full(t, (ratio * a if active else 0.0) / g)
        weights.append(w)
    if config.beta > 0:
        ref = _as_trace(logp_ref, "logp_ref")
        _check_aligned(new, ref, "kl")
        for i, (n, r) in enumerate(zip(new, ref)):
            # d/d(lt) [e^(lr-lt) - (lr-lt) - 1] = 1 - e^(lr-lt)
            weights[i] = weights[i] - config.beta * (1.0 - np.exp(r - n)) / (len(n) * g)
    return weights


def _require_trainable(backend):
    if not getattr(backend, "can_train", False):
        raise UnsupportedBackend(f"{getattr(backend, 'identity', backend)!r} does not support differentiation")


def _group_inputs(backend, group, config, ref_backend):
    texts = group.texts
    new = [backend.score_logprobs(group.actor_prompt, t) for t in texts]
    ref = None
    if config.beta > 0:
        if ref_backend is None:
            raise InvalidInput("beta > 0 needs a reference backend")
        ref = [ref_backend.score_logprobs(group.actor_prompt, t) for t in texts]
    ent = None
    if config.entropy_coef > 0:
        ent = [backend.decision_entropies(group.actor_prompt, t) for t in texts]
    return new, ref, ent


def grpo_objective(backend, groups, config: GrpoConfig, ref_backend=None) -> float:
    """J_GRPO averaged over the batch of groups, evaluated at the backend's current params."""
    if not groups:
        raise InvalidInput("empty batch")
    total = 0.0
    for group in groups:
        new, ref, ent = _group_inputs(backend, group, config, ref_backend)
        total += clipped_surrogate(new, group.old_logprobs, group.advantages, config, ref, ent)
    return total / len(groups)


def grpo_gradient(backend, groups, config: GrpoConfig, ref_backend=None):
    """Gradient of ``-J_GRPO`` with respect to every learnable parameter.

    Rewards and advantages enter as constants; nothing is differentiated
    through the judge.
    """
    _require_trainable(backend)
    if not groups:
        raise InvalidInput("empty batch")
    grad = backend.params.zeros_like()
    scale = 1.0 / len(groups)
    for group in groups:
        new, ref, _ = _group_inputs(backend, group, config, ref_backend)
        weights = surrogate_weights(new, group.old_logprobs, group.advantages, config, ref)
        g = len(new)
        for text, w, n in zip(group.texts, weights, new):
            dent = None
            if config.entropy_coef > 0:
                dent = np.full(len(n), config.entropy_coef / (len(n) * g))
            if not np.any(w) and dent is None:
                continue
            backend.backward(group.actor_prompt, text, w * scale,
                             None if dent is None else dent * scale, out=grad)
    return grad.with_vector(-grad.to_vector())
