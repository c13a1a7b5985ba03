"""The self-rewarding GRPO loop.

One step: render actor prompts, sample G candidates per prompt, build judge
prompts from the extracted answers, judge at temperature zero, parse scores,
combine rewards, normalize per group, and take one gradient step. Judging
always sees the pre-update parameters; the update happens only after every
reward in the batch is known.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import protocol
from .errors import BackendError, ConfigError, InvalidInput, ScorerUnavailable
from .evalharness import EvalReport, evaluate, select_best_checkpoint
from .grpo import AdvantageSet, GrpoConfig, group_advantages, grpo_gradient
from .policy import GenerationResult, ToyBackend, ToyPolicyParams, ToyVocab, apply_gradient, generate
from .rewards import RewardBreakdown, breakdown

log = logging.getLogger(__name__)

REWARD_MODES = ("ssr", "ssr_x", "external_only", "llm_judge_external")
METRIC_FIELDS = ("step", "mean_r_all", "mean_r_self", "format_rate", "mean_answer_tokens", "grad_norm")


@dataclass
class TrainConfig:
    batch_size: int = 128
    group_size: int = 16
    epochs: int = 4
    temp_gen: float = 1.0
    temp_judge: float = 0.0
    max_gen_tokens: int = 1024
    checkpoint_every: int = 20
    reward_mode: str = "ssr"
    judge_with_reference: bool = False
    learning_rate: float = 5e-7
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    seed: int = 0
    parallelism: int = 1
    external_fallback_zero: bool = False

    def __post_init__(self):
        if isinstance(self.grpo, dict):
            self.grpo = GrpoConfig(**self.grpo)
        if self.group_size < 1 or self.batch_size < 1:
            raise InvalidInput("group_size and batch_size must be >= 1")
        if self.epochs < 0 or self.checkpoint_every < 1 or self.max_gen_tokens < 1:
            raise InvalidInput("epochs >= 0, checkpoint_every >= 1 and max_gen_tokens >= 1 required")
        if self.reward_mode not in REWARD_MODES:
            raise InvalidInput(f"reward_mode must be one of {REWARD_MODES}, got {self.reward_mode!r}")
        if self.temp_gen < 0 or self.temp_judge < 0:
            raise InvalidInput("temperatures must be >= 0")
        if self.parallelism < 1:
            raise InvalidInput("parallelism must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        # parallelism does not affect results
        blob = {k: v for k, v in self.to_json().items() if k != "parallelism"}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


# plain SGD on batch-averaged gradients; see README for the toy step size
TOY_DEFAULTS = {"group_size": 8, "max_gen_tokens": 64, "learning_rate": 50.0}


@dataclass
class RolloutGroup:
    prompt: protocol.TranslationPrompt
    actor_prompt: str
    candidates: list  # GenerationResult
    verdicts: list
    answers: list  # extracted answer, or "" where the format gate failed
    judgments: list  # Judgment, or None where judging was skipped
    judge_prompts: list
    rewards: list = field(default_factory=list)
    advantages: Optional[AdvantageSet] = None

    @property
    def texts(self) -> list:
        return [c.text for c in self.candidates]

    @property
    def old_logprobs(self) -> list:
        return [c.token_logprobs for c in self.candidates]

    def export(self, step: int) -> dict:
        p = self.prompt
        record = {"step": step, "prompt_id": p.id, "direction": p.direction, "src": p.src_text}
        if p.ref_text is not None:
            record["ref"] = p.ref_text
        cands = []
        for i, c in enumerate(self.candidates):
            r: RewardBreakdown = self.rewards[i]
            item = {"text": c.text, "format_ok": self.verdicts[i].ok}
            if self.verdicts[i].ok:
                item["answer"] = self.answers[i]
            if self.judgments[i] is not None:
                item["judgment_text"] = self.judgments[i].raw_text
            item.update(r_self=r.r_self, r_format=r.r_format)
            if r.r_external is not None:
                item["r_external"] = r.r_external
            item.update(r_all=r.r_all, advantage=float(self.advantages.values[i]))
            if c.token_logprobs is not None:
                item["logprob_sum"] = float(np.sum(c.token_logprobs))
            cands.append(item)
        record["candidates"] = cands
        record["template_version"] = protocol.TEMPLATE_VERSION
        record["judge_with_reference"] = any(
            jp is not None and "\n" + p.tgt_lang + " reference: " in jp for jp in self.judge_prompts)
        return record


@dataclass
class StepResult:
    groups: list
    params: Optional[ToyPolicyParams]
    metrics: dict


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _pmap(fn, items, parallelism):
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def _external_reward(scorer, prompt, answer, config) -> float:
    try:
        return scorer.score(prompt.src_text, answer, prompt.ref_text)
    except ScorerUnavailable:
        if config.external_fallback_zero:
            log.warning("scorer unavailable for %s; falling back to r_external=0", prompt.id)
            return 0.0
        raise


def check_preconditions(prompts, config: TrainConfig, scorer=None, judge_backend=None) -> None:
    mode = config.reward_mode
    if mode in ("ssr_x", "external_only"):
        if scorer is None:
            raise InvalidInput(f"reward_mode={mode} needs an external scorer")
        if getattr(scorer, "kind", "reference_based") == "reference_based":
            missing = [p.id for p in prompts if p.ref_text is None]
            if missing:
                raise InvalidInput(f"reward_mode={mode} needs ref_text; missing for {len(missing)} prompts "
                                   f"(first: {missing[0]})")
    if config.judge_with_reference:
        missing = [p.id for p in prompts if p.ref_text is None]
        if missing:
            raise InvalidInput(f"judge_with_reference needs ref_text; missing for {missing[0]}")
    if mode == "llm_judge_external" and judge_backend is None:
        raise InvalidInput("reward_mode=llm_judge_external needs a frozen judge backend")


def run_step(backend, prompts, config: TrainConfig, step: int, scorer=None, judge_backend=None,
             ref_backend=None) -> StepResult:
    check_preconditions(prompts, config, scorer, judge_backend)
    G = config.group_size
    mode = config.reward_mode

    # (1)-(2) actor rollouts
    actor_prompts = [protocol.render_actor_prompt(p.tgt_lang, p.src_text) for p in prompts]
    jobs = [(b, j) for b in range(len(prompts)) for j in range(G)]
    candidates = _pmap(
        lambda bj: generate(backend, actor_prompts[bj[0]], config.temp_gen, config.max_gen_tokens,
                            seed=derive_seed(config.seed, step, bj[0], bj[1])),
        jobs, config.parallelism)

    groups = []
    for b, p in enumerate(prompts):
        cands = candidates[b * G:(b + 1) * G]
        verdicts = [protocol.check_format(c.text) for c in cands]
        answers = [protocol.extract_answer(c.text, v) if v.ok else "" for c, v in zip(cands, verdicts)]
        groups.append(RolloutGroup(p, actor_prompts[b], cands, verdicts, answers, [None] * G, [None] * G))

    # (3)-(5) judging; malformed candidates are never judged
    judge = judge_backend if mode == "llm_judge_external" else backend
    if mode != "external_only":
        judge_jobs = []
        for b, g in enumerate(groups):
            p = g.prompt
            ref = p.ref_text if config.judge_with_reference else None
            for j in range(G):
                if g.verdicts[j].ok:
                    g.judge_prompts[j] = protocol.render_judge_prompt(p.src_lang, p.tgt_lang, p.src_text,
                                                                      g.answers[j], ref)
                    judge_jobs.append((b, j))
        replies = _pmap(
            lambda bj: generate(judge, groups[bj[0]].judge_prompts[bj[1]], config.temp_judge,
                                config.max_gen_tokens, seed=derive_seed(config.seed, step, bj[0], bj[1], 1)),
            judge_jobs, config.parallelism)
        for (b, j), reply in zip(judge_jobs, replies):
            groups[b].judgments[j] = protocol.parse_score(reply.text)

    # rewards and advantages
    for g in groups:
        rewards = []
        for j in range(G):
            r_ext = None
            if mode in ("ssr_x", "external_only"):
                r_ext = _external_reward(scorer, g.prompt, g.answers[j], config) if g.verdicts[j].ok else 0.0
            rewards.append(breakdown(g.verdicts[j], g.judgments[j], r_ext))
        g.rewards = rewards
        g.advantages = group_advantages([r.r_all for r in rewards], config.grpo.sigma_min)

    # (6)-(7) update, only once every reward is in
    grad_norm = 0.0
    if getattr(backend, "can_train", False):
        for k in range(config.grpo.inner_updates):
            grad = grpo_gradient(backend, groups, config.grpo, ref_backend)
            if k == 0:
                grad_norm = grad.norm()
            backend.params = apply_gradient(backend.params, grad.with_vector(-grad.to_vector()),
                                            config.learning_rate)

    all_rewards = [r for g in groups for r in g.rewards]
    answer_lens = [len(a.split()) for g in groups for a, v in zip(g.answers, g.verdicts) if v.ok]
    metrics = {
        "step": step,
        "mean_r_all": float(np.mean([r.r_all for r in all_rewards])),
        "mean_r_self": float(np.mean([r.r_self for r in all_rewards])),
        "format_rate": float(np.mean([r.r_format for r in all_rewards])),
        "mean_answer_tokens": float(np.mean(answer_lens)) if answer_lens else 0.0,
        "grad_norm": float(grad_norm),
    }
    return StepResult(groups, getattr(backend, "params", None), metrics)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_LE_F8 = np.dtype("<f8")


def save_checkpoint(path, params: ToyPolicyParams, step: int, config: TrainConfig, metrics: list,
                    evals: Optional[dict] = None, ref_params: Optional[ToyPolicyParams] = None,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param__{k}": np.asarray(v, dtype=_LE_F8) for k, v in params.arrays().items()}
    if ref_params is not None:
        arrays.update({f"ref__{k}": np.asarray(v, dtype=_LE_F8) for k, v in ref_params.arrays().items()})
    meta = {
        "step": step,
        "rng_state": {"seed": config.seed, "next_step": step + 1},
        "config_hash": config.config_hash(),
        "config": config.to_json(),
        "metrics": metrics,
        "evals": {str(k): v.to_json() for k, v in (evals or {}).items()},
        "vocab": params.vocab.to_json(),
        "dtype": "<f8",
        "template_version": protocol.TEMPLATE_VERSION,
        **(extra or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    tmp.replace(path)
    return path


def _params_from(npz, prefix, vocab) -> ToyPolicyParams:
    return ToyPolicyParams(
        vocab,
        npz[f"{prefix}__ab"],
        npz[f"{prefix}__ba"],
        float(npz[f"{prefix}__format_logit"]),
        float(npz[f"{prefix}__quote_logit"]),
        float(npz[f"{prefix}__copy_logit"]),
    )


@dataclass
class Checkpoint:
    step: int
    params: ToyPolicyParams
    ref_params: Optional[ToyPolicyParams]
    meta: dict

    @property
    def config_hash(self) -> str:
        return self.meta["config_hash"]

    @property
    def metrics(self) -> list:
        return self.meta.get("metrics", [])

    @property
    def evals(self) -> dict:
        return {int(k): EvalReport.from_json(v) for k, v in self.meta.get("evals", {}).items()}


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["meta"]))
        vocab = ToyVocab.from_json(meta["vocab"])
        params = _params_from(npz, "param", vocab)
        ref = _params_from(npz, "ref", vocab) if "ref__ab" in npz.files else None
    return Checkpoint(meta["step"], params, ref, meta)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoints: list  # (step, path)
    metrics: list
    evals: dict = field(default_factory=dict)
    best_step: Optional[int] = None
    final_step: int = 0


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 1000 + epoch]).permutation(n)


def _write_metrics(path: Path, rows: list) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])


def _append_metrics(path: Path, row: dict) -> None:
    with path.open("a", newline="", encoding="utf-8") as f:
        csv.writer(f).writerow([row["step"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])


def _truncate_export(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip() and json.loads(line)["step"] <= last_step]
    path.write_text("".join(line + "\n" for line in keep), encoding="utf-8")


def train(backend, prompts, config: TrainConfig, out_dir=None, scorer=None, judge_backend=None,
          test_prompts=None, cipher=None, resume_from=None, max_steps: Optional[int] = None) -> TrainResult:
    """Run ``config.epochs`` passes over ``prompts``.

    Writes ``metrics.csv``, ``rollouts.jsonl`` and ``checkpoints/step_XXXXXX.npz``
    under ``out_dir`` when given. ``max_steps`` stops early (with a
    checkpoint), which together with ``resume_from`` reproduces an
    uninterrupted run exactly on the toy backend.
    """
    if not prompts:
        raise InvalidInput("training corpus is empty")
    check_preconditions(prompts, config, scorer, judge_backend)

    n = len(prompts)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    trainable = getattr(backend, "can_train", False)
    ref_backend = None
    if trainable and config.grpo.beta > 0:
        ref_backend = ToyBackend(backend.params.copy(), trainable=False)

    metrics, evals, checkpoints = [], {}, []
    start = 1
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        if ckpt.config_hash != config.config_hash():
            raise ConfigError(f"checkpoint config hash {ckpt.config_hash} does not match {config.config_hash()}")
        backend.params = ckpt.params.copy()
        if ref_backend is not None and ckpt.ref_params is not None:
            ref_backend.params = ckpt.ref_params.copy()
        metrics = [dict(r) for r in ckpt.metrics]
        evals = ckpt.evals
        start = ckpt.step + 1

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = export_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        metrics_path, export_path = out / "metrics.csv", out / "rollouts.jsonl"
        _write_metrics(metrics_path, metrics)
        if resume_from is not None:
            _truncate_export(export_path, start - 1)
        else:
            export_path.write_text("", encoding="utf-8")

    def checkpoint(step, with_eval=True):
        if with_eval and trainable and test_prompts:
            evals[step] = evaluate(backend, test_prompts, cipher, 0.0, config.max_gen_tokens)
        if out is not None and trainable:
            path = save_checkpoint(out / "checkpoints" / f"step_{step:06d}.npz", backend.params, step, config,
                                   metrics, evals, ref_backend.params if ref_backend else None,
                                   {"backend": backend.identity})
            checkpoints.append((step, path))
        else:
            checkpoints.append((step, None))

    last = start - 1
    stop = total_steps if max_steps is None else min(total_steps, max_steps)
    for step in range(start, stop + 1):
        epoch, k = divmod(step - 1, steps_per_epoch)
        order = epoch_order(n, config.seed, epoch)
        batch = [prompts[int(i)] for i in order[k * config.batch_size:(k + 1) * config.batch_size]]
        try:
            result = run_step(backend, batch, config, step, scorer, judge_backend, ref_backend)
        except (BackendError, ScorerUnavailable):
            log.error("step %d aborted; last completed step is %d", step, last)
            if out is not None and trainable and last >= 1 and not any(s == last for s, _ in checkpoints):
                checkpoint(last, with_eval=False)
            raise
        metrics.append(result.metrics)
        if metrics_path is not None:
            _append_metrics(metrics_path, result.metrics)
            with export_path.open("a", encoding="utf-8") as f:
                for g in result.groups:
                    f.write(json.dumps(g.export(step), ensure_ascii=False) + "\n")
        log.info("step %d/%d r_all=%.4f r_self=%.4f format=%.3f", step, total_steps,
                 result.metrics["mean_r_all"], result.metrics["mean_r_self"], result.metrics["format_rate"])
        last = step
        if step % config.checkpoint_every == 0 or step == total_steps:
            checkpoint(step)
        elif step == stop:
            checkpoint(step, with_eval=False)

    best = select_best_checkpoint(evals) if evals else None
    return TrainResult(checkpoints, metrics, evals, best, last)
