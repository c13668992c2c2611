"""Soft prompts, prompt tuning against a frozen backbone, convergence rules."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binio
from . import tensor as T
from .errors import CorruptFileError, FrozenModelError, NonFiniteError, ShapeError
from .rng import substream
from .tasks import Task, encode_examples, evaluate

log = logging.getLogger(__name__)

PROMPT_MAGIC = b"PTXPRMPT"
PROMPT_VERSION = 1
INIT_STD = 0.02


@dataclass
class SoftPrompt:
    """An ``l x d`` matrix of virtual-token embeddings plus its provenance.

    ``provenance["kind"]`` is one of ``random``, ``trained``, ``projected``
    or ``warm_start``.
    """

    values: np.ndarray
    provenance: dict = field(default_factory=lambda: {"kind": "random"})
    model_digest: str = ""
    task: str = ""
    seed: int = 0

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ShapeError(f"a soft prompt is a non-empty l x d matrix, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise NonFiniteError("soft prompt contains non-finite values")

    @property
    def l(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def tensor(self) -> T.Tensor:
        return T.Tensor(self.values, _check=False)

    def content_digest(self) -> str:
        return binio.sha256(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    def concat(self) -> np.ndarray:
        return self.values.reshape(-1)


def init_prompt(l: int, d: int, mode: str | SoftPrompt = "random", seed: int = 0) -> SoftPrompt:
    """Random ``Normal(0, 0.02^2)`` prompt, or a warm-start copy of ``mode``."""
    if isinstance(mode, SoftPrompt):
        if (mode.l, mode.d) != (l, d):
            raise ShapeError(f"warm-start source has shape {(mode.l, mode.d)}, expected {(l, d)}")
        prov = {"kind": "warm_start", "source": mode.content_digest(), "source_provenance": copy.deepcopy(mode.provenance)}
        return SoftPrompt(mode.values.copy(), prov, mode.model_digest, mode.task, seed)
    if mode != "random":
        raise ValueError(f"unknown init mode {mode!r}")
    if l < 1 or d < 1:
        raise ShapeError("prompt length and dimension must be positive")
    values = substream(seed, "prompt-init").normal(0.0, INIT_STD, size=(l, d))
    return SoftPrompt(values, {"kind": "random", "seed": int(seed)}, seed=int(seed))


@dataclass
class TuneConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    max_steps: int = 2000
    eval_every: int = 100
    patience_window: int = 300
    seed: int = 0
    weight_decay: float = 0.01
    early_stop: bool = False

    def __post_init__(self):
        if self.eval_every <= 0 or self.patience_window % self.eval_every:
            raise ValueError("eval_every must divide patience_window")
        if self.max_steps < self.eval_every:
            raise ValueError("max_steps must be >= eval_every")
        if self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate and batch_size must be positive")


@dataclass
class Checkpoint:
    step: int
    train_loss: float
    dev_score: float
    wall_time: float


@dataclass
class TrainCurve:
    checkpoints: list[Checkpoint] = field(default_factory=list)
    convergence_step: int | None = None

    @property
    def steps(self) -> list[int]:
        return [c.step for c in self.checkpoints]

    @property
    def losses(self) -> list[float]:
        return [c.train_loss for c in self.checkpoints]

    @property
    def scores(self) -> list[float]:
        return [c.dev_score for c in self.checkpoints]

    def record(self, step: int, loss: float, score: float, wall: float) -> None:
        if self.checkpoints and step <= self.checkpoints[-1].step:
            raise ValueError("checkpoint steps must strictly increase")
        self.checkpoints.append(Checkpoint(step, float(loss), float(score), float(wall)))

    @property
    def final_score(self) -> float:
        return self.checkpoints[-1].dev_score

    def first_step_reaching(self, score: float) -> int | None:
        for c in self.checkpoints:
            if c.dev_score >= score:
                return c.step
        return None

    def to_dict(self) -> dict:
        return {
            "checkpoints": [[c.step, c.train_loss, c.dev_score, c.wall_time] for c in self.checkpoints],
            "convergence_step": self.convergence_step,
        }


def _converged_at(steps, losses, scores, i: int, window: int) -> bool:
    t = steps[i]
    if t + window > steps[-1]:
        return False
    later = [j for j in range(i + 1, len(steps)) if steps[j] <= t + window]
    return all(losses[j] >= losses[i] for j in later) and all(scores[j] <= scores[i] for j in later)


def detect_convergence(curve: TrainCurve, patience_window: int = 300) -> int:
    """Earliest checkpoint after which, for ``patience_window`` further steps,
    train loss never drops below it and dev score never rises above it.

    Only checkpoints with a fully observed window qualify; if none does, the
    final step is returned.
    """
    steps, losses, scores = curve.steps, curve.losses, curve.scores
    if len(steps) < 2:
        raise ValueError("convergence needs at least two checkpoints")
    for i in range(len(steps)):
        if _converged_at(steps, losses, scores, i, patience_window):
            return steps[i]
    return steps[-1]


def _has_converged(curve: TrainCurve, window: int) -> bool:
    steps, losses, scores = curve.steps, curve.losses, curve.scores
    return any(_converged_at(steps, losses, scores, i, window) for i in range(len(steps)))


def task_loss(model, prompt_tensor: T.Tensor, task: Task, examples) -> T.Tensor:
    """Negative log-likelihood of the gold output at the decode position(s).

    Classification normalises over the task's label tokens, so an indifferent
    prompt starts near ``ln k``; generation uses the full vocabulary.
    """
    ids = encode_examples(model, examples)
    if task.spec.is_generation:
        if model.spec.family != "encoder_decoder":
            raise ValueError("generation tasks need an encoder-decoder model")
        targets = [model.ids(ex.target) + [model.eos_id] for ex in examples]
        dec_in = [[model.bos_id] + t[:-1] for t in targets]
        logits = model.forward(ids, prompt_tensor, decoder_inputs=dec_in).logits
        B, k, V = logits.shape
        tgt = np.full((B, k), model.pad_id, dtype=np.int64)
        w = np.zeros((B, k))
        for i, t in enumerate(targets):
            tgt[i, : len(t)] = t
            w[i, : len(t)] = 1.0
        return T.cross_entropy(T.reshape(logits, (B * k, V)), tgt.reshape(-1), w.reshape(-1))
    # classification: softmax over the verbalizer tokens only
    label_ids = np.array(model.ids(task.label_tokens))
    gold = np.array([ex.target for ex in examples])
    logits = model.forward(ids, prompt_tensor).logits
    return T.cross_entropy(T.take(logits, (slice(None), 0, label_ids)), gold)


def tune(model, task: Task, prompt: SoftPrompt, config: TuneConfig | None = None,
         dev_examples: Sequence | None = None) -> tuple[SoftPrompt, TrainCurve]:
    """Prompt tuning: optimise only ``prompt`` on ``task``'s training split."""
    config = config or TuneConfig()
    if not model.frozen:
        raise FrozenModelError("prompt tuning requires a frozen backbone; call freeze() first")
    if prompt.d != model.spec.hidden_dim:
        raise ShapeError(f"prompt dimension {prompt.d} does not match model hidden_dim {model.spec.hidden_dim}")
    P = T.Tensor(prompt.values.copy(), requires_grad=True, name="prompt")
    opt = T.AdamW([P], learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    rng = substream(config.seed, "pt-batches", task.name)
    train = task.train
    dev = task.dev if dev_examples is None else list(dev_examples)
    curve = TrainCurve()
    start = time.perf_counter()

    def score() -> float:
        return evaluate(model, P, task, examples=dev)

    with T.no_grad():
        first = [train[i] for i in rng.integers(0, len(train), size=config.batch_size)]
        curve.record(0, task_loss(model, P, task, first).item(), score(), 0.0)
    window_losses: list[float] = []
    T.clear_tape()
    for step in range(1, config.max_steps + 1):
        batch = [train[i] for i in rng.integers(0, len(train), size=config.batch_size)]
        opt.zero_grad()
        try:
            loss = task_loss(model, P, task, batch)
            T.backward(loss)
            opt.step()
        except NonFiniteError as exc:
            T.clear_tape()
            raise NonFiniteError(f"prompt tuning on {task.name} diverged at step {step}: {exc}") from None
        window_losses.append(loss.item())
        if step % config.eval_every == 0:
            curve.record(step, float(np.mean(window_losses)), score(), time.perf_counter() - start)
            window_losses = []
            if config.early_stop and _has_converged(curve, config.patience_window):
                break
    curve.convergence_step = detect_convergence(curve, config.patience_window)
    prov = {
        "kind": "trained",
        "task": task.name,
        "model": model.digest() if hasattr(model, "digest") else "",
        "seed": int(config.seed),
        "init": copy.deepcopy(prompt.provenance),
    }
    trained = SoftPrompt(P.data.copy(), prov, prov["model"], task.name, int(config.seed))
    return trained, curve


# ---------------------------------------------------------------------------
# prompt files


def prompt_to_bytes(prompt: SoftPrompt) -> bytes:
    header = {
        "kind": "prompt",
        "model_digest": prompt.model_digest,
        "task": prompt.task,
        "l": prompt.l,
        "d": prompt.d,
        "provenance": prompt.provenance,
        "seed": int(prompt.seed),
    }
    return binio.pack(PROMPT_MAGIC, PROMPT_VERSION, header, {"prompt": prompt.values})


def prompt_from_bytes(raw: bytes) -> SoftPrompt:
    header, blocks = binio.unpack(raw, PROMPT_MAGIC, {PROMPT_VERSION})
    try:
        values = blocks["prompt"]
        if values.shape != (header["l"], header["d"]):
            raise CorruptFileError(f"prompt block {values.shape} disagrees with header l, d")
        return SoftPrompt(values, header["provenance"], header["model_digest"], header["task"], header["seed"])
    except (KeyError, TypeError) as exc:
        raise CorruptFileError(f"malformed prompt header: {exc}") from None


def save_prompt(prompt: SoftPrompt, path: str | Path) -> str:
    raw = prompt_to_bytes(prompt)
    binio.write_file(path, raw)
    return binio.sha256(raw)


def load_prompt(path: str | Path) -> SoftPrompt:
    return prompt_from_bytes(binio.read_file(path))
