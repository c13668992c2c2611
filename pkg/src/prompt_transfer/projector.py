"""Two-layer projector mapping prompts of one backbone into another's space."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import binio
from . import tensor as T
from .errors import ConfigError, CorruptFileError, FrozenModelError, ShapeError
from .rng import substream
from .tasks import Task
from .tuning import SoftPrompt, TrainCurve, TuneConfig, task_loss

PROJECTOR_MAGIC = b"PTXPROJ\x00"
PROJECTOR_VERSION = 1
ACTIVATIONS = ("leaky_relu", "tanh")


@dataclass
class ProjectorConfig:
    hidden_dim: int = 128
    learning_rate: float = 0.005
    batch_size: int = 16
    steps: int = 500
    activation: str = "leaky_relu"
    output_layernorm: bool = False
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.hidden_dim < 1 or self.batch_size < 1 or self.steps < 0 or self.learning_rate <= 0:
            raise ConfigError("hidden_dim, batch_size and learning_rate must be positive; steps >= 0")


@dataclass
class Projector:
    """``P~ = W2 act(W1 vec(P) + b1) + b2``, optionally layer-normalised.

    The optional normalisation runs over the whole ``l * d_t`` output vector
    and carries no gain or bias.
    """

    l: int
    d_s: int
    d_t: int
    d_h: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "leaky_relu"
    output_layernorm: bool = False
    training_tasks: list[str] = field(default_factory=list)
    source_digest: str = ""
    target_digest: str = ""

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        want = {
            "W1": (self.d_h, self.l * self.d_s),
            "b1": (self.d_h,),
            "W2": (self.l * self.d_t, self.d_h),
            "b2": (self.l * self.d_t,),
        }
        for name, shape in want.items():
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"projector {name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @classmethod
    def init(cls, l: int, d_s: int, d_t: int, d_h: int = 128, activation: str = "leaky_relu",
             output_layernorm: bool = False, seed: int = 0) -> "Projector":
        """Uniform fan-in initialisation, as for a standard linear layer."""
        rng = substream(seed, "projector-init")
        a1 = 1.0 / np.sqrt(l * d_s)
        a2 = 1.0 / np.sqrt(d_h)
        return cls(
            l, d_s, d_t, d_h,
            rng.uniform(-a1, a1, size=(d_h, l * d_s)), rng.uniform(-a1, a1, size=d_h),
            rng.uniform(-a2, a2, size=(l * d_t, d_h)), rng.uniform(-a2, a2, size=l * d_t),
            activation, output_layernorm,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def _check_source(self, values: np.ndarray) -> None:
        if values.shape[-2:] != (self.l, self.d_s):
            raise ShapeError(f"projector expects source prompts of shape {(self.l, self.d_s)}, got {values.shape[-2:]}")

    def graph(self, src: T.Tensor, weights: Mapping[str, T.Tensor], layernorm: bool | None = None) -> T.Tensor:
        """Differentiable projection of a batch ``(B, l, d_s)`` to ``(B, l, d_t)``."""
        B = src.shape[0]
        x = T.reshape(src, (B, self.l * self.d_s))
        h = T.matmul(x, T.transpose(weights["W1"])) + weights["b1"]
        h = T.leaky_relu(h) if self.activation == "leaky_relu" else T.tanh(h)
        y = T.matmul(h, T.transpose(weights["W2"])) + weights["b2"]
        if self.output_layernorm if layernorm is None else layernorm:
            y = T.layer_norm(y)
        return T.reshape(y, (B, self.l, self.d_t))

    def __call__(self, values: np.ndarray, layernorm: bool | None = None) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        self._check_source(values)
        batch = values.reshape(-1, self.l, self.d_s)
        with T.no_grad():
            w = {k: T.Tensor(v, _check=False) for k, v in self.params().items()}
            out = self.graph(T.Tensor(batch), w, layernorm).data
        return out.reshape(values.shape[:-2] + (self.l, self.d_t))

    def digest(self) -> str:
        return binio.sha256(projector_to_bytes(self))


def project(proj: Projector, source: SoftPrompt, layernorm: bool | None = None) -> SoftPrompt:
    """Map ``source`` into the target space; provenance records the projector."""
    if (source.l, source.d) != (proj.l, proj.d_s):
        raise ShapeError(f"source prompt {(source.l, source.d)} does not fit projector input {(proj.l, proj.d_s)}")
    values = proj(source.values, layernorm)
    prov = {
        "kind": "projected",
        "projector": proj.digest(),
        "source": source.content_digest(),
        "source_provenance": copy.deepcopy(source.provenance),
        "layernorm": bool(proj.output_layernorm if layernorm is None else layernorm),
    }
    return SoftPrompt(values, prov, proj.target_digest, source.task, source.seed)


def _trainable(proj: Projector) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v.copy(), requires_grad=True, name=f"proj.{k}") for k, v in proj.params().items()}


def _replace(proj: Projector, weights: Mapping[str, T.Tensor], **extra) -> Projector:
    out = copy.deepcopy(proj)
    for k, t in weights.items():
        setattr(out, k, t.data.copy())
    for k, v in extra.items():
        setattr(out, k, v)
    return out


def pair_distance(proj: Projector, source: np.ndarray, target: np.ndarray) -> float:
    return float(np.linalg.norm(proj(source) - target))


def train_distance_minimizing(proj: Projector, pairs: Sequence[tuple[SoftPrompt, SoftPrompt]],
                              config: ProjectorConfig | None = None,
                              tasks: Sequence[str] = ()) -> tuple[Projector, list[float]]:
    """Fit ``proj`` so projected source prompts land on native target prompts.

    Minimises the mean (unsquared) Euclidean distance over minibatches of
    pairs.  Returns the trained projector and the per-step mean distance.
    """
    config = config or ProjectorConfig()
    if not pairs:
        raise ValueError("distance-minimizing training needs at least one prompt pair")
    src = np.stack([p.values for p, _ in pairs])
    tgt = np.stack([q.values for _, q in pairs])
    proj._check_source(src)
    if tgt.shape[1:] != (proj.l, proj.d_t):
        raise ShapeError(f"target prompts must be {(proj.l, proj.d_t)}, got {tgt.shape[1:]}")
    weights = _trainable(proj)
    opt = T.AdamW(list(weights.values()), learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    rng = substream(config.seed, "projector-dm")
    history = []
    for _ in range(config.steps):
        idx = rng.integers(0, len(pairs), size=min(config.batch_size, len(pairs))) if len(pairs) > config.batch_size \
            else np.arange(len(pairs))
        opt.zero_grad()
        diff = proj.graph(T.Tensor(src[idx]), weights) - T.Tensor(tgt[idx])
        dist = T.l2_norm(T.reshape(diff, (len(idx), -1)), axis=1)
        loss = T.mean(dist)
        T.backward(loss)
        opt.step()
        history.append(loss.item())
    names = list(tasks) or sorted({q.task for _, q in pairs if q.task})
    trained = _replace(proj, weights, training_tasks=names,
                       source_digest=pairs[0][0].model_digest, target_digest=pairs[0][1].model_digest)
    return trained, history


def train_task_tuning(proj: Projector, source_prompts: Mapping[str, SoftPrompt], target_model,
                      tasks: Sequence[Task], config: ProjectorConfig | None = None) -> tuple[Projector, list[float]]:
    """Train ``proj`` through the frozen target model on the tasks' training splits.

    Each step takes one batch from one task, cycling through ``tasks`` in
    order.  Only projector weights move.  Returns the per-step task loss.
    """
    config = config or ProjectorConfig()
    if not target_model.frozen:
        raise FrozenModelError("task-tuning a projector requires a frozen target model")
    if not tasks:
        raise ValueError("task-tuning needs at least one training task")
    if proj.d_t != target_model.spec.hidden_dim:
        raise ShapeError(f"projector d_t={proj.d_t} does not match target hidden_dim {target_model.spec.hidden_dim}")
    for t in tasks:
        if t.name not in source_prompts:
            raise KeyError(f"no source prompt for training task {t.name!r}")
        proj._check_source(source_prompts[t.name].values)
    weights = _trainable(proj)
    opt = T.AdamW(list(weights.values()), learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    rngs = {t.name: substream(config.seed, "projector-tt", t.name) for t in tasks}
    history = []
    for step in range(config.steps):
        task = tasks[step % len(tasks)]
        batch = [task.train[i] for i in rngs[task.name].integers(0, len(task.train), size=config.batch_size)]
        opt.zero_grad()
        src = T.Tensor(source_prompts[task.name].values[None])
        prompt = T.reshape(proj.graph(src, weights), (proj.l, proj.d_t))
        loss = task_loss(target_model, prompt, task, batch)
        T.backward(loss)
        opt.step()
        history.append(loss.item())
    src_digest = next(iter(source_prompts.values())).model_digest
    trained = _replace(proj, weights, training_tasks=[t.name for t in tasks],
                       source_digest=src_digest, target_digest=target_model.digest())
    return trained, history


def tpt_model(target_model, target_task: Task, projected: SoftPrompt, pt_curve: TrainCurve,
              config: TuneConfig | None = None):
    """Transferable prompt tuning across models: warm start from a projected prompt."""
    from .cross_task import warm_start_tune

    if projected.d != target_model.spec.hidden_dim:
        raise ShapeError(f"projected prompt has d={projected.d}, target model expects {target_model.spec.hidden_dim}")
    return warm_start_tune(target_model, target_task, projected, pt_curve, config)


# ---------------------------------------------------------------------------
# projector files


def projector_to_bytes(proj: Projector) -> bytes:
    header = {
        "kind": "projector",
        "l": proj.l,
        "d_s": proj.d_s,
        "d_t": proj.d_t,
        "d_h": proj.d_h,
        "activation": proj.activation,
        "output_layernorm": bool(proj.output_layernorm),
        "training_tasks": list(proj.training_tasks),
        "source_digest": proj.source_digest,
        "target_digest": proj.target_digest,
    }
    return binio.pack(PROJECTOR_MAGIC, PROJECTOR_VERSION, header, proj.params())


def projector_from_bytes(raw: bytes) -> Projector:
    header, blocks = binio.unpack(raw, PROJECTOR_MAGIC, {PROJECTOR_VERSION})
    try:
        return Projector(
            header["l"], header["d_s"], header["d_t"], header["d_h"],
            blocks["W1"], blocks["b1"], blocks["W2"], blocks["b2"],
            header["activation"], header["output_layernorm"], list(header["training_tasks"]),
            header["source_digest"], header["target_digest"],
        )
    except (KeyError, TypeError, ShapeError, ConfigError) as exc:
        raise CorruptFileError(f"malformed projector file: {exc}") from None


def save_projector(proj: Projector, path: str | Path) -> str:
    raw = projector_to_bytes(proj)
    binio.write_file(path, raw)
    return binio.sha256(raw)


def load_projector(path: str | Path) -> Projector:
    return projector_from_bytes(binio.read_file(path))
