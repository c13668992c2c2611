"""Prompt similarity metrics and their rank correlation with transfer scores."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import DegenerateStateError, ShapeError
from .tuning import SoftPrompt

METRICS = ("e_concat", "e_average", "c_concat", "c_average", "on")


def _values(p) -> np.ndarray:
    return np.asarray(getattr(p, "values", p), dtype=np.float64)


def _pair(p1, p2) -> tuple[np.ndarray, np.ndarray]:
    a, b = _values(p1), _values(p2)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"prompts must share (l, d); got {a.shape} and {b.shape}")
    return a, b


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def e_concat(p1, p2) -> float:
    """``1 / (1 + ||vec(P1) - vec(P2)||)``."""
    a, b = _pair(p1, p2)
    return float(1.0 / (1.0 + np.linalg.norm((a - b).ravel())))


def e_average(p1, p2) -> float:
    """Inverse of one plus the mean distance over all ``l^2`` token pairs."""
    a, b = _pair(p1, p2)
    d = _pairwise_dist(a, b)
    # an exactly rounded sum does not depend on order, so swapping P1 and P2 is bit-exact
    return float(1.0 / (1.0 + math.fsum(d.ravel()) / d.size))


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateStateError("cosine similarity is undefined for a zero-norm operand")
    return float(np.clip((u * v).sum() / (nu * nv), -1.0, 1.0))


def c_concat(p1, p2) -> float:
    a, b = _pair(p1, p2)
    return _cos(a.ravel(), b.ravel())


def c_average(p1, p2) -> float:
    """Mean cosine over all ``l^2`` token pairs."""
    a, b = _pair(p1, p2)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateStateError("c_average is undefined when a token has zero norm")
    # elementwise products plus an order-free sum keep the result bit-symmetric in (P1, P2)
    c = np.clip(((a / na[:, None])[:, None, :] * (b / nb[:, None])[None, :, :]).sum(-1), -1.0, 1.0)
    return float(math.fsum(c.ravel()) / c.size)


# ---------------------------------------------------------------------------
# activation states


@dataclass(frozen=True)
class Selection:
    """Which FFN layers enter an activation state.

    ``top``/``bottom`` take the last/first ``k`` layers, ``layer`` takes the
    single 1-based layer ``k`` and ``all`` takes every layer.
    """

    kind: str = "top"
    k: int = 3

    def __post_init__(self):
        if self.kind not in ("top", "bottom", "layer", "all"):
            raise ValueError(f"unknown layer selection {self.kind!r}")
        if self.kind != "all" and self.k < 1:
            raise ValueError("k must be positive")

    def layers(self, num_layers: int) -> list[int]:
        if self.kind == "all":
            return list(range(num_layers))
        if self.k > num_layers:
            raise ValueError(f"selection {self.kind}_{self.k} exceeds the model's {num_layers} layers")
        if self.kind == "top":
            return list(range(num_layers - self.k, num_layers))
        if self.kind == "layer":
            return [self.k - 1]
        return list(range(self.k))

    @property
    def name(self) -> str:
        return "all" if self.kind == "all" else f"{self.kind}{self.k}"

    @classmethod
    def parse(cls, text: str) -> "Selection":
        """``top3``, ``bottom_2``, ``layer1`` or ``all``."""
        text = text.strip().lower().replace("_", "")
        if text == "all":
            return cls("all", 0)
        for kind in ("top", "bottom", "layer"):
            if text.startswith(kind):
                return cls(kind, int(text[len(kind):]))
        raise ValueError(f"cannot parse layer selection {text!r}")


def top_k(k: int) -> Selection:
    return Selection("top", k)


def bottom_k(k: int) -> Selection:
    return Selection("bottom", k)


def single_layer(k: int) -> Selection:
    return Selection("layer", k)


ALL_LAYERS = Selection("all", 0)


def layer_sweep(num_layers: int, k: int = 3) -> list[Selection]:
    """Each single layer, then the bottom and top ``k`` and all layers."""
    k = min(k, num_layers)
    return [single_layer(i + 1) for i in range(num_layers)] + [bottom_k(k), top_k(k), ALL_LAYERS]


@dataclass
class ActivationState:
    states: np.ndarray
    layers: list[int]
    position: str

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.uint8).ravel()
        if np.any(self.states > 1):
            raise ValueError("activation states are binary")

    def __len__(self) -> int:
        return self.states.size


def activation_state(model, prompt, selection: Selection = Selection(), position_rule: str | None = None) -> ActivationState:
    """Binarised FFN pre-activations for the probe ``[MASK], P, <s>``.

    Encoder-decoder models feed ``P, <s>`` to the encoder and read the
    decoder's first step.  Layers are concatenated in ascending order.
    """
    family = model.spec.family
    expected = "mask_position" if family == "masked_lm" else "decoder_first"
    if position_rule is not None and position_rule != expected:
        raise ValueError(f"a {family} model captures at {expected}, not {position_rule}")
    layers = selection.layers(model.spec.num_layers)
    with T.no_grad():
        out = model.forward([[model.bos_id]], _values(prompt), capture=True)
    if out.trace is None:
        raise ValueError("activation capture is disabled on this model")
    states = out.trace.states[0]
    return ActivationState(np.concatenate([states[i] for i in layers]), layers, expected)


def on_metric(as1, as2) -> float:
    """Cosine between two binary activation vectors."""
    a = np.asarray(getattr(as1, "states", as1), dtype=np.float64).ravel()
    b = np.asarray(getattr(as2, "states", as2), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"activation states differ in length: {a.size} vs {b.size}")
    if not a.any() or not b.any():
        raise DegenerateStateError("on_metric is undefined for an all-zero activation state")
    return float((a * b).sum() / np.sqrt(a.sum() * b.sum()))


def intersect_states(states: Sequence) -> np.ndarray:
    arrs = [np.asarray(getattr(s, "states", s), dtype=np.uint8).ravel() for s in states]
    if len({a.size for a in arrs}) != 1:
        raise ShapeError("activation states differ in length")
    return np.bitwise_and.reduce(np.stack(arrs), axis=0)


def on_intersection(side_a: Sequence, side_b: Sequence) -> float:
    """``on_metric`` between the per-side intersections of several seeds' states."""
    if len(side_a) < 2 or len(side_b) < 2:
        raise ValueError("on_intersection needs at least two states per side")
    a, b = intersect_states(side_a), intersect_states(side_b)
    if not a.any() or not b.any():
        raise DegenerateStateError("the intersection of activation states is empty")
    return on_metric(a, b)


# ---------------------------------------------------------------------------
# rank correlation


def fractional_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    return rankdata(np.asarray(x, dtype=np.float64), method="average")


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation of fractional ranks."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("spearman needs two 1-D sequences of equal length")
    if a.size < 2:
        raise ValueError("spearman needs at least two observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DegenerateStateError("spearman is undefined for a constant input")
    ra, rb = fractional_ranks(a), fractional_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float(np.clip(np.dot(ra, rb) / np.sqrt(np.dot(ra, ra) * np.dot(rb, rb)), -1.0, 1.0))


# ---------------------------------------------------------------------------
# indicator reports


def metric_fn(name: str, model=None, selection: Selection = Selection()) -> Callable:
    """Similarity callable over two prompts; ``on`` needs the backbone."""
    simple = {"e_concat": e_concat, "e_average": e_average, "c_concat": c_concat, "c_average": c_average}
    if name in simple:
        return simple[name]
    if name == "on":
        if model is None:
            raise ValueError("the on metric needs a model to read activation states from")
        cache: dict[bytes, ActivationState] = {}

        def on(p1, p2):
            s = []
            for p in (p1, p2):
                key = _values(p).tobytes()
                if key not in cache:
                    cache[key] = activation_state(model, p, selection)
                s.append(cache[key])
            return on_metric(*s)

        return on
    raise ValueError(f"unknown metric {name!r}; choose from {METRICS}")


def on_intersection_fn(model, seed_prompts: Mapping[str, Sequence], selection: Selection = Selection()) -> Callable:
    """ON between the seed-intersected states of two prompts' tasks.

    ``seed_prompts`` maps a task name to that task's prompts from two or more
    seeds; the returned callable looks tasks up through ``prompt.task``.
    """
    states = {task: [activation_state(model, p, selection) for p in ps] for task, ps in seed_prompts.items()}

    def on_i(p1, p2):
        return on_intersection(states[p1.task], states[p2.task])

    return on_i


@dataclass
class IndicatorReport:
    """Per-metric, per-target Spearman coefficients plus type and overall means."""

    metrics: list[str]
    targets: list[str]
    coefficients: dict[str, dict[str, float | None]]
    types: dict[str, str] = field(default_factory=dict)

    def overall(self, metric: str) -> float | None:
        vals = [v for v in self.coefficients[metric].values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def undefined(self, metric: str) -> int:
        return sum(v is None for v in self.coefficients[metric].values())

    def by_type(self, metric: str) -> dict[str, float | None]:
        out = {}
        for ty in sorted(set(self.types.values())):
            vals = [self.coefficients[metric][t] for t in self.targets if self.types.get(t) == ty]
            vals = [v for v in vals if v is not None]
            out[ty] = float(np.mean(vals)) if vals else None
        return out

    def to_csv(self) -> str:
        fmt = lambda v: "N/A" if v is None else format(float(v), ".6g")  # noqa: E731
        types = sorted(set(self.types.values()))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *self.targets, *(f"mean_{t}" for t in types), "overall", "undefined"])
        for m in self.metrics:
            bt = self.by_type(m)
            w.writerow([m, *(fmt(self.coefficients[m][t]) for t in self.targets),
                        *(fmt(bt[t]) for t in types), fmt(self.overall(m)), self.undefined(m)])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "metrics": self.metrics,
            "targets": self.targets,
            "coefficients": self.coefficients,
            "types": self.types,
            "overall": {m: self.overall(m) for m in self.metrics},
        }


def indicator_report(metrics: Mapping[str, Callable], prompts: Mapping[str, SoftPrompt], matrix) -> IndicatorReport:
    """Rank-correlate prompt similarity with zero-shot transfer, per target.

    For each target, every other source prompt is compared with the target's
    own prompt, and Spearman's coefficient between those similarities and the
    sources' zero-shot scores on the target is recorded.  Degenerate targets
    are reported as ``None`` and excluded from means.
    """
    coeffs: dict[str, dict[str, float | None]] = {}
    for name, fn in metrics.items():
        coeffs[name] = {}
        for j, target in enumerate(matrix.targets):
            srcs = [s for s in matrix.sources if s != target]
            try:
                sims = [fn(prompts[s], prompts[target]) for s in srcs]
                scores = [matrix.raw[matrix.sources.index(s), j] for s in srcs]
                coeffs[name][target] = spearman(sims, scores)
            except (DegenerateStateError, ValueError):
                coeffs[name][target] = None
    return IndicatorReport(list(metrics), list(matrix.targets), coeffs, dict(matrix.types))


def similarity_table(metric: Callable, prompts: Mapping[str, SoftPrompt]) -> tuple[list[str], np.ndarray]:
    names = sorted(prompts)
    out = np.ones((len(names), len(names)))
    for i, a in enumerate(names):
        for j in range(i + 1, len(names)):
            out[i, j] = out[j, i] = metric(prompts[a], prompts[names[j]])
    return names, out
