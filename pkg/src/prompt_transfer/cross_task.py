"""Zero-shot transfer matrices, source selection and warm-started tuning."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DigestMismatchError, ShapeError
from .tasks import Suite, Task, evaluate
from .tuning import SoftPrompt, TrainCurve, TuneConfig, detect_convergence, init_prompt, tune

RANDOM_ROW = "random"


def fmt(x: float) -> str:
    """Locale-independent fixed 6-significant-digit rendering."""
    return format(float(x), ".6g")


@dataclass
class TransferMatrix:
    """Raw zero-shot scores, relative performance and a random-prompt row.

    ``raw[i, j]`` is source ``sources[i]`` evaluated on target ``targets[j]``;
    ``relative`` divides each column by the target's own PT score.
    """

    sources: list[str]
    targets: list[str]
    raw: np.ndarray
    reference: np.ndarray
    random_raw: np.ndarray
    random_draws: np.ndarray | None = None
    types: dict[str, str] = field(default_factory=dict)

    @property
    def relative(self) -> np.ndarray:
        return 100.0 * (self.raw / self.reference[None, :])

    @property
    def random_relative(self) -> np.ndarray:
        return 100.0 * (self.random_raw / self.reference)

    def score(self, source: str, target: str) -> float:
        return float(self.raw[self.sources.index(source), self.targets.index(target)])

    def _pairs(self, same_type: bool) -> list[float]:
        rel = self.relative
        out = []
        for i, s in enumerate(self.sources):
            for j, t in enumerate(self.targets):
                if s == t:
                    continue
                if (self.types[s] == self.types[t]) == same_type:
                    out.append(rel[i, j])
        return out

    def within_type_mean(self) -> float:
        vals = self._pairs(True)
        return float(np.mean(vals)) if vals else float("nan")

    def cross_type_mean(self) -> float:
        vals = self._pairs(False)
        return float(np.mean(vals)) if vals else float("nan")

    def random_mean(self) -> float:
        return float(np.mean(self.random_relative))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", *self.targets])
        for s, row in zip(self.sources, self.relative):
            w.writerow([s, *(fmt(v) for v in row)])
        w.writerow([RANDOM_ROW, *(fmt(v) for v in self.random_relative)])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "sources": self.sources,
            "targets": self.targets,
            "raw": self.raw.tolist(),
            "reference": self.reference.tolist(),
            "random_raw": self.random_raw.tolist(),
            "types": self.types,
            "within_type_mean": self.within_type_mean(),
            "cross_type_mean": self.cross_type_mean(),
            "random_mean": self.random_mean(),
        }


def zero_shot_matrix(model, prompts: Mapping[str, SoftPrompt], suite: Suite, split: str = "test",
                     random_prompts: int = 20, random_seed: int = 0, jobs: int = 1) -> TransferMatrix:
    """Evaluate every trained prompt on every task of ``suite`` without updates.

    The reference for the relative grid is each target's own prompt
    evaluated on the same split, so the diagonal is exactly 100.  The random
    row averages ``random_prompts`` fresh ``init_prompt`` draws per target.
    """
    digest = model.digest()
    bad = sorted(name for name, p in prompts.items() if p.model_digest and p.model_digest != digest)
    if bad:
        raise DigestMismatchError(f"prompts trained on a different backbone: {', '.join(bad)}")
    sources = [t.name for t in suite.tasks if t.name in prompts]
    targets = [t.name for t in suite.tasks]
    missing = [t for t in targets if t not in prompts]
    if missing:
        raise KeyError(f"no trained prompt for target task(s) {missing}; relative scores need one")
    by_name = {t.name: t for t in suite.tasks}
    l, d = next(iter(prompts.values())).values.shape

    cells = [(s, t) for s in sources for t in targets]
    rand = [init_prompt(l, d, seed=random_seed * 100003 + k) for k in range(random_prompts)]
    rcells = [(k, t) for k in range(random_prompts) for t in targets]

    def run_cell(item):
        s, t = item
        return evaluate(model, prompts[s].values, by_name[t], split)

    def run_rand(item):
        k, t = item
        return evaluate(model, rand[k].values, by_name[t], split)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            vals = list(pool.map(run_cell, cells))
            rvals = list(pool.map(run_rand, rcells))
    else:
        vals = [run_cell(c) for c in cells]
        rvals = [run_rand(c) for c in rcells]
    raw = np.array(vals).reshape(len(sources), len(targets))
    draws = np.array(rvals).reshape(random_prompts, len(targets))
    reference = np.array([raw[sources.index(t), j] for j, t in enumerate(targets)])
    if np.any(reference <= 0):
        raise ValueError("a target's own prompt scored 0; relative performance is undefined")
    return TransferMatrix(sources, targets, raw, reference, draws.mean(axis=0), draws,
                          {t.name: t.task_type for t in suite.tasks})


def select_source(matrix: TransferMatrix, target: str) -> str:
    """Best zero-shot source for ``target`` excluding itself; ties go to the smaller name."""
    if target not in matrix.targets:
        raise KeyError(f"matrix does not cover target {target!r}")
    j = matrix.targets.index(target)
    cands = [(-matrix.raw[i, j], s) for i, s in enumerate(matrix.sources) if s != target]
    if not cands:
        raise ValueError(f"no eligible source for {target!r}")
    return min(cands)[1]


@dataclass
class SpeedupReport:
    """Step-based speedups of a warm-started run over vanilla PT.

    Step counts are floored at ``granularity`` (the evaluation interval), so a
    run that is already at its best at step 0 is credited one interval.
    """

    task: str
    pt_convergence: int
    tpt_convergence: int
    tpt_comparable: int | None
    granularity: int
    pt_final_score: float
    tpt_final_score: float

    @property
    def convergence_speedup(self) -> float:
        return max(self.pt_convergence, self.granularity) / max(self.tpt_convergence, self.granularity)

    @property
    def comparable_result_speedup(self) -> float | None:
        if self.tpt_comparable is None:
            return None
        return max(self.pt_convergence, self.granularity) / max(self.tpt_comparable, self.granularity)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "pt_convergence": self.pt_convergence,
            "tpt_convergence": self.tpt_convergence,
            "tpt_comparable": self.tpt_comparable,
            "granularity": self.granularity,
            "pt_final_score": self.pt_final_score,
            "tpt_final_score": self.tpt_final_score,
            "convergence_speedup": self.convergence_speedup,
            "comparable_result_speedup": self.comparable_result_speedup,
        }

    def csv_row(self) -> list[str]:
        c = self.comparable_result_speedup
        return [self.task, fmt(self.tpt_final_score), fmt(self.convergence_speedup), "N/A" if c is None else fmt(c)]


SPEEDUP_HEADER = ["task", "score", "convergence_speedup", "comparable_result_speedup"]


def speedup_report(task: str, pt_curve: TrainCurve, tpt_curve: TrainCurve, eval_every: int,
                   patience_window: int) -> SpeedupReport:
    if pt_curve is None or len(pt_curve.checkpoints) < 2:
        raise ValueError(f"a vanilla PT reference curve is required for {task!r}")
    pt_conv = pt_curve.convergence_step
    if pt_conv is None:
        pt_conv = detect_convergence(pt_curve, patience_window)
    tpt_conv = tpt_curve.convergence_step
    if tpt_conv is None:
        tpt_conv = detect_convergence(tpt_curve, patience_window)
    return SpeedupReport(task, pt_conv, tpt_conv, tpt_curve.first_step_reaching(pt_curve.final_score),
                         eval_every, pt_curve.final_score, tpt_curve.final_score)


def warm_start_tune(model, target: Task, init: SoftPrompt, pt_curve: TrainCurve,
                    config: TuneConfig | None = None) -> tuple[SoftPrompt, TrainCurve, SpeedupReport]:
    """Tune from ``init`` and compare against the vanilla-PT reference curve."""
    config = config or TuneConfig()
    if pt_curve is None:
        raise ValueError(f"a vanilla PT reference curve is required for {target.name!r}")
    if init.d != model.spec.hidden_dim:
        raise ShapeError(f"warm-start prompt has d={init.d}, model expects {model.spec.hidden_dim}")
    start = init_prompt(init.l, init.d, init, seed=config.seed)
    prompt, curve = tune(model, target, start, config)
    return prompt, curve, speedup_report(target.name, pt_curve, curve, config.eval_every, config.patience_window)


def tpt_task(model, target: Task, source_prompt: SoftPrompt, config: TuneConfig | None = None,
             pt_curve: TrainCurve | None = None, prompt_length: int | None = None):
    """Transferable prompt tuning across tasks: warm start from a source task's prompt."""
    if prompt_length is not None and source_prompt.l != prompt_length:
        raise ShapeError(f"source prompt has l={source_prompt.l}, target expects l={prompt_length}")
    return warm_start_tune(model, target, source_prompt, pt_curve, config)


def speedups_csv(reports: Sequence[SpeedupReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SPEEDUP_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
