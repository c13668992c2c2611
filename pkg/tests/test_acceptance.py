"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed as they happen
and collected again in the terminal summary.  The cross-task, cross-model and
indicator criteria share one default-config pipeline per suite seed.
Pretrained backbones are cached across sessions in the directory named by
``PROMPT_TRANSFER_CACHE`` (default ``~/.cache/prompt_transfer``); pretraining
is shared set-up and is timed separately from the criteria.  Every prompt
tuning and projector run is live.
"""

from __future__ import annotations

import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest

import gradcheck
import oracles
import verdicts
from prompt_transfer import cli, cross_task, pipeline
from prompt_transfer import indicators as I
from prompt_transfer import tensor as T
from prompt_transfer.config import OUT_ENV, ExperimentConfig
from prompt_transfer.errors import PromptTransferError
from prompt_transfer.pipeline import CACHE_ENV, Pipeline
from prompt_transfer.projector import Projector, load_projector, project, projector_to_bytes, save_projector
from prompt_transfer.tasks import evaluate
from prompt_transfer.tuning import SoftPrompt, init_prompt, load_prompt, prompt_to_bytes, save_prompt

pytestmark = pytest.mark.slow

SUITE_SEEDS = (0, 1, 2)
PT_SEEDS = (0, 1, 2)
TRAIN_TASK = "nli_a"
SEPARABLE_TASK = "sa_a"


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "prompt_transfer")


def pts(x: float) -> str:
    return f"{100 * x:.1f}"


# -- shared fixtures -----------------------------------------------------------


class DigestLog:
    """Wraps tuning entry points to record the backbone digest around each run."""

    def __init__(self):
        self.runs: list[tuple[str, str, str]] = []

    def wrap(self, kind: str, fn, model_arg: int):
        def run(*args, **kwargs):
            model = args[model_arg]
            before = model.digest()
            out = fn(*args, **kwargs)
            self.runs.append((kind, before, model.digest()))
            return out

        return run


@pytest.fixture(scope="session")
def digests():
    log = DigestLog()
    mp = pytest.MonkeyPatch()
    mp.setattr(pipeline, "tune", log.wrap("PT", pipeline.tune, 0))
    mp.setattr(cross_task, "tune", log.wrap("TPT", cross_task.tune, 0))
    mp.setattr(pipeline, "train_task_tuning", log.wrap("task-tuning projector", pipeline.train_task_tuning, 2))
    yield log
    mp.undo()


class Desk:
    """Default-config pipelines, one per suite seed, with memoised stages."""

    def __init__(self, root: Path):
        self.root = root
        self.cache = cache_dir()
        self.pipes = {s: Pipeline(self.config(s), cache_dir=self.cache) for s in SUITE_SEEDS}
        self.memo: dict = {}
        t0 = time.perf_counter()
        for pipe in self.pipes.values():
            pipe.model("source")
            pipe.model("target")
        self.backbone_seconds = time.perf_counter() - t0

    def config(self, suite_seed: int, projector: dict | None = None) -> ExperimentConfig:
        doc = {"output_dir": str(self.root / f"suite{suite_seed}"), "suite": {"seed": suite_seed},
               "seeds": list(PT_SEEDS)}
        if projector:
            doc["projector"] = projector
        return ExperimentConfig.from_dict(doc)

    def once(self, key, fn):
        if key not in self.memo:
            self.memo[key] = fn()
        return self.memo[key]

    def sibling(self, suite_seed: int, projector: dict) -> Pipeline:
        """A pipeline with other projector settings sharing the base pipeline's state."""
        base = self.pipes[suite_seed]
        sib = Pipeline(self.config(suite_seed, projector), cache_dir=self.cache)
        sib.index, sib.manifest, sib.timing = base.index, base.manifest, base.timing
        sib._models, sib._suites = base._models, base._suites
        return sib

    # stages

    def separable_runs(self):
        """Criterion-4 runs on suite 0; filed in the warehouse so later stages reuse them."""

        def run():
            pipe = self.pipes[0]
            model, task = pipe.model("source"), pipe.suite()[SEPARABLE_TASK]
            l = pipe.config["pt"]["prompt_length"]
            out = {}
            t0 = time.perf_counter()
            for seed in PT_SEEDS:
                t1 = time.perf_counter()
                p, c = pipeline.tune(model, task, init_prompt(l, model.spec.hidden_dim, seed=seed), pipe.tune_config(seed))
                pipe._keep("source", p, c, seed, time.perf_counter() - t1, "trained")
                out[seed] = c
            return out, time.perf_counter() - t0

        return self.once("separable", run)

    def matrices(self):
        self.separable_runs()

        def run():
            t0 = time.perf_counter()
            mats = {s: self.pipes[s].matrix("source", PT_SEEDS[0]) for s in SUITE_SEEDS}
            return mats, time.perf_counter() - t0

        return self.once("matrices", run)

    def tpt_rows(self):
        self.matrices()
        return self.once("tpt", lambda: {s: self.pipes[s].tpt_task("source", PT_SEEDS[0]) for s in SUITE_SEEDS})

    def seed_prompts(self):
        self.separable_runs()
        return self.once("seed_prompts", lambda: {s: self.pipes[0].prompts("source", s) for s in PT_SEEDS})

    def distance_rows(self):
        self.seed_prompts()
        sib = self.sibling(0, {"objective": "distance", "train_tasks": [TRAIN_TASK]})
        return self.once("distance", sib.project)

    def task_tuning_rows(self):
        self.matrices()

        def run():
            out = {}
            for s in SUITE_SEEDS:
                sib = self.sibling(s, {"objective": "task_tuning", "train_tasks": [TRAIN_TASK], "seed": s})
                proj = sib.projector()
                tgt, suite = sib.model("target"), sib.suite()
                src = sib.prompts("source", PT_SEEDS[0])
                l, d = sib.config["pt"]["prompt_length"], tgt.spec.hidden_dim
                rand = [init_prompt(l, d, seed=s * 100003 + k) for k in range(sib.config["random_prompts"])]
                train_types = {suite[n].task_type for n in proj.training_tasks}
                rows = []
                for task in suite.tasks:
                    if task.name in proj.training_tasks:
                        continue
                    rows.append({
                        "task": task.name,
                        "role": "same_type" if task.task_type in train_types else "different_type",
                        "projected": evaluate(tgt, project(proj, src[task.name][0]).values, task),
                        "random": float(np.mean([evaluate(tgt, r.values, task) for r in rand])),
                        "chance": 1.0 / task.spec.num_labels,
                    })
                out[s] = rows
            return out

        return self.once("task_tuning", run)


@pytest.fixture(scope="session")
def desk(tmp_path_factory, digests):
    d = Desk(tmp_path_factory.mktemp("acceptance"))
    yield d
    for pipe in d.pipes.values():
        pipe.finish()


# -- criteria ------------------------------------------------------------------


def test_criterion_01_autodiff_matches_finite_differences():
    t0 = time.perf_counter()
    covered, worst, n = set(), 0.0, 120
    for seed in range(n):
        build, arrays, ops = gradcheck.random_graph(seed)
        worst = max(worst, gradcheck.check(build, arrays))
        covered |= ops
    wall = time.perf_counter() - t0
    registry = {"tsum" if op == "sum" else op for op in T._OPS}
    missing = registry - covered
    ok = worst < 1e-4 and not missing and wall < 60
    verdicts.record(1, "autodiff gradients", ok,
                    f"{n} graphs, max rel err {worst:.2e} (< 1e-4), ops uncovered {sorted(missing)}, {wall:.1f}s (< 60s)")
    assert ok


def test_criterion_02_frozen_backbones(desk, digests):
    desk.tpt_rows()
    desk.seed_prompts()
    desk.distance_rows()
    desk.task_tuning_rows()
    kinds = {k for k, _, _ in digests.runs}
    changed = [k for k, a, b in digests.runs if a != b]
    ok = not changed and {"PT", "TPT", "task-tuning projector"} <= kinds
    verdicts.record(2, "frozen backbone", ok,
                    f"{len(digests.runs)} runs ({', '.join(sorted(kinds))}), {len(changed)} with a changed digest")
    assert ok


def _random_pair(rng, tie: bool):
    l, d = int(rng.integers(1, 9)), int(rng.integers(1, 7))
    a = rng.normal(size=(l, d))
    b = rng.normal(size=(l, d))
    if tie:
        a = np.round(a, 0)
        a[a == 0] = 1.0
        b = np.where(rng.random(size=b.shape) < 0.5, a, np.round(b, 0) + 0.5)
    return a, b


def test_criterion_03_metric_oracles():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {}

    def note(name, got, want):
        worst[name] = max(worst.get(name, 0.0), abs(got - want))

    for i in range(1000):
        a, b = _random_pair(rng, tie=i % 2 == 0)
        for name in ("e_concat", "e_average", "c_concat", "c_average"):
            note(name, getattr(I, name)(a, b), getattr(oracles, name)(a, b))
        n = int(rng.integers(4, 64))
        s1, s2 = rng.integers(0, 2, size=n), rng.integers(0, 2, size=n)
        s1[0] = s2[-1] = 1
        note("on_metric", I.on_metric(s1, s2), oracles.on_metric(s1, s2))
        k = int(rng.integers(2, 5))
        side_a = [np.maximum(rng.integers(0, 2, size=n), s1) for _ in range(k)]
        side_b = [np.maximum(rng.integers(0, 2, size=n), s2) for _ in range(k)]
        note("on_intersection", I.on_intersection(side_a, side_b), oracles.on_intersection(side_a, side_b))
        m = int(rng.integers(2, 20))
        x, y = rng.integers(0, 4, size=m), rng.integers(0, 4, size=m)
        x[:2], y[:2] = (0, 1), (1, 0)
        note("spearman", I.spearman(x, y), oracles.spearman(x, y))
    wall = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v <= 1e-12}
    ok = not bad and len(worst) == 7 and wall < 60
    verdicts.record(3, "metric oracles", ok,
                    f"1000 inputs, max abs err {max(worst.values()):.1e} (<= 1e-12), failing {sorted(bad)}, {wall:.1f}s (< 60s)")
    assert ok


def test_criterion_04_prompt_tuning_reaches_095(desk):
    curves, wall = desk.separable_runs()
    reached = {s: c.first_step_reaching(0.95) for s, c in curves.items()}
    best = {s: max(c.scores) for s, c in curves.items()}
    hits = [s for s, step in reached.items() if step is not None and step <= 2000]
    ok = len(hits) == len(PT_SEEDS) and wall < 300
    detail = ", ".join(f"seed {s}: best {best[s]:.3f} at step {reached[s]}" for s in curves)
    verdicts.record(4, "prompt tuning efficacy", ok, f"{len(hits)}/3 seeds reach 0.95 ({detail}); {wall:.0f}s (< 300s)")
    assert ok


def test_criterion_05_cross_task_pattern(desk):
    desk.separable_runs()
    mats, matrix_wall = desk.matrices()
    tune_wall = sum(v for pipe in desk.pipes.values() for k, v in pipe.timing.items()
                    if k.startswith("trained/source/") and k.endswith(f"/s{PT_SEEDS[0]}"))
    within = float(np.mean([m.within_type_mean() for m in mats.values()]))
    cross = float(np.mean([m.cross_type_mean() for m in mats.values()]))
    rand = float(np.mean([m.random_mean() for m in mats.values()]))
    wall = matrix_wall + tune_wall
    ok = within - cross >= 20 and abs(cross - rand) <= 10 and wall < 900
    verdicts.record(5, "cross-task pattern", ok,
                    f"within {within:.1f}, cross {cross:.1f}, random {rand:.1f}: gap {within - cross:.1f} (>= 20), "
                    f"|cross - random| {abs(cross - rand):.1f} (<= 10); {wall:.0f}s (< 900s)")
    assert ok


def test_criterion_06_tpt_task_speedup(desk):
    rows = [r for s, rs in desk.tpt_rows().items() for r in rs if r["same_type"]]
    good = [r for r in rows if r["comparable_result_speedup"] is not None and r["comparable_result_speedup"] >= 1.0]
    ok = bool(rows) and 3 * len(good) >= 2 * len(rows)
    speeds = ", ".join("N/A" if r["comparable_result_speedup"] is None else f"{r['comparable_result_speedup']:.2f}"
                       for r in rows)
    verdicts.record(6, "TPT-task speedup", ok, f"{len(good)}/{len(rows)} same-type-best targets >= 1.0 ({speeds})")
    assert ok


def test_criterion_07_distance_minimizing_projector(desk):
    rows = desk.distance_rows()
    train = [r for r in rows if r["role"] == "train"]
    far = [r for r in rows if r["role"] == "different_type"]
    gap = max(abs(r["projected"] - r["native"]) for r in train)
    drift = max(abs(r["projected"] - r["chance"]) for r in far)
    ok = bool(train) and bool(far) and gap <= 0.02 and drift <= 0.05
    verdicts.record(7, "distance-minimizing projector", ok,
                    f"train task |projected - native| {pts(gap)} pts (<= 2); "
                    f"different-type max |projected - chance| {pts(drift)} pts (<= 5)")
    assert ok


def test_criterion_08_task_tuning_projector(desk):
    per_seed = desk.task_tuning_rows()
    parts, ok = [], True
    for s, rows in per_seed.items():
        same = [r for r in rows if r["role"] == "same_type"]
        far = [r for r in rows if r["role"] == "different_type"]
        lift = min(r["projected"] - r["random"] for r in same)
        drift = max(abs(r["projected"] - r["chance"]) for r in far)
        ok = ok and bool(same) and bool(far) and lift >= 0.15 and drift <= 0.05
        parts.append(f"seed {s}: same-type lift {pts(lift)}, different-type drift {pts(drift)}")
    verdicts.record(8, "task-tuning projector", ok, "; ".join(parts) + " (lift >= 15, drift <= 5 pts)")
    assert ok


def test_criterion_09_same_task_separation(desk):
    by_seed = desk.seed_prompts()
    pipe = desk.pipes[0]
    model, suite = pipe.model("source"), pipe.suite()
    selection = I.Selection.parse(pipe.config["layer_selection"])
    items = [(t.name, t.task_type, s) for s in PT_SEEDS for t in suite.tasks]
    parts, ok = [], True
    for name in pipe.config["metrics"]:
        fn = I.metric_fn(name, model, selection)
        same, diff = [], []
        for (ta, ya, sa), (tb, yb, sb) in itertools.combinations(items, 2):
            if ta == tb:
                same.append(fn(by_seed[sa][ta][0], by_seed[sb][tb][0]))
            elif ya != yb:
                diff.append(fn(by_seed[sa][ta][0], by_seed[sb][tb][0]))
        ms, md = float(np.mean(same)), float(np.mean(diff))
        ok = ok and ms > md
        parts.append(f"{name} {ms:.3f} vs {md:.3f}")
    verdicts.record(9, "same-task separation", ok, "same-task vs different-type means: " + ", ".join(parts))
    assert ok


def test_criterion_10_indicator_sanity(desk):
    mats, _ = desk.matrices()
    worst = []
    for s, mat in mats.items():
        prompts = {k: p for k, (p, _) in desk.pipes[s].prompts("source", PT_SEEDS[0]).items()}
        owner = {p.content_digest(): k for k, p in prompts.items()}

        def zero_shot(src: SoftPrompt, tgt: SoftPrompt) -> float:
            return mat.score(owner[src.content_digest()], owner[tgt.content_digest()])

        report = I.indicator_report({"equal": zero_shot, "negated": lambda a, b: -zero_shot(a, b)}, prompts, mat)
        worst.extend(v for v in report.coefficients["equal"].values())
        worst.extend(None if v is None else -v for v in report.coefficients["negated"].values())
    ok = all(v == 1.0 for v in worst)
    verdicts.record(10, "indicator sanity", ok,
                    f"{sum(v == 1.0 for v in worst)}/{len(worst)} per-target coefficients exactly +1/-1 on real matrices")
    assert ok


def _damage(rng, raw: bytes) -> bytes:
    kind = int(rng.integers(4))
    if kind == 0:
        return raw[: int(rng.integers(0, len(raw)))]
    if kind == 1:
        out = bytearray(raw)
        out[int(rng.integers(len(raw)))] ^= int(rng.integers(1, 256))
        return bytes(out)
    if kind == 2:
        return raw + bytes(rng.integers(0, 256, size=int(rng.integers(1, 16)), dtype=np.uint8))
    return bytes(rng.integers(0, 256, size=int(rng.integers(0, 200)), dtype=np.uint8))


def test_criterion_11_persistence(tmp_path):
    rng = np.random.default_rng(11)
    mismatched, failures, loaded_damaged, checked = 0, [], 0, 0
    for i in range(5000):
        l, d = int(rng.integers(1, 9)), int(rng.integers(1, 33))
        p = SoftPrompt(rng.normal(size=(l, d)) * 10 ** rng.uniform(-3, 3), {"kind": "trained", "n": i},
                       "%064x" % i, f"task{i % 7}", int(rng.integers(0, 2**31)))
        path = tmp_path / "p.ptp"
        save_prompt(p, path)
        back = load_prompt(path)
        mismatched += prompt_to_bytes(back) != path.read_bytes() or back.values.tobytes() != p.values.tobytes()
        proj = Projector.init(l, d, int(rng.integers(1, 17)), int(rng.integers(1, 17)),
                              ("leaky_relu", "tanh")[i % 2], bool(i % 3 == 0), seed=i)
        path = tmp_path / "p.ptj"
        save_projector(proj, path)
        mismatched += projector_to_bytes(load_projector(path)) != path.read_bytes()
        if i % 5 == 0:
            for raw, loader in ((prompt_to_bytes(p), load_prompt), (path.read_bytes(), load_projector)):
                bad = tmp_path / "bad.bin"
                bad.write_bytes(_damage(rng, raw))
                checked += 1
                try:
                    loader(bad)
                    loaded_damaged += 1
                except PromptTransferError:
                    pass
                except Exception as exc:  # noqa: BLE001 - any other type is the failure being measured
                    failures.append(type(exc).__name__)
    ok = mismatched == 0 and not failures and loaded_damaged == 0
    verdicts.record(11, "persistence", ok,
                    f"10000 round trips, {mismatched} not byte-identical; {checked} damaged files, "
                    f"{loaded_damaged} accepted, untyped errors {sorted(set(failures))}")
    assert ok


def test_criterion_12_replay_is_byte_identical(tmp_path, monkeypatch):
    import json

    from test_config_cli import SEQUENCE, TINY

    monkeypatch.delenv(CACHE_ENV, raising=False)
    monkeypatch.delenv(OUT_ENV, raising=False)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        for cmd in SEQUENCE:
            assert cli.main([cmd, "--config", str(cfg), "--out", str(out)]) == 0, cmd

    def reports(out):
        return {p.relative_to(out).as_posix(): p.read_bytes()
                for p in sorted(out.rglob("*")) if p.suffix in (".csv", ".json") and p.name != "timing.json"}

    ra, rb = (reports(o) for o in outs)
    differ = sorted(k for k in ra.keys() | rb.keys() if ra.get(k) != rb.get(k))
    ok = bool(ra) and not differ
    verdicts.record(12, "deterministic replay", ok, f"{len(ra)} CSV/JSON files compared, {len(differ)} differ {differ[:3]}")
    assert ok
