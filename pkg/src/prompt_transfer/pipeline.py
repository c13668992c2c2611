"""Experiment stages with on-disk reuse, driven by an :class:`ExperimentConfig`.

Every stage loads its inputs from the output directory when they already
exist there (verified by digest) and computes them otherwise, so any
subcommand can run first and replays skip finished work.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import binio
from . import cross_task as X
from . import indicators as I
from . import plotting
from .config import ExperimentConfig
from .errors import ConfigError, DigestMismatchError
from .model import ModelHandle, ModelSpec, PretrainConfig, load_model, pretrain, save_model
from .projector import (Projector, ProjectorConfig, load_projector, project, save_projector,
                        train_distance_minimizing, train_task_tuning)
from .tasks import Suite, build_suite, default_vocab, evaluate, pretraining_corpus
from .tuning import SoftPrompt, TrainCurve, TuneConfig, init_prompt, tune
from .warehouse import EntryKey, Manifest, WarehouseIndex

log = logging.getLogger(__name__)

CACHE_ENV = "PROMPT_TRANSFER_CACHE"


def curve_to_json(curve: TrainCurve) -> dict:
    """Curve without wall-clock fields, so reports replay byte-identically."""
    return {
        "steps": curve.steps,
        "train_loss": curve.losses,
        "dev_score": curve.scores,
        "convergence_step": curve.convergence_step,
    }


def curve_from_json(doc: dict) -> TrainCurve:
    c = TrainCurve()
    for s, l, v in zip(doc["steps"], doc["train_loss"], doc["dev_score"]):
        c.record(s, l, v, 0.0)
    c.convergence_step = doc["convergence_step"]
    return c


class Pipeline:
    def __init__(self, config: ExperimentConfig, jobs: int = 1, cache_dir: str | Path | None = None):
        self.config = config
        self.root = config.output_dir
        self.root.mkdir(parents=True, exist_ok=True)
        self.jobs = max(1, int(jobs))
        cache = cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV)
        self.cache_dir = Path(cache) if cache else None
        self.index = WarehouseIndex(self.root)
        self.manifest = Manifest(self.root)
        self.timing: dict[str, float] = {}
        self._models: dict[str, ModelHandle] = {}
        self._suites: dict[int, Suite] = {}
        self.vocab = default_vocab(config["suite"]["words_per_domain"])

    # -- helpers -------------------------------------------------------------

    def _write(self, rel: str, data: bytes | str) -> Path:
        path = self.root / rel
        binio.write_file(path, data.encode() if isinstance(data, str) else data)
        self.manifest.record(path)
        return path

    def _json(self, rel: str, obj) -> Path:
        return self._write(rel, X.dumps(obj))

    def _figure(self, rel: str, fn, *args) -> Path:
        path = fn(*args, self.root / rel)
        self.manifest.record(path)
        return path

    def finish(self) -> None:
        binio.write_file(self.root / "timing.json", X.dumps(self.timing).encode())
        self.manifest.write()

    @property
    def seeds(self) -> list[int]:
        return list(self.config["seeds"])

    def tune_config(self, seed: int) -> TuneConfig:
        pt = self.config["pt"]
        return TuneConfig(pt["learning_rate"], pt["batch_size"], pt["max_steps"], pt["eval_every"],
                          pt["patience_window"], seed, pt["weight_decay"], pt["early_stop"])

    # -- stages --------------------------------------------------------------

    def suite(self, seed: int | None = None) -> Suite:
        s = self.config["suite"]
        seed = s["seed"] if seed is None else seed
        if seed not in self._suites:
            self._suites[seed] = build_suite(seed, self.vocab, s["types"], s["tasks_per_type"], tuple(s["splits"]),
                                             world_seed=s["world_seed"])
        return self._suites[seed]

    def _recipe(self, role: str) -> dict:
        m = self.config["models"][role]
        s = self.config["suite"]
        return {"model": m, "world_seed": s["world_seed"], "types": s["types"], "words_per_domain": s["words_per_domain"]}

    def model(self, role: str) -> ModelHandle:
        """Load ``models/<role>.ptx`` if its recipe matches, else pretrain it."""
        if role in self._models:
            return self._models[role]
        if role not in self.config["models"]:
            raise ConfigError(f"models.{role}: no such model role")
        recipe = self._recipe(role)
        recipe_digest = binio.sha256(binio.canonical_json(recipe).encode())
        path = self.root / "models" / f"{role}.ptx"
        side = self.root / "models" / f"{role}.json"
        cached = self.cache_dir / f"{recipe_digest}.ptx" if self.cache_dir else None
        model = None
        if path.exists() and side.exists() and json.loads(side.read_text()).get("recipe_digest") == recipe_digest:
            model = load_model(path)
        elif cached is not None and cached.exists():
            model = load_model(cached)
            binio.write_file(path, cached.read_bytes())
        if model is None:
            m = recipe["model"]
            p = m["pretrain"]
            spec = ModelSpec(m["family"], tuple(self.vocab), m["num_layers"], m["hidden_dim"], m["ffn_dim"],
                             m["num_heads"], m["max_seq_len"], m["seed"])
            corpus = pretraining_corpus(self.suite(), p["records"], seed=m["seed"], null_fraction=p["null_fraction"],
                                        plain_fraction=p["plain_fraction"], distractor_fraction=p["distractor_fraction"],
                                        family=m["family"])
            t0 = time.perf_counter()
            log.info("pretraining %s model for %d steps", role, p["steps"])
            model = pretrain(spec, corpus, p["steps"], PretrainConfig(batch_size=p["batch_size"], learning_rate=p["learning_rate"]))
            self.timing[f"pretrain/{role}"] = time.perf_counter() - t0
            model.freeze()
            save_model(model, path)
            if cached is not None:
                cached.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(path, cached)
        self._json(f"models/{role}.json", {"recipe": recipe, "recipe_digest": recipe_digest, "digest": model.digest()})
        self.manifest.record(path)
        self._models[role] = model
        return model

    def _curve_rel(self, role: str, task: str, seed: int, kind: str) -> str:
        return f"curves/{role}/{task}__s{seed}__{kind}.json"

    def _stored(self, model, task: str, seed: int, kind: str, role: str):
        key = EntryKey(model.digest(), task, seed, kind)
        curve_path = self.root / self._curve_rel(role, task, seed, kind)
        if key in self.index and curve_path.exists():
            return self.index.load(key), curve_from_json(json.loads(curve_path.read_text()))
        return None

    def _keep(self, role: str, prompt: SoftPrompt, curve: TrainCurve, seed: int, wall: float, kind: str) -> None:
        self.index.store(prompt, seed, overwrite=True, provenance=kind)
        e = self.index._entries[EntryKey(prompt.model_digest, prompt.task, seed, kind)]
        self.manifest.record(self.root / e["path"])
        self._json(self._curve_rel(role, prompt.task, seed, kind), curve_to_json(curve))
        self.timing[f"{kind}/{role}/{prompt.task}/s{seed}"] = wall

    def prompts(self, role: str = "source", seed: int | None = None):
        """Vanilla PT prompt and curve for every task of the suite."""
        seed = self.seeds[0] if seed is None else seed
        model = self.model(role)
        suite = self.suite()
        l = self.config["pt"]["prompt_length"]

        def one(task):
            got = self._stored(model, task.name, seed, "trained", role)
            if got is not None:
                return got
            t0 = time.perf_counter()
            p, c = tune(model, task, init_prompt(l, model.spec.hidden_dim, seed=seed), self.tune_config(seed))
            self._keep(role, p, c, seed, time.perf_counter() - t0, "trained")
            return p, c

        out = self._map(one, suite.tasks)
        return {t.name: r for t, r in zip(suite.tasks, out)}

    def _map(self, fn, items):
        if self.jobs > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def matrix(self, role: str = "source", seed: int | None = None) -> X.TransferMatrix:
        seed = self.seeds[0] if seed is None else seed
        model = self.model(role)
        prompts = {k: p for k, (p, _) in self.prompts(role, seed).items()}
        m = X.zero_shot_matrix(model, prompts, self.suite(), random_prompts=self.config["random_prompts"],
                               random_seed=seed, jobs=self.jobs)
        stem = f"matrix_{role}_s{seed}"
        self._write(f"reports/{stem}.csv", m.to_csv())
        self._json(f"reports/{stem}.json", m.to_json())
        self._figure(f"figures/{stem}.png", plotting.transfer_heatmap, m)
        return m

    def tpt_task(self, role: str = "source", seed: int | None = None) -> list[dict]:
        seed = self.seeds[0] if seed is None else seed
        model = self.model(role)
        base = self.prompts(role, seed)
        m = self.matrix(role, seed)
        suite = self.suite()

        def one(target):
            src = X.select_source(m, target.name)
            got = self._stored(model, target.name, seed, "tpt_task", role)
            if got is None:
                t0 = time.perf_counter()
                p, c, rep = X.tpt_task(model, target, base[src][0], self.tune_config(seed), base[target.name][1])
                self._keep(role, p, c, seed, time.perf_counter() - t0, "tpt_task")
            else:
                c = got[1]
                rep = X.speedup_report(target.name, base[target.name][1], c, self.config["pt"]["eval_every"],
                                       self.config["pt"]["patience_window"])
            return {**rep.to_dict(), "source": src,
                    "same_type": suite[src].task_type == target.task_type}, rep, c

        out = self._map(one, suite.tasks)
        rows = [r for r, _, _ in out]
        self._write(f"reports/tpt_task_{role}_s{seed}.csv", X.speedups_csv([rep for _, rep, _ in out]))
        self._json(f"reports/tpt_task_{role}_s{seed}.json", rows)
        curves = {}
        for t, (_, _, c) in zip(suite.tasks, out):
            curves[f"{t.name} PT"] = base[t.name][1]
            curves[f"{t.name} TPT"] = c
        self._figure(f"figures/tpt_task_{role}_s{seed}.png", plotting.training_curves, curves)
        return rows

    # -- cross-model ----------------------------------------------------------

    def _train_tasks(self) -> list[str]:
        names = list(self.config["projector"]["train_tasks"])
        suite = self.suite()
        if not names:
            names = [suite.tasks[0].name]
        for n in names:
            if n not in suite.names:
                raise ConfigError(f"projector.train_tasks: unknown task {n!r}")
        return names

    def projector(self) -> Projector:
        pc = self.config["projector"]
        path = self.root / "projectors" / f"{pc['objective']}.ptj"
        src_model, tgt_model = self.model("source"), self.model("target")
        seed = self.seeds[0]
        src = {k: p for k, (p, _) in self.prompts("source", seed).items()}
        names = self._train_tasks()
        recipe = {"projector": pc, "train_tasks": names, "pt_seed": seed, "pt": self.config["pt"],
                  "source": src_model.digest(), "target": tgt_model.digest()}
        recipe_digest = binio.sha256(binio.canonical_json(recipe).encode())
        side = path.with_suffix(".json")
        if path.exists() and side.exists() and json.loads(side.read_text()).get("recipe_digest") == recipe_digest:
            proj = load_projector(path)
            self.manifest.record(path)
            self.manifest.record(side)
            return proj
        l = self.config["pt"]["prompt_length"]
        cfg = ProjectorConfig(pc["hidden_dim"], pc["learning_rate"], pc["batch_size"], pc["steps"], pc["activation"],
                              pc["output_layernorm"], seed=pc["seed"])
        proj = Projector.init(l, src_model.spec.hidden_dim, tgt_model.spec.hidden_dim, cfg.hidden_dim, cfg.activation,
                              cfg.output_layernorm, seed=cfg.seed)
        t0 = time.perf_counter()
        suite = self.suite()
        if pc["objective"] == "distance":
            tgt = {k: p for k, (p, _) in self.prompts("target", seed).items()}
            proj, history = train_distance_minimizing(proj, [(src[n], tgt[n]) for n in names], cfg, names)
        else:
            proj, history = train_task_tuning(proj, src, tgt_model, [suite[n] for n in names], cfg)
        self.timing[f"projector/{pc['objective']}"] = time.perf_counter() - t0
        save_projector(proj, path)
        self.manifest.record(path)
        self._json(f"projectors/{pc['objective']}.json", {"recipe": recipe, "recipe_digest": recipe_digest,
                                                           "digest": proj.digest()})
        self._json(f"reports/projector_{pc['objective']}_loss.json", history)
        return proj

    def project(self) -> list[dict]:
        """Zero-shot score of every projected source prompt on the target model."""
        proj = self.projector()
        tgt_model = self.model("target")
        seed = self.seeds[0]
        src = {k: p for k, (p, _) in self.prompts("source", seed).items()}
        native = self.prompts("target", seed)
        suite = self.suite()
        l, d = self.config["pt"]["prompt_length"], tgt_model.spec.hidden_dim
        rand = [init_prompt(l, d, seed=seed * 100003 + k) for k in range(self.config["random_prompts"])]
        train_types = {suite[n].task_type for n in proj.training_tasks}
        rows = []
        for task in suite.tasks:
            pp = project(proj, src[task.name])
            rows.append({
                "task": task.name,
                "type": task.task_type,
                "role": "train" if task.name in proj.training_tasks else
                        ("same_type" if task.task_type in train_types else "different_type"),
                "projected": evaluate(tgt_model, pp.values, task),
                "native": evaluate(tgt_model, native[task.name][0].values, task),
                "random": float(np.mean([evaluate(tgt_model, r.values, task) for r in rand])),
                "chance": 1.0 / task.spec.num_labels if not task.spec.is_generation else 0.0,
            })
        body = "task,type,role,projected,native,random,chance\n" + "".join(
            f"{r['task']},{r['type']},{r['role']},{X.fmt(r['projected'])},{X.fmt(r['native'])},"
            f"{X.fmt(r['random'])},{X.fmt(r['chance'])}\n" for r in rows)
        obj = self.config["projector"]["objective"]
        self._write(f"reports/projection_{obj}.csv", body)
        self._json(f"reports/projection_{obj}.json", rows)
        return rows

    def tpt_model(self) -> list[dict]:
        proj = self.projector()
        tgt_model = self.model("target")
        seed = self.seeds[0]
        src = {k: p for k, (p, _) in self.prompts("source", seed).items()}
        native = self.prompts("target", seed)
        suite = self.suite()

        def one(task):
            got = self._stored(tgt_model, task.name, seed, "tpt_model", "target")
            if got is None:
                t0 = time.perf_counter()
                p, c, rep = X.warm_start_tune(tgt_model, task, project(proj, src[task.name]), native[task.name][1],
                                              self.tune_config(seed))
                self._keep("target", p, c, seed, time.perf_counter() - t0, "tpt_model")
            else:
                rep = X.speedup_report(task.name, native[task.name][1], got[1], self.config["pt"]["eval_every"],
                                       self.config["pt"]["patience_window"])
            return rep

        reps = self._map(one, suite.tasks)
        self._write("reports/tpt_model.csv", X.speedups_csv(reps))
        self._json("reports/tpt_model.json", [r.to_dict() for r in reps])
        return [r.to_dict() for r in reps]

    # -- indicators ------------------------------------------------------------

    def indicators(self, role: str = "source") -> I.IndicatorReport:
        model = self.model(role)
        seed = self.seeds[0]
        prompts = {k: p for k, (p, _) in self.prompts(role, seed).items()}
        m = self.matrix(role, seed)
        selection = I.Selection.parse(self.config["layer_selection"])
        metrics = {name: I.metric_fn(name, model, selection) for name in self.config["metrics"]}
        with_on_i = dict(metrics)
        if len(self.seeds) > 1 and "on" in metrics:
            by_task: dict[str, list[SoftPrompt]] = {}
            for s in self.seeds:
                for k, (p, _) in self.prompts(role, s).items():
                    by_task.setdefault(k, []).append(p)
            with_on_i["on_i"] = I.on_intersection_fn(model, by_task, selection)
        report = I.indicator_report(with_on_i, prompts, m)
        self._write(f"reports/indicators_{role}.csv", report.to_csv())
        self._json(f"reports/indicators_{role}.json", report.to_json())
        self._figure(f"figures/indicators_{role}.png", plotting.indicator_bars, report)
        sweep = I.indicator_report({f"on@{sel.name}": I.metric_fn("on", model, sel)
                                    for sel in I.layer_sweep(model.spec.num_layers)}, prompts, m)
        self._write(f"reports/indicators_layers_{role}.csv", sweep.to_csv())
        self._figure(f"figures/indicators_layers_{role}.png",
                     lambda rep, path: plotting.indicator_bars(rep, path, "ON coefficient by layer selection"), sweep)
        if len(self.seeds) > 1:
            self._write(f"reports/similarity_{role}.csv", self.similarity_separation(role, metrics))
        return report

    def size_sweep(self) -> str:
        """Overall indicator coefficients of every configured model side by side."""
        reports = {role: self.indicators(role) for role in self.config["models"]}
        names = next(iter(reports.values())).metrics
        lines = ["model,num_layers,hidden_dim," + ",".join(names) + "\n"]
        for role, rep in reports.items():
            spec = self.model(role).spec
            cells = ["N/A" if rep.overall(n) is None else X.fmt(rep.overall(n)) for n in names]
            lines.append(f"{role},{spec.num_layers},{spec.hidden_dim}," + ",".join(cells) + "\n")
        body = "".join(lines)
        self._write("reports/indicators_by_model.csv", body)
        return body

    def similarity_separation(self, role: str, metrics) -> str:
        """Mean similarity of same-task, same-type and different-type prompt pairs over seeds."""
        by_seed = {s: {k: p for k, (p, _) in self.prompts(role, s).items()} for s in self.seeds}
        suite = self.suite()
        items = [(t.name, t.task_type, s) for s in self.seeds for t in suite.tasks]
        lines = ["metric,same_task,same_type,different_type\n"]
        for name, fn in metrics.items():
            buckets: dict[str, list[float]] = {"same_task": [], "same_type": [], "different_type": []}
            for i, (ta, ya, sa) in enumerate(items):
                for tb, yb, sb in items[i + 1:]:
                    v = fn(by_seed[sa][ta], by_seed[sb][tb])
                    key = "same_task" if ta == tb else ("same_type" if ya == yb else "different_type")
                    buckets[key].append(v)
            lines.append(f"{name}," + ",".join(X.fmt(np.mean(buckets[k])) if buckets[k] else "N/A" for k in buckets) + "\n")
        return "".join(lines)

    def retrieve(self, target: str, metric: str, role: str = "source") -> dict:
        """Stored trained prompt (other task) most similar to ``target``'s prompt."""
        model = self.model(role)
        seed = self.seeds[0]
        prompts = self.prompts(role, seed)
        if target not in prompts:
            raise ConfigError(f"unknown target task {target!r}")
        query = prompts[target][0]
        fn = I.metric_fn(metric, model, I.Selection.parse(self.config["layer_selection"]))
        best = None
        for key in self.index.find(model_digest=model.digest(), provenance="trained"):
            if key.task == target:
                continue
            try:
                cand = self.index.load(key)
            except DigestMismatchError:
                log.warning("skipping corrupted warehouse entry %s", key.as_list())
                continue
            score = fn(cand, query)
            rank = (-score, key.task, key.seed)
            if best is None or rank < best[0]:
                best = (rank, key, score)
        if best is None:
            raise ConfigError(f"warehouse holds no other prompts for model {model.digest()[:12]}")
        _, key, score = best
        out = {"target": target, "metric": metric, "task": key.task, "seed": key.seed,
               "provenance": key.provenance, "similarity": score}
        self._json(f"reports/retrieve_{target}_{metric}.json", out)
        return out
