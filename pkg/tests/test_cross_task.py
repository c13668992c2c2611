import csv
import io

import numpy as np
import pytest

from conftest import tiny_spec
from prompt_transfer.cross_task import (SpeedupReport, TransferMatrix, select_source, speedup_report, speedups_csv,
                                        tpt_task, zero_shot_matrix)
from prompt_transfer.errors import DigestMismatchError, ShapeError
from prompt_transfer.model import ModelHandle
from prompt_transfer.tasks import evaluate
from prompt_transfer.tuning import SoftPrompt, TrainCurve, TuneConfig, init_prompt, tune

QUICK = TuneConfig(max_steps=40, eval_every=20, patience_window=20, batch_size=8)


def grid(raw, names=("a", "b", "c"), types=None):
    raw = np.asarray(raw, dtype=float)
    types = types or {n: "SA" for n in names}
    return TransferMatrix(list(names), list(names), raw, np.diag(raw).copy(), np.full(len(names), 0.5), None, types)


def curve(pairs):
    c = TrainCurve()
    for step, score in pairs:
        c.record(step, 1.0 - score, score, 0.0)
    return c


@pytest.fixture(scope="module")
def trained(vocab, small_suite):
    m = ModelHandle(tiny_spec(vocab)).freeze()
    prompts, curves = {}, {}
    for task in small_suite:
        prompts[task.name], curves[task.name] = tune(m, task, init_prompt(4, 16, seed=0), QUICK)
    return m, prompts, curves


def test_select_source_single_and_best():
    m = grid([[0.9, 0.8], [0.6, 0.95]], names=("a", "b"))
    assert select_source(m, "a") == "b"
    m = grid([[0.9, 0.9, 0.7], [0.5, 0.8, 0.9], [0.5, 0.7, 0.8]])
    assert select_source(m, "c") == "b"
    assert select_source(m, "a") in ("b", "c")


def test_select_source_tie_goes_to_smaller_name():
    m = grid([[0.9, 0.7, 0.7], [0.6, 0.8, 0.9], [0.6, 0.7, 0.8]])
    assert select_source(m, "a") == "b"
    with pytest.raises(ValueError):
        select_source(grid([[1.0]], names=("a",)), "a")
    with pytest.raises(KeyError):
        select_source(m, "zz")


def test_speedup_arithmetic():
    r = SpeedupReport("t", 1200, 400, 300, 100, 0.9, 0.91)
    assert r.convergence_speedup == 3.0
    assert r.comparable_result_speedup == 4.0
    assert SpeedupReport("t", 1000, 500, None, 100, 0.9, 0.8).convergence_speedup == 2.0
    assert SpeedupReport("t", 1000, 500, None, 100, 0.9, 0.8).comparable_result_speedup is None


def test_speedup_floor_for_step_zero_comparable():
    # warm start from the target's own converged prompt: already at the PT score at step 0
    r = SpeedupReport("t", 800, 0, 0, 100, 0.9, 0.9)
    assert r.convergence_speedup == 8.0 and r.comparable_result_speedup == 8.0


def test_speedup_report_from_curves_and_csv():
    pt = curve([(0, 0.5), (100, 0.7), (200, 0.9), (300, 0.9), (400, 0.9), (500, 0.9), (600, 0.9)])
    pt.convergence_step = 200
    tpt = curve([(0, 0.8), (100, 0.9), (200, 0.9), (300, 0.9), (400, 0.9)])
    r = speedup_report("t", pt, tpt, 100, 300)
    assert (r.tpt_convergence, r.tpt_comparable) == (100, 100)
    assert r.convergence_speedup == 2.0
    never = curve([(0, 0.5), (100, 0.6), (200, 0.6), (300, 0.6), (400, 0.6)])
    rows = list(csv.reader(io.StringIO(speedups_csv([r, speedup_report("u", pt, never, 100, 300)]))))
    assert rows[0] == ["task", "score", "convergence_speedup", "comparable_result_speedup"]
    assert rows[1] == ["t", "0.9", "2", "2"] and rows[2][-1] == "N/A"
    with pytest.raises(ValueError):
        speedup_report("t", None, tpt, 100, 300)


def test_within_and_cross_type_means_exclude_self_pairs():
    types = {"a": "SA", "b": "SA", "c": "NLI"}
    m = grid([[1.0, 0.8, 0.5], [0.9, 1.0, 0.4], [0.5, 0.5, 1.0]], types=types)
    rel = m.relative
    assert m.within_type_mean() == pytest.approx((rel[0, 1] + rel[1, 0]) / 2)
    assert m.cross_type_mean() == pytest.approx(np.mean([rel[0, 2], rel[1, 2], rel[2, 0], rel[2, 1]]))


def test_matrix_diagonal_is_100_and_nothing_moves(trained, small_suite):
    m, prompts, _ = trained
    before = {k: p.values.copy() for k, p in prompts.items()}
    digest = m.digest()
    mat = zero_shot_matrix(m, prompts, small_suite, random_prompts=3)
    np.testing.assert_array_equal(np.diag(mat.relative), 100.0)
    assert np.all(mat.relative >= 0)
    assert mat.random_draws.shape == (3, 4)
    assert m.digest() == digest
    assert all(np.array_equal(before[k], p.values) for k, p in prompts.items())
    again = zero_shot_matrix(m, prompts, small_suite, random_prompts=3, jobs=3)
    assert again.to_csv() == mat.to_csv()


def test_matrix_csv_shape(trained, small_suite):
    m, prompts, _ = trained
    rows = list(csv.reader(io.StringIO(zero_shot_matrix(m, prompts, small_suite, random_prompts=2).to_csv())))
    assert len(rows) == 6 and all(len(r) == 5 for r in rows)
    assert rows[0][1:] == small_suite.names and rows[-1][0] == "random"
    assert all("," not in v for r in rows[1:] for v in r[1:])


def test_matrix_rejects_foreign_prompt(trained, small_suite):
    m, prompts, _ = trained
    bad = dict(prompts)
    bad["sa_b"] = SoftPrompt(prompts["sa_b"].values, model_digest="0" * 64, task="sa_b")
    with pytest.raises(DigestMismatchError, match="sa_b"):
        zero_shot_matrix(m, bad, small_suite, random_prompts=1)


def test_tpt_task_warm_starts_and_reports(trained, small_suite):
    m, prompts, curves = trained
    digest = m.digest()
    p, c, rep = tpt_task(m, small_suite["sa_b"], prompts["sa_a"], QUICK, curves["sa_b"])
    assert p.provenance["init"]["kind"] == "warm_start"
    assert p.provenance["init"]["source"] == prompts["sa_a"].content_digest()
    assert c.checkpoints[0].dev_score == evaluate(m, prompts["sa_a"], small_suite["sa_b"], "dev")
    assert rep.convergence_speedup > 0
    assert m.digest() == digest
    with pytest.raises(ValueError):
        tpt_task(m, small_suite["sa_b"], prompts["sa_a"], QUICK, None)
    with pytest.raises(ShapeError):
        tpt_task(m, small_suite["sa_b"], prompts["sa_a"], QUICK, curves["sa_b"], prompt_length=8)
