"""Acceptance gate: one test per primary criterion, each printing a PASS/FAIL line.

The lines are collected and echoed in the terminal summary (see conftest.py),
so ``pytest tests/test_acceptance.py`` ends with a compact report.  The two
training experiments are marked ``slow``.
"""
import json
import statistics
import subprocess
import sys
import time
from pathlib import Path

import pytest

from capplan import checks, cli
from capplan.metrics import evaluate, uniform_sampler
from capplan.synthworld import read_dataset
from capplan.infer import estimate_transition

RESULTS: list[str] = []

ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_EPOCHS = 60
ABLATION_MARGIN_PP = 10.0


def record(name: str, passed: bool, detail: str):
    RESULTS.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    print(RESULTS[-1])


def _check(result: checks.CheckResult, name: str, limit_s: float):
    ok = result.passed and result.seconds < limit_s
    record(name, ok, f"{result.detail}; {result.seconds:.1f}s (limit {limit_s:.0f}s)")
    assert ok, result.detail


def test_viterbi_oracle_equivalence():
    _check(checks.viterbi_oracle(instances=500), "viterbi oracle equivalence", 30)


def test_gradient_correctness():
    _check(checks.gradient_check(), "gradient correctness", 120)


def test_distribution_row_sums():
    _check(checks.row_sums(constructions=1000), "plan distribution / transition invariants", 60)


def test_metric_identities():
    _check(checks.metric_identities(datasets=100), "metric identities", 60)


# ---------------------------------------------------------------- experiments

def _cli(*argv):
    code = cli.main(list(argv))
    assert code == 0, f"capplan {' '.join(argv)} exited {code}"


@pytest.mark.slow
def test_end_to_end_synthetic_learning(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cpu0, wall0 = time.process_time(), time.perf_counter()
    _cli("gen-data")
    _cli("train")
    _cli("eval")
    cpu = time.process_time() - cpu0
    wall = time.perf_counter() - wall0
    report = json.loads(Path("results.jsonl").read_text().splitlines()[0])

    split = read_dataset("data.jsonl")
    A = estimate_transition([w.actions for w in split.train], 12)
    rand = evaluate(None, split.test, K=1, A=A, seed=0, sampler=uniform_sampler(12))[3]

    ok = report["sr"] >= 60.0 and report["miou"] >= 85.0 and cpu <= 20 * 60 and rand.sr < report["sr"]
    record("end-to-end synthetic learning", ok,
           f"T=3 SR {report['sr']:.2f} (>= 60), mIoU {report['miou']:.2f} (>= 85), mAcc {report['macc']:.2f}; "
           f"uniform-random SR {rand.sr:.2f} (expected ~0.06); "
           f"{cpu / 60:.1f} CPU-min / {wall / 60:.1f} wall-min (limit 20)")
    assert ok


def _ablation_run(tmp_path, seed, ablate):
    tag = f"s{seed}{'_abl' if ablate else ''}"
    common = ["--seed", str(seed), "--set", "obs_sharing=action", "--set", "caption_informativeness=1.0",
              "--dataset", str(tmp_path / f"data{seed}.jsonl")]
    extra = ["--ablate-context"] if ablate else []
    _cli("train", *common, *extra, "--epochs", str(ABLATION_EPOCHS), "--out", str(tmp_path / f"{tag}.ckpt"),
         "--set", f"loss_curve={tmp_path / (tag + '.curve')}")
    _cli("eval", *common, *extra, "--checkpoint", str(tmp_path / f"{tag}.ckpt"),
         "--out", str(tmp_path / f"{tag}.results"))
    return json.loads((tmp_path / f"{tag}.results").read_text().splitlines()[0])["macc"]


@pytest.mark.slow
def test_context_ablation(tmp_path):
    full, ablated = [], []
    for seed in ABLATION_SEEDS:
        _cli("gen-data", "--seed", str(seed), "--set", "obs_sharing=action",
             "--set", "caption_informativeness=1.0", "--out", str(tmp_path / f"data{seed}.jsonl"))
        full.append(_ablation_run(tmp_path, seed, ablate=False))
        ablated.append(_ablation_run(tmp_path, seed, ablate=True))
    gap = statistics.median(full) - statistics.median(ablated)
    ok = gap >= ABLATION_MARGIN_PP
    record("context ablation", ok,
           f"median test mAcc {statistics.median(full):.2f} with captions vs "
           f"{statistics.median(ablated):.2f} ablated, gap {gap:+.2f} pp (needs >= {ABLATION_MARGIN_PP:.0f}); "
           f"per seed {[round(f - a, 2) for f, a in zip(full, ablated)]}")
    assert ok


def test_determinism(tmp_path):
    def invoke(workdir):
        workdir.mkdir()
        outputs = {}
        for argv, produced in ((["gen-data"], "data.jsonl"),
                               (["train", "--epochs", "5"], "model.ckpt"),
                               (["eval"], "results.jsonl")):
            subprocess.run([sys.executable, "-m", "capplan.cli", *argv], cwd=workdir, check=True,
                           capture_output=True)
            outputs[argv[0]] = (workdir / produced).read_bytes()
        outputs["loss curve"] = (workdir / "loss_curve.jsonl").read_bytes()
        return outputs

    a, b = invoke(tmp_path / "a"), invoke(tmp_path / "b")
    same = {k: a[k] == b[k] for k in a}
    ok = all(same.values())
    record("determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok
