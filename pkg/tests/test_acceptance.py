"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-5 are fast oracle checks. Criteria 6-9 share one desk-scale
pipeline (autoencoder, teacher, three distillation variants) built once per
session on CPU, which takes roughly a quarter of an hour.
"""

import time

import numpy as np
import pytest
import torch

from onestep_sr import gradcheck
from onestep_sr.config import TrainConfig
from onestep_sr.degradation import make_pairs, synth_hq_labeled
from onestep_sr.metrics import evaluate, evaluate_baseline
from onestep_sr.nets.checkpoint import module_checksum
from onestep_sr.trainer import encode_images, roundtrip_psnr, train_autoencoder, train_teacher

N_TRAIN, N_VAL, SIZE = 512, 64, 64
PSNR_MARGIN_DB = 1.5
DETERMINISM_STEPS = 100


def _report(log, number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    log.append(line)
    print(line)


def _run(names):
    start = time.perf_counter()
    results = gradcheck.run_checks(names)
    return results, time.perf_counter() - start


# -- oracle criteria ---------------------------------------------------------------

def test_criterion_1_blend_identity(acceptance_log):
    (res,), secs = _run(["tsd_identity"])
    ok = res.passed and secs < 10
    _report(acceptance_log, 1, "blend identity", ok, f"max rel err {res.error:.2e}, {secs:.1f}s")
    assert res.error <= 1e-6 and secs < 10


def test_criterion_2_finite_difference_oracles(acceptance_log):
    names = ["vsd_fd", "tsm_fd", "tsd_fd", "reconstruction_fd", "lora_diffusion_fd"]
    assert gradcheck.FD_STEP == 1e-4
    for net in (gradcheck.make_fixture(0).teacher, gradcheck.make_fixture(0).lora):
        assert gradcheck.param_count(net) <= 1000
    results, secs = _run(names)
    worst = max(r.error for r in results)
    ok = all(r.passed for r in results) and secs < 60
    _report(acceptance_log, 2, "finite-difference oracles", ok, f"worst rel err {worst:.2e}, {secs:.1f}s")
    assert worst <= 1e-4 and secs < 60


def test_criterion_3_zero_sentinels(acceptance_log):
    (res,), _ = _run(["zero_sentinels"])
    _report(acceptance_log, 3, "zero-gradient sentinels", res.error == 0.0, f"max |g| {res.error:.1e}")
    assert res.error == 0.0


def test_criterion_4_scheduler_roundtrip(acceptance_log):
    (res,), _ = _run(["scheduler_roundtrip"])
    _report(acceptance_log, 4, "scheduler reconstruction", res.error <= 1e-6, f"rel err {res.error:.2e}")
    assert res.error <= 1e-6


def test_criterion_5_dasm_bruteforce(acceptance_log):
    assert {n for n, _ in gradcheck.DASM_CASES} >= {1, 2, 4}
    assert any(t - n * 50 < 50 for n, t in gradcheck.DASM_CASES)
    (res,), _ = _run(["dasm_bruteforce"])
    _report(acceptance_log, 5, "DASM brute force", res.error <= 1e-6, f"max abs err {res.error:.2e}")
    assert res.error <= 1e-6


# -- desk-scale pipeline -------------------------------------------------------------

@pytest.fixture(scope="session")
def pipeline():
    from onestep_sr.trainer import distill

    cfg = TrainConfig()
    hq, labels = synth_hq_labeled(N_TRAIN, SIZE, 1)
    train = make_pairs(hq, cfg.recipe, 1, labels)
    vhq, vlabels = synth_hq_labeled(N_VAL, SIZE, 2)
    val = make_pairs(vhq, cfg.recipe, 2, vlabels)

    ae, _ = train_autoencoder(cfg, hq, vhq)
    teacher, _ = train_teacher(cfg, encode_images(ae, hq), labels)
    frozen = {"teacher": module_checksum(teacher), "decoder": module_checksum(ae.decoder)}

    variants = {"full": cfg, "no_tsd": cfg.override(**{"weights.gamma2": 0.0}),
                "no_dasm": cfg.override(**{"dasm.N": 0})}
    states, reports = {}, {}
    for name, c in variants.items():
        states[name] = distill(c, train, teacher, ae)
        reports[name] = evaluate(states[name].student, val, ae)
    frozen_after = {"teacher": module_checksum(teacher), "decoder": module_checksum(ae.decoder)}
    return {"cfg": cfg, "train": train, "val": val, "ae": ae, "teacher": teacher, "states": states,
            "reports": reports, "bilinear": evaluate_baseline(val, ae), "frozen": (frozen, frozen_after),
            "ae_psnr": roundtrip_psnr(ae, vhq)}


@pytest.mark.slow
def test_criterion_6_end_to_end(pipeline, acceptance_log):
    r = pipeline["reports"]
    full, base, nodasm = (r[k].mean("perceptual") for k in ("full", "no_tsd", "no_dasm"))
    psnr, bil = r["full"].mean("psnr_y"), pipeline["bilinear"].mean("psnr_y")
    checks = {"beats no-TSD perceptual": full < base, "beats no-DASM perceptual": full < nodasm,
              f"PSNR-Y >= bilinear + {PSNR_MARGIN_DB} dB": psnr >= bil + PSNR_MARGIN_DB}
    detail = (f"perceptual full={full:.4f} no_tsd={base:.4f} no_dasm={nodasm:.4f}; "
              f"PSNR-Y {psnr:.2f} vs bilinear {bil:.2f}; "
              + ", ".join(f"{k}: {'ok' if v else 'no'}" for k, v in checks.items()))
    _report(acceptance_log, 6, "end-to-end distillation", all(checks.values()), detail)
    assert all(checks.values()), detail


@pytest.mark.slow
def test_criterion_7_one_step(pipeline, acceptance_log):
    counts = {row["denoiser_evals"] for rep in pipeline["reports"].values() for row in rep.rows}
    _report(acceptance_log, 7, "one denoiser call per image", counts == {1}, f"per-image counts {sorted(counts)}")
    assert counts == {1}


@pytest.mark.slow
def test_criterion_8_determinism(pipeline, acceptance_log):
    from onestep_sr.trainer import distill

    cfg = pipeline["cfg"].override(distill_steps=DETERMINISM_STEPS)
    runs = []
    for _ in range(2):
        state = distill(cfg, pipeline["train"], pipeline["teacher"], pipeline["ae"])
        runs.append((state.history, evaluate(state.student, pipeline["val"], pipeline["ae"])))
    (log_a, rep_a), (log_b, rep_b) = runs
    same_log = len(log_a) == DETERMINISM_STEPS and log_a == log_b
    same_report = rep_a.rows == rep_b.rows and rep_a.ffd == rep_b.ffd
    _report(acceptance_log, 8, "determinism", same_log and same_report,
            f"{len(log_a)} logged steps, logs equal={same_log}, reports equal={same_report}")
    assert same_log and same_report


@pytest.mark.slow
def test_criterion_9_frozen_priors(pipeline, acceptance_log):
    before, after = pipeline["frozen"]
    ok = before == after
    _report(acceptance_log, 9, "frozen teacher and decoder", ok, f"teacher {after['teacher'][:12]}, "
            f"decoder {after['decoder'][:12]}")
    assert ok


@pytest.mark.slow
def test_pipeline_priors_are_usable(pipeline):
    assert pipeline["ae_psnr"] >= pipeline["cfg"].ae_psnr_threshold
    assert np.isfinite(pipeline["reports"]["full"].ffd)
