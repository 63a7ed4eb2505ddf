import csv
import json

import pytest

from onestep_sr.cli import build_parser, main

TINY = """
ae_width: 8
ae_steps: 20
ae_batch: 4
teacher_width: 8
teacher_blocks: 1
teacher_emb: 16
teacher_steps: 20
teacher_batch: 4
distill_steps: 6
batch_size: 2
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """make-data -> train vae -> train teacher on a tiny configuration, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(TINY)
    cfg = str(root / "tiny.yaml")
    assert main(["make-data", "--n", "12", "--n-val", "12", "--size", "32", "--seed", "1",
                 "--out", str(root / "data")]) == 0
    assert main(["train", "vae", "--data", str(root / "data"), "--out", str(root / "vae"), "--config", cfg]) == 0
    assert main(["train", "teacher", "--data", str(root / "data"), "--vae", str(root / "vae"),
                 "--out", str(root / "teacher"), "--config", cfg]) == 0
    return root, cfg


def _distill(root, cfg, name, *extra):
    return main(["train", "distill", "--data", str(root / "data"), "--vae", str(root / "vae"),
                 "--teacher", str(root / "teacher"), "--out", str(root / name), "--config", cfg, *extra])


def test_make_data_is_idempotent(tmp_path):
    for name in ("a", "b"):
        assert main(["make-data", "--n", "3", "--size", "32", "--seed", "2", "--out", str(tmp_path / name)]) == 0
    for sub in ("hq", "lq"):
        for f in sorted((tmp_path / "a" / "train" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "train" / sub / f.name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["recipe"]["downscale_factor"] == 4
    assert len(manifest["splits"]["train"]["files"]) == 3


def test_make_data_recipe_file(tmp_path):
    (tmp_path / "r.yaml").write_text("downscale_factor: 2\nnoise_sigma_range: [0.0, 0.0]\n")
    assert main(["make-data", "--n", "2", "--size", "16", "--recipe", str(tmp_path / "r.yaml"),
                 "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["recipe"]["downscale_factor"] == 2


def test_stage_manifests(run):
    root, _ = run
    vae = json.loads((root / "vae" / "manifest.json").read_text())
    assert vae["kind"] == "autoencoder" and "decoder_sha256" in vae
    assert "roundtrip_psnr_y" in vae["summary"] and vae["resolved_config"]["ae_steps"] == 20
    teacher = json.loads((root / "teacher" / "manifest.json").read_text())
    assert teacher["inputs"]["vae"]["groups"]["decoder"] == vae["groups"]["decoder"]["sha256"]
    assert "val_velocity_loss" in teacher["summary"]


def test_distill_defaults_and_log(run):
    root, cfg = run
    assert _distill(root, cfg, "full") == 0
    m = json.loads((root / "full" / "manifest.json").read_text())
    rc = m["resolved_config"]
    assert (rc["dasm"]["N"], rc["dasm"]["s"], rc["weights"]["w_cfg"]) == (4, 50, 7.5)
    assert m["frozen_before"] == m["frozen_after"]
    rows = list(csv.DictReader(open(root / "full" / "train_log.csv")))
    assert len(rows) == 6 and any(float(r["tsd"]) > 0 for r in rows)


def test_distill_gamma2_zero_logs_zero_tsd(run):
    root, cfg = run
    assert _distill(root, cfg, "recon", "--gamma2", "0", "--cfg-weight", "3.0", "--dasm-n", "0") == 0
    rc = json.loads((root / "recon" / "manifest.json").read_text())["resolved_config"]
    assert rc["weights"]["gamma2"] == 0.0 and rc["weights"]["w_cfg"] == 3.0 and rc["dasm"]["N"] == 0
    rows = list(csv.DictReader(open(root / "recon" / "train_log.csv")))
    assert all(float(r["tsd"]) == 0 for r in rows)


def test_eval_compare_and_grid(run):
    root, cfg = run
    if not (root / "full").exists():
        _distill(root, cfg, "full")
    if not (root / "recon").exists():
        _distill(root, cfg, "recon", "--gamma2", "0")
    out = root / "eval"
    assert main(["eval", "--data", str(root / "data"), "--vae", str(root / "vae"), "--teacher",
                 str(root / "teacher"), "--student", str(root / "recon"), "--compare", str(root / "full"),
                 "--baseline", "--grid-rows", "3", "--out", str(out)]) == 0
    lines = (out / "report_a.csv").read_text().splitlines()
    assert lines[0] == "id,psnr_y,ssim_y,perceptual,denoiser_evals"
    body = [ln for ln in lines[1:] if not ln.startswith("#")]
    assert len(body) == 12 and all(ln.endswith(",1") for ln in body)
    assert (out / "grid_a.png").exists() and (out / "grid_b.png").exists()
    from PIL import Image
    with Image.open(out / "grid_a.png") as im:
        assert im.size == (3 * 32, 3 * 32)
    deltas = (out / "compare.csv").read_text().splitlines()
    assert deltas[0] == "id,delta_psnr_y,delta_ssim_y,delta_perceptual"
    assert any(ln.startswith("# mean_delta_perceptual=") for ln in deltas)
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["aggregates"]) == {"a", "b", "bilinear"}


def test_missing_prerequisite_exit_code(run, tmp_path, capsys):
    root, cfg = run
    code = main(["train", "distill", "--data", str(root / "data"), "--vae", str(root / "vae"),
                 "--teacher", str(tmp_path / "missing"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "teacher checkpoint not found" in capsys.readouterr().err


def test_bad_arguments_exit_code():
    with pytest.raises(SystemExit) as err:
        main(["train", "distill", "--data"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["bogus"])
    assert err.value.code == 2


def test_gradcheck_only(capsys):
    assert main(["gradcheck", "--only", "tsd-identity"]) == 0
    out = capsys.readouterr().out
    assert "tsd_identity" in out and "1/1 oracles passed" in out
    assert main(["gradcheck", "--only", "not-a-check"]) == 2


def test_gradcheck_float32(capsys):
    assert main(["gradcheck", "--float32", "--only", "vsd-fd", "scheduler-roundtrip"]) == 0
    assert "tol=1e-02" in capsys.readouterr().out


def test_parser_lists_commands():
    text = build_parser().format_help()
    for cmd in ("make-data", "train", "eval", "gradcheck"):
        assert cmd in text
