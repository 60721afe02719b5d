import json

import numpy as np
import pytest
import yaml

from roofcloud.cli import (
    EXIT_DATA,
    EXIT_DIVERGED,
    EXIT_OK,
    EXIT_USAGE,
    config_digest,
    load_config,
    main,
    read_csv_report,
)
from roofcloud.core import load_point_cloud

SPECS = [
    {"name": "flat-a", "kind": "flat", "width": 8, "depth": 6, "density": 4, "seed": 1},
    {"name": "gable-a", "kind": "gable", "width": 8, "depth": 6, "density": 4, "seed": 2},
]
FAST = ["--set", "optimizer.n_points=300", "--set", "optimizer.stage1_iters=60",
        "--set", "optimizer.stage2_iters=30"]


def strip_header(text):
    return "\n".join(ln for ln in text.splitlines() if "generated" not in ln)


@pytest.fixture
def specfile(tmp_path):
    p = tmp_path / "roofs.yaml"
    p.write_text(yaml.safe_dump(SPECS))
    return p


@pytest.fixture
def generated(tmp_path, specfile):
    out = tmp_path / "data"
    assert main(["gen", str(specfile), "-o", str(out), "--pad"]) == EXIT_OK
    return out


# --- config ----------------------------------------------------------------

def test_config_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\noptimizer:\n  alpha: 0.5\n  n_points: 100\n")
    cfg = load_config(p, ["optimizer.alpha=2"], seed=9)
    assert cfg.seed == 9 and cfg.optimizer.alpha == 2 and cfg.optimizer.n_points == 100
    assert cfg.optimizer_cfg().seed == 9
    assert cfg.eval_cfg().pad_margin == cfg.pad.margin


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("optimizer:\n  alpah: 0.5\n")
    assert main(["optimize", "x.ply", "-o", str(tmp_path / "o"), "--config", str(p)]) == EXIT_USAGE
    assert main(["optimize", "x.ply", "-o", str(tmp_path / "o"), "--set", "bogus.k=1"]) == EXIT_USAGE


def test_config_digest_tracks_values():
    assert config_digest(load_config()) == config_digest(load_config())
    assert config_digest(load_config()) != config_digest(load_config(overrides=["optimizer.alpha=0.5"]))


def test_usage_errors_exit_1(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["nosuch"]) == EXIT_USAGE
    assert main(["optimize", "x.ply", "-o", str(tmp_path), "--mode", "bogus"]) == EXIT_USAGE
    assert main(["eval", "a.ply", "b.ply", "-o", str(tmp_path), "--jobs", "0"]) == EXIT_USAGE


# --- gen / pad -------------------------------------------------------------

def test_gen_writes_samples_and_manifest(generated):
    manifest = json.loads((generated / "manifest.json").read_text())
    assert [s["name"] for s in manifest["samples"]] == ["flat-a", "gable-a"]
    assert "generated" in manifest
    side = json.loads((generated / "gable-a.json").read_text())
    assert side["spec"]["kind"] == "gable" and len(side["facet_models"]) == 2
    cloud = load_point_cloud(generated / "gable-a.ply")
    assert len(side["facet_labels"]) == len(cloud)
    padded = load_point_cloud(generated / "gable-a_padded.ply")
    assert len(padded) > len(cloud)
    assert (generated / "config.resolved.yaml").exists()


def test_gen_errors(tmp_path, capsys):
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert main(["gen", str(empty), "-o", str(tmp_path / "o")]) == EXIT_DATA
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump([{"kind": "gable"}, {"kind": "dome"}]))
    assert main(["gen", str(bad), "-o", str(tmp_path / "o")]) == EXIT_DATA
    assert "entry 1" in capsys.readouterr().err
    assert main(["gen", str(tmp_path / "missing.yaml"), "-o", str(tmp_path / "o")]) == EXIT_DATA


def test_gen_warns_on_duplicate_seeds(tmp_path, capsys):
    p = tmp_path / "dup.yaml"
    p.write_text(yaml.safe_dump([{"kind": "flat", "seed": 4}, {"kind": "gable", "seed": 4}]))
    assert main(["gen", str(p), "-o", str(tmp_path / "o")]) == EXIT_OK
    assert "duplicate seeds" in capsys.readouterr().err


def test_pad_uses_sidecar_outline(generated, tmp_path):
    out = tmp_path / "p.ply"
    assert main(["pad", str(generated / "flat-a.ply"), "-o", str(out)]) == EXIT_OK
    padded = load_point_cloud(out)
    roof = load_point_cloud(generated / "flat-a.ply")
    assert len(padded) > len(roof)
    np.testing.assert_array_equal(padded.points[: len(roof)], roof.points)


def test_pad_missing_input(tmp_path):
    assert main(["pad", str(tmp_path / "none.ply"), "-o", str(tmp_path / "p.ply")]) == EXIT_DATA


# --- optimize --------------------------------------------------------------

def test_optimize_two_stage_artifacts(generated, tmp_path):
    out = tmp_path / "run"
    assert main(["optimize", str(generated / "gable-a_padded.ply"), "-o", str(out), *FAST]) == EXIT_OK
    assert len(load_point_cloud(out / "x_inter.ply")) == 300
    assert len(load_point_cloud(out / "x_final.ply")) == 300
    rows = read_csv_report(out / "history.csv")
    assert len(rows) == 90 and {r["stage"] for r in rows} == {"1", "2"}


def test_optimize_single_loss_has_no_inter(generated, tmp_path):
    out = tmp_path / "run"
    assert main(["optimize", str(generated / "flat-a.ply"), "-o", str(out), "--mode", "cd-only", *FAST]) == EXIT_OK
    assert not (out / "x_inter.ply").exists()
    assert len(read_csv_report(out / "history.csv")) == 90


def test_optimize_divergence_exit_3(generated, tmp_path):
    out = tmp_path / "run"
    code = main(["optimize", str(generated / "gable-a.ply"), "-o", str(out), *FAST,
                 "--set", "optimizer.step_size=10"])
    assert code == EXIT_DIVERGED
    assert len(read_csv_report(out / "history.csv")) >= 1


def test_optimize_is_deterministic(generated, tmp_path):
    texts = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["optimize", str(generated / "flat-a.ply"), "-o", str(out), *FAST, "--seed", "5"]) == EXIT_OK
        texts.append(((out / "x_final.ply").read_bytes(), strip_header((out / "history.csv").read_text())))
    assert texts[0] == texts[1]


# --- eval ------------------------------------------------------------------

def test_eval_self_single_pair(generated, tmp_path):
    out = tmp_path / "ev"
    gt = generated / "gable-a.ply"
    assert main(["eval", str(gt), str(gt), "-o", str(out)]) == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    m = rep["samples"]["gable-a"]["metrics"]
    assert m["quality"] == 1.0 and m["outline_iou"] == 1.0
    rows = read_csv_report(out / "report.csv")
    assert rows[0]["sample"] == "gable-a" and float(rows[0]["quality"]) == 1.0


def test_eval_batch_mean_row(generated, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", str(generated), str(generated), "-o", str(out), "--with-pad"]) == EXIT_OK
    rows = read_csv_report(out / "report.csv")
    assert [r["sample"] for r in rows] == ["flat-a", "gable-a", "mean"]
    rep = json.loads((out / "report.json").read_text())
    assert rep["aggregate"]["quality"] == 1.0


def test_eval_errors(generated, tmp_path):
    gt = generated / "gable-a.ply"
    assert main(["eval", str(gt), str(tmp_path / "none.ply"), "-o", str(tmp_path / "e")]) == EXIT_DATA
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 2\nend_header\n1 2\n")
    assert main(["eval", str(gt), str(bad), "-o", str(tmp_path / "e")]) == EXIT_DATA
    assert main(["eval", str(gt), str(generated), "-o", str(tmp_path / "e")]) == EXIT_USAGE


# --- ablate ----------------------------------------------------------------

def ablate_args(generated, out, jobs):
    return ["ablate", str(generated / "manifest.json"), "--grid", "alpha", "--values", "0", "1",
            "-o", str(out), "--jobs", str(jobs), *FAST]


def test_ablate_tables_and_cache(generated, tmp_path, capsys):
    out = tmp_path / "ab"
    assert main(ablate_args(generated, out, 1)) == EXIT_OK
    rows = read_csv_report(out / "ablation_alpha.csv")
    assert [r["alpha"] for r in rows] == ["alpha=0", "alpha=1"]
    assert "seconds" not in ",".join(rows[0])
    timing = read_csv_report(out / "timing_alpha.csv")
    assert len(timing) == 2
    combined = json.loads((out / "ablation_alpha.json").read_text())
    assert combined["cells"]["alpha=1/gable-a"]["inter"] is not None
    assert len(list((out / "cache").glob("*.json"))) == 4
    capsys.readouterr()
    assert main(ablate_args(generated, out, 1)) == EXIT_OK
    assert "0 cell(s) run, 4 from cache" in capsys.readouterr().out


def test_ablate_independent_of_jobs(generated, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(ablate_args(generated, a, 1)) == EXIT_OK
    assert main(ablate_args(generated, b, 2)) == EXIT_OK
    for name in ("ablation_alpha.csv", "ablation_alpha.json"):
        assert strip_header((a / name).read_text()) == strip_header((b / name).read_text())


def test_ablate_bad_values(generated, tmp_path):
    args = ["ablate", str(generated / "manifest.json"), "--grid", "arm", "--values", "nope", "-o", str(tmp_path)]
    assert main(args) == EXIT_USAGE
    assert main(["ablate", str(tmp_path / "none.json"), "--grid", "alpha", "-o", str(tmp_path)]) == EXIT_DATA


# --- plot ------------------------------------------------------------------

def test_plots_are_deterministic_svg(generated, tmp_path):
    gt = generated / "gable-a.ply"
    pred = generated / "flat-a.ply"
    run = tmp_path / "run"
    assert main(["optimize", str(gt), "-o", str(run), *FAST]) == EXIT_OK
    jobs = [
        ["density", str(gt), str(run / "x_final.ply")],
        ["history", str(run / "history.csv")],
        ["cloud-topdown", str(pred)],
    ]
    for i, job in enumerate(jobs):
        outs = [tmp_path / f"p{i}{s}.svg" for s in "ab"]
        for o in outs:
            assert main(["plot", *job, "-o", str(o)]) == EXIT_OK
        text = outs[0].read_text()
        assert text.lstrip().startswith("<?xml") and "<svg" in text
        assert text == outs[1].read_text()


def test_plot_errors(generated, tmp_path):
    gt = generated / "gable-a.ply"
    assert main(["plot", "history", str(gt), "-o", str(tmp_path / "h.svg")]) == EXIT_USAGE
    assert main(["plot", "density", str(gt), "-o", str(tmp_path / "d.svg")]) == EXIT_USAGE
    assert main(["plot", "cloud-topdown", str(tmp_path / "x.ply"), "-o", str(tmp_path / "c.svg")]) == EXIT_DATA
