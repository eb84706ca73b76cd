"""CLI subcommands, artifacts, exit codes, and report schemas."""

import json

import numpy as np
import pytest

from stitchseg.cli import main
from stitchseg.seg_head import read_label_pgm
from stitchseg.tensor_store import read_tensor

from conftest import rewrite_manifest


@pytest.fixture(scope="module")
def synth_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "bundle"
    rc = main(["synth", "--seed", "5", "--size", "448", "--classes", "4",
               "--sigma", "0.3", "--out", str(out), "--dim", "24"])
    assert rc == 0
    return out


def test_synth_then_run_then_eval(synth_bundle, tmp_path, capsys):
    run_dir = tmp_path / "run"
    rc = main(["run", "--bundle", str(synth_bundle), "--out", str(run_dir),
               "--save-logits"])
    assert rc == 0
    assert (run_dir / "pred.pgm").is_file()
    assert (run_dir / "pred_raw.pgm").is_file()
    assert (run_dir / "logits.stsr").is_file()
    report = json.loads((run_dir / "run_report.json").read_text())
    assert report["schema_version"] == 1
    assert report["crop_count"] == 4
    assert report["token_count"] == 784
    assert "total" in report["timings_ms"]
    assert report["config"]["streaming"] is True
    logits = read_tensor(run_dir / "logits.stsr")
    assert logits.shape == (4, 448, 448)

    capsys.readouterr()
    rc = main(["eval", "--pred", str(run_dir), "--gt",
               str(synth_bundle / "gt.stsr")])
    assert rc == 0
    result = json.loads(capsys.readouterr().out)
    assert 0.0 <= result["miou"] <= 1.0
    assert len(result["per_class"]) == 4


def test_eval_csv_and_perfect_score(synth_bundle, tmp_path, capsys):
    run_dir = tmp_path / "run"
    main(["run", "--bundle", str(synth_bundle), "--out", str(run_dir)])
    capsys.readouterr()
    rc = main(["eval", "--pred", str(run_dir / "pred.pgm"), "--gt",
               str(synth_bundle / "gt.stsr"), "--csv",
               "--out", str(tmp_path / "eval.csv")])
    assert rc == 0
    csv_text = (tmp_path / "eval.csv").read_text()
    assert csv_text.splitlines()[0] == "name,iou"
    assert "__miou__" in csv_text


def test_no_postprocess_makes_outputs_equal(synth_bundle, tmp_path):
    run_dir = tmp_path / "nopost"
    rc = main(["run", "--bundle", str(synth_bundle), "--out", str(run_dir),
               "--no-postprocess"])
    assert rc == 0
    pred = read_label_pgm(run_dir / "pred.pgm")
    raw = read_label_pgm(run_dir / "pred_raw.pgm")
    np.testing.assert_array_equal(pred, raw)


def test_postprocessed_differs_from_raw_here(synth_bundle, tmp_path):
    run_dir = tmp_path / "post"
    main(["run", "--bundle", str(synth_bundle), "--out", str(run_dir)])
    pred = read_label_pgm(run_dir / "pred.pgm")
    raw = read_label_pgm(run_dir / "pred_raw.pgm")
    assert not np.array_equal(pred, raw)  # sigma 0.3 leaves votes work to do


def test_run_validation_failures_exit_2(synth_bundle, tmp_path, capsys):
    assert main(["run", "--bundle", str(tmp_path / "missing"),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--bundle", str(synth_bundle), "--out",
                 str(tmp_path / "o"), "--window", "448"]) == 2
    assert main(["run", "--bundle", str(synth_bundle), "--out",
                 str(tmp_path / "o"), "--shorter-side", "560"]) == 2
    err = capsys.readouterr().err
    assert "error:" in err


def test_run_window_stride_match_passes(synth_bundle, tmp_path):
    assert main(["run", "--bundle", str(synth_bundle),
                 "--out", str(tmp_path / "o"),
                 "--shorter-side", "448", "--window", "336",
                 "--stride", "112"]) == 0


def test_inspect_valid_bundle(synth_bundle, capsys):
    rc = main(["inspect", "--bundle", str(synth_bundle)])
    assert rc == 0
    info = json.loads(capsys.readouterr().out)
    assert info["valid"] is True
    assert info["plan_matches"] is True
    assert info["crop_count"] == 4
    assert info["tokens_per_crop"] == 441
    assert len(info["classes"]) == 4


def test_inspect_broken_bundle_exits_2(synth_bundle, tmp_path, capsys):
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(synth_bundle, broken)
    rewrite_manifest(broken, lambda m: m.update(stride=100))
    assert main(["inspect", "--bundle", str(broken)]) == 2


def test_bench_report(tmp_path, capsys):
    rc = main(["bench", "--sizes", "96,160", "--patch", "16", "--dim", "16",
               "--block", "16", "--repeats", "2",
               "--out", str(tmp_path / "bench.json")])
    assert rc == 0
    report = json.loads((tmp_path / "bench.json").read_text())
    rows = report["rows"]
    assert [r["tokens"] for r in rows] == [36, 100]
    for row in rows:
        assert row["streaming_score_bytes"] < row["naive_score_bytes"]
        assert row["max_abs_diff"] <= 1e-5
    # ratio improves (shrinks) as N grows
    assert rows[1]["score_bytes_ratio"] < rows[0]["score_bytes_ratio"]


def test_bench_block_covering_n_gives_ratio_one(capsys):
    rc = main(["bench", "--sizes", "64", "--patch", "16", "--dim", "8",
               "--block", "64", "--repeats", "1"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["rows"][0]["score_bytes_ratio"] == 1.0


def test_paper_bench_token_counts(capsys):
    """336/448/560/672 at patch 16 give 441/784/1225/1764 tokens."""
    rc = main(["bench", "--sizes", "336,448,560,672", "--dim", "8",
               "--repeats", "1"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert [r["tokens"] for r in report["rows"]] == [441, 784, 1225, 1764]
    ratios = [r["score_bytes_ratio"] for r in report["rows"]]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def test_synth_crop_count_672(tmp_path, capsys):
    out = tmp_path / "b672"
    rc = main(["synth", "--seed", "1", "--size", "672", "--classes", "3",
               "--out", str(out), "--dim", "8"])
    assert rc == 0
    run_dir = tmp_path / "r672"
    rc = main(["run", "--bundle", str(out), "--out", str(run_dir)])
    assert rc == 0
    report = json.loads((run_dir / "run_report.json").read_text())
    assert report["crop_count"] == 16
