import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dsbridge import cli, losses
from dsbridge import engine as E
from dsbridge.model import ModelConfig, init_params, save_checkpoint
from dsbridge.stream import KINDS

SMALL = ["--batches-per-domain", "1", "--batch-size", "8"]


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    save_checkpoint(init_params(ModelConfig(dim=16, blocks=1, proj_dim=8), seed=0), d)
    return d


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def adapt(ckpt, out, *extra):
    return cli.main(["adapt", "--source", str(ckpt), "--out", str(out), *SMALL, *extra])


# -- gen-kb ------------------------------------------------------------------


def test_gen_kb_writes_one_file_per_exemplar(tmp_path):
    assert cli.main(["gen-kb", "--out", str(tmp_path / "kb"), "--classes", "10",
                     "--per-class", "2", "--seed", "7"]) == 0
    assert len(list((tmp_path / "kb").glob("*.ppm"))) == 20
    assert (tmp_path / "kb" / "manifest.json").is_file()


def test_gen_kb_rerun_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen-kb", "--out", str(tmp_path / name), "--seed", "7"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_kb_validation_and_overwrite(tmp_path):
    out = str(tmp_path / "kb")
    assert cli.main(["gen-kb", "--out", out, "--per-class", "0"]) == 2
    assert cli.main(["gen-kb", "--out", out]) == 0
    assert cli.main(["gen-kb", "--out", out]) == 4
    assert cli.main(["gen-kb", "--out", out, "--per-class", "1", "--force"]) == 0
    assert len(list(Path(out).glob("*.ppm"))) == 10


def test_gen_data_roundtrips_into_adapt(tmp_path, ckpt):
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(data), "--kinds", "fog,contrast", "--severity", "3",
                     *SMALL]) == 0
    assert cli.main(["gen-data", "--out", str(tmp_path / "bad"), "--kinds", "rain"]) == 2
    assert cli.main(["adapt", "--source", str(ckpt), "--out", str(tmp_path / "r1"),
                     "--data", str(data), "--batch-size", "8"]) == 0
    assert adapt(ckpt, tmp_path / "r2", "--kinds", "fog,contrast", "--severity", "3") == 0
    s1 = json.loads((tmp_path / "r1" / "summary.json").read_text())
    s2 = json.loads((tmp_path / "r2" / "summary.json").read_text())
    assert s1["stream_hash"] == s2["stream_hash"] and s1["mean_error"] == s2["mean_error"]


def test_train_source_tiny(tmp_path):
    out = tmp_path / "src"
    assert cli.main(["train-source", "--out", str(out), "--epochs", "0", "--samples", "10"]) == 0
    meta = json.loads((out / "source.json").read_text())
    assert 0 <= meta["clean_accuracy"] <= 1 and (out / "manifest.json").is_file()
    assert cli.main(["train-source", "--out", str(tmp_path / "x"), "--epochs", "-1"]) == 2


# -- adapt -------------------------------------------------------------------


def test_adapt_writes_metrics_and_summary(tmp_path, ckpt):
    assert adapt(ckpt, tmp_path / "run") == 0
    rows = read_csv(tmp_path / "run" / "metrics.csv")
    assert list(rows[0]) == list(E.CSV_COLUMNS) and len(rows) == len(KINDS)
    s = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert len(s["domain_errors"]) == len(KINDS)
    assert s["stream_order"] == "ordered" and s["st_variant"] == "teacher_student"
    # the resolved config is echoed in full
    resolved = s["run"]
    assert set(resolved) == {"adapt", "stream", "kb", "source", "out"}
    assert resolved["adapt"] == E.AdaptConfig(batch_size=8).to_dict()
    assert resolved["stream"]["batches_per_domain"] == 1


def test_adapt_entropy_variant_recorded(tmp_path, ckpt):
    assert adapt(ckpt, tmp_path / "run", "--st-variant", "entropy_min", "--kinds", "fog") == 0
    s = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert s["st_variant"] == "entropy_min" and s["update_scope"] == "norm_only"
    assert s["config"]["evaluate_with"] == "student"


def test_adapt_mixed_tags_stream(tmp_path, ckpt):
    assert adapt(ckpt, tmp_path / "run", "--mixed", "--kinds", "fog,contrast",
                 "--batches-per-domain", "2") == 0
    s = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert s["stream_order"] == "mixed" and s["run"]["stream"]["mixed"] is True


def test_flag_beats_file_beats_default(tmp_path, ckpt):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"adapt": {"lr": 5e-4, "momentum": 0.9}, "stream": {"kinds": ["fog"]},
                               "source": str(ckpt)}))
    assert cli.main(["adapt", "--config", str(cfg), "--out", str(tmp_path / "run"),
                     "--lr", "2e-4", *SMALL]) == 0
    a = json.loads((tmp_path / "run" / "summary.json").read_text())["config"]
    assert a["lr"] == 2e-4 and a["momentum"] == 0.9 and a["tau"] == E.AdaptConfig().tau


def test_resolve_config_rejects_unknown_keys():
    with pytest.raises(cli.UsageError):
        cli.resolve_config({"adapt": {}, "extra": 1}, {})
    with pytest.raises(cli.UsageError):
        cli.resolve_config({"stream": {"colour": 1}}, {})
    with pytest.raises(ValueError):
        cli.resolve_config({"adapt": {"learning_rate": 1}}, {})


def test_malformed_config_and_missing_checkpoint(tmp_path, ckpt):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["adapt", "--config", str(bad), "--source", str(ckpt),
                     "--out", str(tmp_path / "r")]) == 2
    assert cli.main(["adapt", "--source", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 4
    assert cli.main(["adapt", "--out", str(tmp_path / "r")]) == 2
    assert adapt(ckpt, tmp_path / "r", "--lr", "-1") == 2


def test_out_root_env(tmp_path, ckpt, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["gen-kb", "--out", "kb_rel", "--per-class", "1"]) == 0
    assert (tmp_path / "kb_rel" / "manifest.json").is_file()


def test_nan_abort_exit_code(tmp_path, ckpt, monkeypatch):
    real = losses.symmetric_ce

    def poisoned(p, q):
        out = real(p, q)
        out.data = np.array(np.nan)
        return out

    monkeypatch.setattr(losses, "symmetric_ce", poisoned)
    assert adapt(ckpt, tmp_path / "run", "--kinds", "fog") == 3
    assert list((tmp_path / "run").glob("abort_step*"))


def test_adapt_force_is_idempotent(tmp_path, ckpt):
    assert adapt(ckpt, tmp_path / "run", "--kinds", "fog") == 0
    first = (tmp_path / "run" / "metrics.csv").read_bytes()
    assert adapt(ckpt, tmp_path / "run", "--kinds", "fog") == 4
    assert adapt(ckpt, tmp_path / "run", "--kinds", "fog", "--force") == 0
    assert (tmp_path / "run" / "metrics.csv").read_bytes() == first


# -- ablate / report ---------------------------------------------------------


def test_ablate_grid_shares_stream(tmp_path, ckpt):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--source", str(ckpt), "--out", str(out), "--kinds", "fog,contrast",
                     *SMALL, "--with-frozen"]) == 0
    table = read_csv(out / "ablation.csv")
    rows = [r for r in table if r["row"] != "frozen"]
    assert [r["row"] for r in rows] == list(E.ABLATION_GRID)
    assert len({r["stream_hash"] for r in table}) == 1
    for name, parts in E.ABLATION_GRID.items():
        s = json.loads((out / name / "summary.json").read_text())
        assert set(s["config"]["parts"]) == set(parts)


def test_ablate_kb_sizes(tmp_path, ckpt):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--source", str(ckpt), "--out", str(out), "--kinds", "fog",
                     *SMALL, "--rows", "Ex7", "--kb-size", "1,2,4,8"]) == 0
    for m in (1, 2, 4, 8):
        s = json.loads((out / f"Ex7_M{m}" / "summary.json").read_text())
        assert s["kb_size"] == 10 * m
    assert cli.main(["ablate", "--source", str(ckpt), "--out", str(tmp_path / "x"),
                     "--rows", "Ex9"]) == 2


def test_report_single_and_multi(tmp_path, ckpt):
    for seed in ("0", "1"):
        assert adapt(ckpt, tmp_path / "runs" / seed, "--seed", seed, "--stream-seed", seed) == 0
    assert cli.main(["report", str(tmp_path / "runs" / "0"), "--out", str(tmp_path / "rep1")]) == 0
    single = read_csv(tmp_path / "rep1" / "domain_errors.csv")
    assert len(single) == len(KINDS) + 1 and single[-1]["domain"] == "mean"
    assert all(float(r["std"]) == 0 for r in single)
    assert cli.main(["report", str(tmp_path / "runs"), "--out", str(tmp_path / "rep2")]) == 0
    multi = read_csv(tmp_path / "rep2" / "domain_errors.csv")
    assert all(r["runs"] == "2" for r in multi)
    s0 = json.loads((tmp_path / "runs" / "0" / "summary.json").read_text())
    s1 = json.loads((tmp_path / "runs" / "1" / "summary.json").read_text())
    assert float(multi[-1]["mean"]) == pytest.approx((s0["mean_error"] + s1["mean_error"]) / 2, abs=1e-6)
    traces = read_csv(tmp_path / "rep2" / "loss_traces.csv")
    assert len(traces) == 2 * len(KINDS)


def test_report_rejects_incomparable_runs(tmp_path, ckpt, capsys):
    assert adapt(ckpt, tmp_path / "a", "--kinds", "fog") == 0
    assert adapt(ckpt, tmp_path / "b", "--kinds", "contrast") == 0
    assert cli.main(["report", str(tmp_path / "a"), str(tmp_path / "b"),
                     "--out", str(tmp_path / "rep")]) == 2
    assert "incomparable runs" in capsys.readouterr().err
    assert cli.main(["report", str(tmp_path / "missing"), "--out", str(tmp_path / "rep")]) == 4
