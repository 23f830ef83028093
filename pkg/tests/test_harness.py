import csv
import io
import shutil

import numpy as np
import pytest
import yaml

from continual_iqa.cli import main
from continual_iqa.config import ConfigError, build_stream, load_config, parse_config
from continual_iqa.metrics import EvalLedger
from continual_iqa.plotting import emit_curves, embedding_silhouette, project_features
from continual_iqa.runner import (
    ResultBundle,
    ResumeConflict,
    load_results,
    permutation_suite,
    resume_all,
    run_experiment,
)

TINY = {
    "seeds": [0, 1],
    "stream": {"n_families": 4, "base_count": 2, "delta": 1, "samples_per_family": 60},
    "schedule": {"epochs_single": 6, "epochs_gan": 2, "epochs_multi": 6, "early_stop_min_epoch": 3,
                 "gan_augmentation_factor": 2, "batch_gan": 64},
    "buffer_size": 100,
}


def tiny(**overrides):
    return parse_config(TINY, **overrides)


def write_config(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def snapshot_files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix in (".csv", ".yaml")}


@pytest.fixture(scope="module")
def liqa_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    result = run_experiment(tiny(), out)
    return out, result


# configuration -------------------------------------------------------------------

def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="lamda_FD"):
        parse_config({"weights": {"lamda_FD": 1.0}})
    with pytest.raises(ConfigError, match="epochz"):
        parse_config({"epochz": 3})


def test_config_rejects_invalid_combinations():
    with pytest.raises(ConfigError, match="delta"):
        parse_config({"stream": {"delta": 2}})
    with pytest.raises(ConfigError, match="ablation"):
        parse_config({"method": "ft", "ablation": "no_fd"})
    with pytest.raises(ConfigError):
        parse_config({"seeds": [1, 1]})
    with pytest.raises(ConfigError):
        parse_config({"stream": {"kind": "dataset_shift", "manifests": ["a.csv"]}})


def test_config_file_and_overrides(tmp_path):
    path = write_config(tmp_path / "c.yaml", TINY)
    cfg = load_config(path, method="ewc", seeds=[3])
    assert cfg.method == "ewc" and cfg.seeds == [3]
    assert parse_config(yaml.safe_load(cfg.to_yaml())) == cfg
    mc = cfg.method_config()
    assert mc.schedule.epochs_single == 6 and mc.buffer_size == 100
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml")


def test_shipped_desk_config_loads():
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / "configs" / "desk.yaml")
    assert cfg.stream.n_families == 10 and cfg.seeds == [0, 1, 2, 3, 4]


def write_manifest(path, n, labels=("blur", "noise", "jpeg")):
    rows = ["image_path,raw_score,distortion_label,reference_id"]
    rows += [f"img{i}.png,{i % 10},{labels[i % len(labels)]},ref{i % 7}" for i in range(n)]
    path.write_text("\n".join(rows) + "\n")
    path.with_suffix(".meta.yaml").write_text(f"name: {path.stem}\nscore_range: [0, 9]\n")


def test_manifest_streams_resolve_against_data_root(tmp_path, monkeypatch):
    write_manifest(tmp_path / "one.csv", 60)
    write_manifest(tmp_path / "two.csv", 60)
    monkeypatch.setenv("LIQA_DATA_ROOT", str(tmp_path))
    cfg = parse_config({"stream": {"kind": "dataset_shift", "manifests": ["one.csv", "two.csv"]}})
    stream = build_stream(cfg.stream, 0)
    assert stream.M_all == 2
    cfg = parse_config({"stream": {"kind": "distortion_shift", "manifest": "one.csv", "base_labels": ["blur"],
                                   "delta": 1}})
    stream = build_stream(cfg.stream, 0)
    assert len(stream) == 3 and stream.labels[0] == "blur"
    bad = parse_config({"stream": {"kind": "distortion_shift", "manifest": "one.csv", "base_labels": ["haze"]}})
    with pytest.raises(ConfigError):
        build_stream(bad.stream, 0)
    missing = parse_config({"stream": {"kind": "dataset_shift", "manifests": ["x.csv", "y.csv"]}})
    with pytest.raises(FileNotFoundError):
        build_stream(missing.stream, 0)


# runner --------------------------------------------------------------------------

def test_run_writes_one_ledger_per_seed_and_one_summary(liqa_out):
    out, result = liqa_out
    assert sorted(p.parent.name for p in out.glob("liqa/*/ledger.csv")) == ["0", "1"]
    assert len(list(out.glob("liqa/summary.csv"))) == 1
    assert result.seeds == [0, 1] and result.n_tasks == 3
    summary = list(csv.reader(io.StringIO((out / "liqa" / "summary.csv").read_text())))
    assert summary[0] == ["task_index", "C", "F"] and len(summary) == 4
    assert summary[1][2] == ""
    assert (out / "liqa" / "0" / "progress.jsonl").read_text().count("\n") > 0


def test_rerun_is_byte_identical(liqa_out, tmp_path):
    out, _ = liqa_out
    run_experiment(tiny(), tmp_path)
    assert snapshot_files(tmp_path) == snapshot_files(out)


def test_output_directory_guards_its_configuration(liqa_out):
    out, _ = liqa_out
    with pytest.raises(ResumeConflict):
        run_experiment(tiny(buffer_size=50), out)


@pytest.mark.parametrize("boundary", [0, 1])
def test_resume_after_task_boundary_reproduces_results(liqa_out, tmp_path, boundary):
    out, _ = liqa_out
    work = tmp_path / "work"
    shutil.copytree(out, work)
    for seed_dir in (work / "liqa").glob("[0-9]*"):
        for ckpt in (seed_dir / "checkpoints").glob("task_*.pt"):
            if int(ckpt.stem.split("_")[1]) > boundary:
                ckpt.unlink()
        (seed_dir / "ledger.csv").unlink()
    (work / "liqa" / "summary.csv").unlink()
    resume_all(work)
    assert snapshot_files(work) == snapshot_files(out)


def test_load_results_round_trip(liqa_out):
    out, result = liqa_out
    (back,) = load_results(out)
    assert back.label == "liqa"
    assert back.per_task() == result.per_task()
    assert back.summary_csv() == result.summary_csv()


def test_keep_last_checkpoint_only(tmp_path):
    run_experiment(tiny(method="ft", seeds=[0]), tmp_path, keep_checkpoints="last")
    assert [p.name for p in (tmp_path / "ft" / "0" / "checkpoints").iterdir()] == ["task_2.pt"]


def test_permutation_suite(tmp_path):
    cfg = tiny(method="ft", seeds=[0])
    table = permutation_suite(cfg, 5, tmp_path / "a")
    assert len(table["rows"]) == 5
    assert len({r["permutation_seed"] for r in table["rows"]}) == 5
    lines = (tmp_path / "a" / "permutations" / "permutations.csv").read_text().splitlines()
    assert len(lines) == 7 and lines[-1].startswith("spread,")
    c = [r["C_bar"] for r in table["rows"]]
    assert table["C_spread"] == max(c) - min(c)
    again = permutation_suite(cfg, 5, tmp_path / "b")
    assert again["rows"] == table["rows"]


# figures ---------------------------------------------------------------------------

def _bundle(label, rows):
    led = EvalLedger()
    for t, row in enumerate(rows):
        led.add_row(t, row)
    return ResultBundle(label, {0: led})


def test_curves_have_one_series_per_method_and_csv_parity(tmp_path):
    a = _bundle("ft", [{0: 0.9}, {0: 0.5, 1: 0.8}, {0: 0.4, 1: 0.6, 2: 0.7}])
    b = _bundle("liqa", [{0: 0.9}, {0: 0.8, 1: 0.8}, {0: 0.7, 1: 0.8, 2: 0.7}])
    written = emit_curves([a, b], tmp_path)
    for key in ("correlation_index", "forgetting_index"):
        assert {p.suffix for p in written[key]} == {".png", ".pdf", ".csv"}
        assert all(p.stat().st_size > 0 for p in written[key])
    rows = list(csv.DictReader(open(tmp_path / "correlation_index.csv")))
    assert {r["method"] for r in rows} == {"ft", "liqa"}
    for bundle in (a, b):
        mine = [r for r in rows if r["method"] == bundle.label]
        assert [float(r["C"]) for r in mine] == [c for _, c, _ in bundle.per_task()]
    rows = list(csv.DictReader(open(tmp_path / "forgetting_index.csv")))
    assert [float(r["F"]) for r in rows if r["method"] == "ft"] == [f for _, _, f in a.per_task()[1:]]
    short = _bundle("si", [{0: 0.9}, {0: 0.5, 1: 0.8}])
    with pytest.raises(ValueError, match="mismatched"):
        emit_curves([a, short], tmp_path)


def two_families(rng, n=40):
    real = np.concatenate([rng.normal(0, 1, (n, 8)), rng.normal(12, 1, (n, 8))])
    pseudo = np.concatenate([rng.normal(0, 1, (n, 8)), rng.normal(12, 1, (n, 8))])
    labels = [0] * n + [1] * n
    return real, pseudo, labels


def test_feature_projection(tmp_path):
    real, pseudo, labels = two_families(np.random.default_rng(0))
    emb = project_features(real, pseudo, labels, labels, tmp_path / "proj")
    assert emb.shape == (len(real) + len(pseudo), 2)
    assert embedding_silhouette(emb, labels + labels) > 0.5
    for suffix in (".png", ".pdf", ".csv"):
        assert (tmp_path / f"proj{suffix}").stat().st_size > 0
    rows = list(csv.DictReader(open(tmp_path / "proj.csv")))
    assert len(rows) == len(emb) and {r["kind"] for r in rows} == {"real", "pseudo"}
    assert np.array_equal(emb, project_features(real, pseudo, labels, labels))
    with pytest.raises(ValueError):
        project_features(real[:5], pseudo, labels[:5], labels)


# command line ------------------------------------------------------------------------

def test_cli_run_report_and_figures(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {**TINY, "seeds": [0]})
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "method,C_bar,F_bar" and lines[1].startswith("liqa,")
    assert main(["run", "--config", str(cfg), "--out", str(out), "--method", "ft"]) == 0
    capsys.readouterr()

    assert main(["report", "--out", str(out), "--figures"]) == 0
    text = capsys.readouterr().out
    per_task, summary = text.split("\n\n")
    assert per_task.splitlines()[0] == "method,task_index,C,F"
    assert len(per_task.splitlines()) == 1 + 2 * 3
    assert summary.splitlines()[0] == "method,n_seeds,C_bar,F_bar"
    figs = out / "figures"
    for name in ("correlation_index", "forgetting_index", "features_liqa_seed0"):
        for suffix in (".png", ".pdf", ".csv"):
            assert (figs / f"{name}{suffix}").exists()
    assert not (figs / "features_ft_seed0.png").exists()


def test_cli_errors(tmp_path, capsys):
    bad = write_config(tmp_path / "bad.yaml", {"methd": "ft"})
    assert main(["run", "--config", str(bad)]) == 2
    assert "methd" in capsys.readouterr().err
    assert main(["resume", "--out", str(tmp_path / "nothing")]) == 2
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 1


def test_cli_permute(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {**TINY, "seeds": [0], "method": "ft"})
    assert main(["permute", "--config", str(cfg), "--orders", "2", "--out", str(tmp_path / "p")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "order,permutation_seed,C_bar,F_bar" and len(lines) == 4
