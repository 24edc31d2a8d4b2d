import json
import subprocess
import sys
from pathlib import Path

import pytest

from avenas.cli import EXIT_OK, EXIT_VALIDATION, main
from avenas.cost_models import load_latency_table, score_arch
from avenas.supernet import SampledArch, toy_spec, validate_arch
from avenas.objective import load_sequence


def write_config(tmp_path, **overrides):
    doc = {
        "seed": 5,
        "profile": "toy-dims",
        "data": {"n_sequences": 8, "frames_per_sequence": 24,
                 "stream_frames": 120, "synthesize_lut": True},
        "search": {"steps": 80, "batch_size": 8, "K": 4,
                   "gumbel_temperature": 2.0, "lambda_lat": 0.05,
                   "lr": 3e-3},
        "train": {"steps": 120, "batch_size": 8, "lr": 3e-3},
        "latex": {"thresholds": [0.0, 2.0]},
        "paths": {"out_dir": str(tmp_path / "out")},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and key in doc:
            doc[key].update(value)
        else:
            doc[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_unknown_config_key_rejected(tmp_path, capsys):
    path = write_config(tmp_path)
    doc = json.loads(path.read_text())
    doc["serach"] = {}
    path.write_text(json.dumps(doc))
    assert main(["--config", str(path), "gen-data"]) == EXIT_VALIDATION
    assert "serach" in capsys.readouterr().err


def test_unknown_section_key_rejected(tmp_path, capsys):
    path = write_config(tmp_path, search={"stepz": 10})
    assert main(["--config", str(path), "search"]) == EXIT_VALIDATION
    assert "stepz" in capsys.readouterr().err


def test_missing_config_flag(capsys):
    assert main(["search"]) == EXIT_VALIDATION


def test_missing_lut_fails_before_compute(tmp_path, capsys):
    path = write_config(tmp_path, data={"synthesize_lut": False})
    assert main(["--config", str(path), "search"]) == EXIT_VALIDATION
    assert "latency table" in capsys.readouterr().err


def test_gen_data_outputs_deterministic(tmp_path):
    path = write_config(tmp_path)
    assert main(["--config", str(path), "gen-data"]) == EXIT_OK
    out = tmp_path / "out"
    stream1 = (out / "stream.bin").read_bytes()
    lut1 = (out / "latency_table.csv").read_bytes()
    assert main(["--config", str(path), "gen-data"]) == EXIT_OK
    assert (out / "stream.bin").read_bytes() == stream1
    assert (out / "latency_table.csv").read_bytes() == lut1
    frames = load_sequence(out / "stream.bin")
    assert len(frames) == 120
    lut = load_latency_table(out / "latency_table.csv")
    lut.validate_coverage(toy_spec())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> search -> train once; several tests inspect the artifacts."""
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp_path)
    assert main(["--config", str(cfg), "gen-data"]) == EXIT_OK
    assert main(["--config", str(cfg), "search"]) == EXIT_OK
    assert main(["--config", str(cfg), "train"]) == EXIT_OK
    return tmp_path, cfg


def test_search_emits_valid_arch(pipeline):
    tmp_path, _ = pipeline
    arch = SampledArch.load(tmp_path / "out" / "arch.json")
    validate_arch(toy_spec(), arch)
    doc = json.loads((tmp_path / "out" / "arch.json").read_text())
    assert "mflops" in doc and "total_mflops" in doc["mflops"]
    log_lines = (tmp_path / "out" / "search_log.jsonl").read_text().splitlines()
    rows = [json.loads(l) for l in log_lines]
    assert {"step", "f", "latency_ms", "res_dist"} <= set(rows[0])


def test_search_byte_identical_across_runs(pipeline, tmp_path):
    _, cfg = pipeline
    ref = json.loads(cfg.read_text())["paths"]["out_dir"]
    out2 = tmp_path / "out2"
    assert main(["--config", str(cfg), "--out", str(out2), "gen-data"]) == EXIT_OK
    assert main(["--config", str(cfg), "--out", str(out2), "search"]) == EXIT_OK
    assert (out2 / "arch.json").read_bytes() == (Path(ref) / "arch.json").read_bytes()
    assert (out2 / "search_log.jsonl").read_bytes() == \
        (Path(ref) / "search_log.jsonl").read_bytes()


def test_train_eval_simulate(pipeline):
    tmp_path, cfg = pipeline
    out = tmp_path / "out"
    assert (out / "weights.bin").exists()
    metrics = json.loads((out / "train_metrics.json").read_text())
    assert "train" in metrics and "test" in metrics
    assert main(["--config", str(cfg), "eval"]) == EXIT_OK
    assert (out / "eval_metrics.json").exists()
    assert main(["--config", str(cfg), "simulate"]) == EXIT_OK
    rows = (out / "simulate.csv").read_text().splitlines()
    assert rows[0] == "threshold,skip_ratio,mean_mse,avg_cost_mflops"
    first = rows[1].split(",")
    assert float(first[0]) == 0.0 and float(first[1]) == 0.0  # no skips at 0


def test_train_rejects_mismatched_arch(pipeline, tmp_path, capsys):
    _, cfg = pipeline
    bad_arch = tmp_path / "bad_arch.json"
    arch = SampledArch.load(json.loads(cfg.read_text())["paths"]["out_dir"] + "/arch.json")
    arch.resolutions["mouth"] = 999
    arch.save(bad_arch)
    path = write_config(tmp_path, paths={"out_dir": str(tmp_path / "o3"),
                                         "arch": str(bad_arch)})
    assert main(["--config", str(path), "train"]) == EXIT_VALIDATION


def test_flops_ordering_of_bundled_archs(capsys):
    import importlib.resources as res
    totals = {}
    for name in ("ave_s", "ave_m"):
        path = res.files("avenas") / "reference_archs" / f"{name}.json"
        assert main(["flops", str(path)]) == EXIT_OK
        out = capsys.readouterr().out
        total_line = [l for l in out.splitlines() if l.startswith("total")][0]
        totals[name] = float(total_line.split()[1])
    assert totals["ave_s"] < totals["ave_m"]


def test_latency_command_matches_score(pipeline, capsys):
    tmp_path, cfg = pipeline
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "latency", str(out / "arch.json")]) == EXIT_OK
    printed = float(capsys.readouterr().out.split()[0])
    arch = SampledArch.load(out / "arch.json")
    lut = load_latency_table(out / "latency_table.csv")
    assert printed == pytest.approx(score_arch(toy_spec(), arch, lut), abs=5e-7)


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "avenas.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "simulate" in proc.stdout
