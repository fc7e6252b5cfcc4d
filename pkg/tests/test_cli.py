from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

from prefscope import cli, pipeline
from prefscope.errors import (DependencyError, NumericError, ProviderContractError, TransportError,
                              ValidationError)

SMALL = {
    "seed": 3,
    "synth": {"n_annotators": 16, "pairs_per_annotator": 80, "n_models": 4, "group_slope_offsets": [[0.0] * 8, [0.0] * 8],
              "effect_sizes": [1.0, -0.8, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0]},
    "embedding": {"provider": "static", "dim": 64},
    "sae": {"epochs": 15, "batch_size": 128},
    "describer": {"provider": "marker"},
    "judge": {"provider": "marker"},
    "interpret": {"n_candidates": 1, "n_fidelity": 60, "max_in_flight": 1},
    "analysis": {"n_boot": 30},
    "personalization": {"ks": [1, 2], "replicates": 2, "n_boot": 20},
    "curation": {"feature": 0, "n": 20, "direction": "+1"},
}


def write_config(tmp_path, extra=None) -> Path:
    cfg = json.loads(json.dumps(SMALL))
    for k, v in (extra or {}).items():
        cfg[k] = v
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    cfg = write_config(root)
    code = cli.main(["run", "--with-synth", "-c", str(cfg), "--run-dir", str(root / "run")])
    return root, cfg, code


def test_exit_code_mapping():
    assert cli.exit_code_for(ValidationError("x")) == 2
    assert cli.exit_code_for(DependencyError("x")) == 3
    assert cli.exit_code_for(TransportError("x", attempts=1)) == 4
    assert cli.exit_code_for(ProviderContractError("x")) == 4
    assert cli.exit_code_for(NumericError("x")) == 5


def test_full_run_produces_report(full_run):
    root, _, code = full_run
    assert code == 0
    report = (root / "run" / "report" / "report.md").read_text()
    for section in ("## Dataset", "## Measurable preferences", "## Expressed preferences", "## Prediction quality",
                    "## Subjectivity", "## Personalization", "## Curation and leaderboard"):
        assert section in report
    assert "## Gaps" not in report
    for fig in ("dotplot.csv", "personalization_curve.csv", "elo.csv"):
        first = (root / "run" / "report" / fig).read_text().splitlines()[0]
        assert first.startswith("# run_id=run-")


def test_manifests_record_provenance(full_run):
    root, _, _ = full_run
    m = json.loads((root / "run" / "manifests" / "analyze.json").read_text())
    assert m["run_id"].startswith("run-") and m["seed"] == 3
    assert "artifacts/effects.csv" in m["outputs"]
    assert m["upstream"]


def test_rerun_is_a_noop(full_run, capsys):
    root, cfg, _ = full_run
    before = (root / "run" / "artifacts" / "effects.csv").stat().st_mtime_ns
    assert cli.main(["analyze", "-c", str(cfg), "--run-dir", str(root / "run")]) == 0
    assert "analyze: up to date" in capsys.readouterr().out
    assert (root / "run" / "artifacts" / "effects.csv").stat().st_mtime_ns == before
    assert cli.main(["embed", "-c", str(cfg), "--run-dir", str(root / "run")]) == 0
    assert "embed: up to date" in capsys.readouterr().out


def test_config_change_makes_stage_stale(full_run):
    root, cfg, _ = full_run
    args = ["analyze", "-c", str(cfg), "--run-dir", str(root / "run"), "--set", "analysis.n_boot=31"]
    assert cli.main(args + ["--strict-stale"]) == 3
    assert cli.main(args) == 0
    m = json.loads((root / "run" / "manifests" / "analyze.json").read_text())
    assert m["stage_config_hash"] == pipeline.config_hash(
        pipeline.load_config(cfg, ["analysis.n_boot=31", f"run_dir={root / 'run'}"]), pipeline.CONFIG_SECTIONS["analyze"])


def test_warm_embedding_cache_makes_no_requests(full_run):
    root, cfg, _ = full_run
    res = pipeline.run_stage("embed", pipeline.load_config(cfg, [f"run_dir={root / 'run'}"]), force=True)
    assert res.notes["provider_requests"] == 0
    assert res.notes["cache_hits"] == res.notes["unique_texts"]
    assert res.notes["normalization"] == "none"


def test_missing_upstream_exits_3(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["analyze", "-c", str(cfg), "--run-dir", str(tmp_path / "empty")]) == 3
    assert "train-sae" in capsys.readouterr().err


def test_partial_report(tmp_path):
    cfg = write_config(tmp_path)
    run_dir = str(tmp_path / "run")
    assert cli.main(["synth", "-c", str(cfg), "--run-dir", run_dir]) == 0
    assert cli.main(["ingest", "-c", str(cfg), "--run-dir", run_dir]) == 0
    assert cli.main(["report", "-c", str(cfg), "--run-dir", run_dir]) == 0
    text = (tmp_path / "run" / "report" / "report.md").read_text()
    assert "## Gaps" in text and "_Not available: run `prefscope analyze`._" in text
    assert cli.main(["report", "-c", str(cfg), "--run-dir", run_dir, "--strict"]) == 2


def test_curate_requires_direction(tmp_path):
    cfg = write_config(tmp_path, {"curation": {"feature": 0, "n": 5, "direction": None}})
    with pytest.raises(ValidationError):
        pipeline._curation_options(pipeline.Run(pipeline.load_config(cfg, [f"run_dir={tmp_path / 'r'}"])))


def test_http_provider_without_credentials_exits_2(tmp_path, monkeypatch):
    monkeypatch.delenv("PREFSCOPE_TEST_KEY", raising=False)
    cfg = write_config(tmp_path, {"embedding": {"provider": "http", "api_key_env": "PREFSCOPE_TEST_KEY"}})
    run_dir = str(tmp_path / "run")
    assert cli.main(["synth", "-c", str(cfg), "--run-dir", run_dir]) == 0
    assert cli.main(["ingest", "-c", str(cfg), "--run-dir", run_dir]) == 0
    assert cli.main(["embed", "-c", str(cfg), "--run-dir", run_dir]) == 2


def test_env_interpolation_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("run_dir: ${RUNS:-default_runs}/x\nembedding:\n  model_id: ${MODEL}\n")
    cfg = pipeline.load_config(path, ["sae.k=2", "personalization.ks=[1, 3]"], environ={"MODEL": "m"})
    assert cfg["run_dir"] == "default_runs/x" and cfg["embedding"]["model_id"] == "m"
    assert cfg["sae"]["k"] == 2 and cfg["personalization"]["ks"] == [1, 3]
    with pytest.raises(ValidationError):
        pipeline.load_config(path, environ={})
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense_section: {}\n")
    with pytest.raises(ValidationError):
        pipeline.load_config(bad)
    with pytest.raises(ValidationError):
        pipeline.apply_override({}, "novalue")


def test_ingest_rehashes_raw_data(tmp_path):
    src = tmp_path / "data.jsonl"
    rows = [{"id": str(i), "prompt": "q", "response_a": "a b", "response_b": "c", "label": "A"} for i in range(5)]
    src.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    cfg = pipeline.load_config(None, [f"dataset.path={src}", f"run_dir={tmp_path / 'run'}"])
    assert not pipeline.run_stage("ingest", cfg).skipped
    assert pipeline.run_stage("ingest", cfg).skipped
    src.write_text(src.read_text() + json.dumps({**rows[0], "id": "new"}) + "\n")
    res = pipeline.run_stage("ingest", cfg)
    assert not res.skipped and res.notes["n_pairs"] == 6


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "prefscope" in capsys.readouterr().out
