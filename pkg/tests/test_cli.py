import csv

import numpy as np
import pytest
import yaml

from vowelbench import cli, synth
from vowelbench.config import DATA_ROOT_ENV, ConfigError, config_hash, data_root, load_config, synth_spec
from vowelbench.ingest import read_archive

SMALL = {
    "features": {"families": ["de"]},
    "model": {"models": ["lda_shrinkage", "MDM"]},
    "synth": {"n_subjects": 3, "trials_per_class": 6, "n_channels": 6},
    "stats": {"n_perm": 99},
}


def _write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_defaults_and_seed():
    cfg = load_config()
    assert cfg["seed"] == 42
    assert cfg["eval"]["protocol"] == "loso"
    assert len(cfg["model"]["models"]) == 10
    assert synth_spec(cfg).seed == 42


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"eval": {"protocl": "loso"}},
    {"model": {"models": ["xgboost"]}},
    {"model": {"params": {"MDM": {}}}},
    {"eval": {"protocol": "kfold"}},
    {"seed": -1},
    {"features": {"families": ["wavelets"]}},
    {"synth": {"snr": -1.0}},
    {"synth": {"colour": "pink"}},
    {"analyses": {"run": ["rsa"]}},
    {"stats": {"correction": "holm"}},
])
def test_schema_violations(bad):
    with pytest.raises(ConfigError):
        load_config(bad)


def test_free_form_sections_accept_any_keys():
    cfg = load_config({"analyses": {"regions": {"frontal": ["Fp1"]}}, "data": {"event_map": {"S 1": "a"}}})
    assert cfg["analyses"]["regions"] == {"frontal": ["Fp1"]}


def test_hash_tracks_content():
    a, b = load_config(SMALL), load_config(dict(SMALL, seed=7))
    assert config_hash(a) == config_hash(load_config(SMALL))
    assert config_hash(a) != config_hash(b)


def test_data_root_env_override(monkeypatch):
    cfg = load_config({"data": {"root": "/from/config"}})
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)
    assert data_root(cfg) == "/from/config"
    monkeypatch.setenv(DATA_ROOT_ENV, "/from/env")
    assert data_root(cfg) == "/from/env"


def test_run_stats_report(tmp_path, capsys):
    path = _write(tmp_path, SMALL)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", path, "--out", str(out)]) == 0
    lines = (out / "results.csv").read_text().splitlines()
    cfg = load_config(path)
    assert lines[0] == f"# vowelbench=0.1.0 config_sha256={config_hash(cfg)} seed=42"
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 2 * 3
    assert {r["model"] for r in rows} == {"lda_shrinkage", "MDM"}
    assert cli.main(["stats", str(out), "--config", path]) == 0
    stats = (out / "stats.csv").read_text().splitlines()
    assert stats[0] == lines[0]
    tests = [line.split(",")[0] for line in stats[2:]]
    assert tests == ["wilcoxon:lda_shrinkage", "wilcoxon:MDM", "permutation:lda_shrinkage",
                     "permutation:MDM", "friedman:models"]
    assert cli.main(["report", str(out)]) == 0
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[1] == ",".join(cli.SUMMARY_COLUMNS)
    assert len(summary) == 4
    for f in out.iterdir():
        assert f.name == "audit.json" or f.read_text().startswith("# vowelbench=0.1.0 config_sha256=")


def test_runs_are_byte_identical_across_parallelism(tmp_path):
    path = _write(tmp_path, SMALL)
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "a"), "--n-jobs", "1"]) == 0
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "b"), "--n-jobs", "2"]) == 0
    for name in ("results.csv", "predictions.csv", "confusion_MDM.csv", "audit.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_error_exit_code_and_no_outputs(tmp_path, capsys):
    path = _write(tmp_path, {"eval": {"bogus": 1}})
    out = tmp_path / "never"
    assert cli.main(["run", "--config", path, "--out", str(out)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err == ["error: config: unknown key eval.bogus"]
    assert not out.exists()


def test_io_error_exit_code(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path / "missing")]) == 4
    assert capsys.readouterr().err.startswith("error: io: ")


def test_bad_arguments_exit_code(capsys):
    assert cli.main(["ablate", "--out", "x", "--axis", "colour"]) == 2


def test_audit_failure_exit_code(tmp_path, monkeypatch, capsys):
    from vowelbench import harness

    class Leaky(harness.FeaturePipeline):
        def fit_normalizer(self, train, ctx):
            from vowelbench.preprocess import fit_normalizer
            return fit_normalizer(ctx.full)

    real = cli.build_pipelines

    def leaky(cfg, seed):
        pipes = real(cfg, seed)
        spec = pipes["lda_shrinkage"].spec
        pipes["lda_shrinkage"] = Leaky(spec, ("de",), name="lda_shrinkage")
        return pipes

    monkeypatch.setattr(cli, "build_pipelines", leaky)
    path = _write(tmp_path, SMALL)
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "o")]) == 3
    assert "error: audit: " in capsys.readouterr().err
    assert not (tmp_path / "o" / "results.csv").exists()


def test_synth_archive_and_edf_ingest(tmp_path, monkeypatch):
    cfg = {"synth": {"n_subjects": 2, "trials_per_class": 2, "n_channels": 4},
           "data": {"event_map": {v: v for v in "aeiou"}}}
    path = _write(tmp_path, cfg)
    assert cli.main(["synth", "--config", path, "--out", str(tmp_path / "arch")]) == 0
    ep = read_archive(tmp_path / "arch")
    assert ep.data.shape == (20, 4, 307)
    assert cli.main(["synth", "--config", path, "--out", str(tmp_path / "edf"), "--edf"]) == 0
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path / "edf"))
    assert cli.main(["ingest", "--config", path, "--out", str(tmp_path / "ing")]) == 0
    ing = read_archive(tmp_path / "ing")
    assert ing.subject_ids() == ["S01", "S02"]
    assert ing.n_trials == 20
    np.testing.assert_array_equal(ing.labels, synth.generate(synth_spec(load_config(path))).labels)


def test_ingest_requires_event_map(tmp_path, capsys):
    assert cli.main(["ingest", "--root", str(tmp_path), "--out", str(tmp_path / "x")]) == 2


def test_tgm_and_ablate_commands(tmp_path):
    cfg = dict(SMALL, eval={"tgm_step": 16},
               analyses={"model": "lda_shrinkage", "regions": {"front": ["Fp1", "Fpz", "Fp2"]}})
    path = _write(tmp_path, cfg)
    assert cli.main(["tgm", "--config", path, "--out", str(tmp_path)]) == 0
    M = np.loadtxt(tmp_path / "tgm.csv", delimiter=",", skiprows=2)
    assert M.shape == (20, 21)
    assert cli.main(["ablate", "--config", path, "--axis", "channel_region", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "ablation_channel_region.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in rows[2:]] == ["front", "full"]
