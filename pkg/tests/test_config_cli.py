import json
import shutil

import pytest
from filelock import FileLock

from eeg3d.archive import read_jsonl
from eeg3d.cli import main
from eeg3d.config import (ConfigError, PipelineConfig, check_finite_numbers, dumps, load_config, parse_config,
                          with_overrides)
from eeg3d.metrics import MetricReport
from eeg3d.pipeline import first_segment_per_class, open_dataset, open_run
from eeg3d.render import VIEW_AZIMUTHS


def _write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _cli(*args):
    return main([str(a) for a in args])


# ----------------------------------------------------------------------------- config

def test_defaults_round_trip_through_toml(tmp_path):
    cfg = PipelineConfig()
    back = load_config(_write(tmp_path, dumps(cfg)))
    assert back == cfg
    assert dumps(back) == dumps(cfg)


def test_documented_defaults():
    cfg = PipelineConfig()
    assert (cfg.ldm.lambda_ldm, cfg.ldm.lambda_region) == (1.0, 1.0)
    assert cfg.stage_b.lr == 1e-3
    assert cfg.ldm_config().lambda_region == 1.0


@pytest.mark.parametrize("text", [
    "[ldm]\nlambda_region = -1.0\n",
    "[stage_b]\nw_color = -0.5\n",
    "[ldm]\nbeta_start = 0.2\nbeta_end = 0.1\n",
    "[ldm]\nsample_steps = 500\n",
    "[stage_a]\nmask_ratio = 1.0\n",
    "[metrics]\nssim_window = 4\n",
    "[stage_b]\nt_range = [0.5, 0.2]\n",
    "[nonsense]\nx = 1\n",
    "[ldm]\nlamda_region = 1.0\n",
    "seed = 'zero'\n",
    "[ldm\n",
])
def test_invalid_configs_are_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, text))


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/cfg.toml")


def test_non_finite_values_are_rejected(tmp_path):
    cfg = load_config(_write(tmp_path, "[stage_b]\nw_align = inf\n"))
    with pytest.raises(ConfigError):
        check_finite_numbers(cfg)


def test_overrides_revalidate():
    cfg = with_overrides(PipelineConfig(), **{"ldm.lambda_region": 0.0, "seed": 5})
    assert cfg.ldm.lambda_region == 0.0 and cfg.seed == 5
    with pytest.raises(ConfigError):
        with_overrides(PipelineConfig(), **{"stage_b.w_color": -1.0})


def test_error_message_names_the_field(tmp_path):
    with pytest.raises(ConfigError, match="ldm.lambda_region"):
        parse_config({"ldm": {"lambda_region": -1}})


# ----------------------------------------------------------------------------- exit codes

def test_invalid_config_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, "[ldm]\nlambda_region = -1.0\n")
    assert _cli("gen-data", "--config", cfg, "--run-dir", tmp_path / "r") == 2
    assert "lambda_region" in capsys.readouterr().err


def test_missing_dataset_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, "[dataset]\npath = '/nonexistent/dataset'\n")
    assert _cli("train-stage-a", "--config", cfg, "--run-dir", tmp_path / "r") == 2
    assert "dataset" in capsys.readouterr().err


def test_missing_upstream_checkpoint_exits_2(tmp_path, tiny_config, capsys):
    run = tmp_path / "r"
    assert _cli("gen-data", "--config", tiny_config, "--run-dir", run) == 0
    assert _cli("finetune-ldm", "--config", tiny_config, "--run-dir", run) == 2
    assert "stage_a" in capsys.readouterr().err


def test_numerical_abort_exits_4(tmp_path, tiny_config):
    run = tmp_path / "r"
    assert _cli("gen-data", "--config", tiny_config, "--run-dir", run) == 0
    # the weight overflows float32, so the first joint loss is infinite
    bad = _write(tmp_path, tiny_config.read_text().replace("[stage_a]\n", "[stage_a]\nw_mae = 1e300\n"),
                 "bad.toml")
    assert _cli("train-stage-a", "--config", bad, "--run-dir", run) == 4


def test_unknown_segment_exits_3(tiny_run, tiny_config, capsys):
    assert _cli("reconstruct-2d", "--config", tiny_config, "--run-dir", tiny_run, "--segment", "s99999") == 3
    assert "s99999" in capsys.readouterr().err


def test_evaluate_without_renders_exits_3(tmp_path, tiny_run, tiny_config):
    run = tmp_path / "copy"
    shutil.copytree(tiny_run, run)
    shutil.rmtree(run / "renders" / "3d")
    assert _cli("evaluate", "--config", tiny_config, "--run-dir", run) == 3


def test_locked_run_directory_is_refused(tmp_path, tiny_config, capsys):
    run = tmp_path / "r"
    run.mkdir()
    with FileLock(str(run / ".lock")):
        assert _cli("gen-data", "--config", tiny_config, "--run-dir", run) == 2
    assert "locked" in capsys.readouterr().err
    assert _cli("gen-data", "--config", tiny_config, "--run-dir", run) == 0


# ----------------------------------------------------------------------------- run layout and records

def test_quickstart_layout(tiny_run):
    for sub in ("checkpoints", "logs", "reports", "renders/2d", "renders/3d"):
        assert (tiny_run / sub).is_dir(), sub
    for name in ("stage_a", "ldm", "embedder", "extractor"):
        assert (tiny_run / "checkpoints" / f"{name}.safetensors").is_file()
    sets = [p for p in (tiny_run / "renders" / "3d").iterdir() if p.is_dir()]
    assert len(sets) == 1
    for az in VIEW_AZIMUTHS:
        assert (sets[0] / f"view_{int(az):03d}.png").is_file()
    assert read_jsonl(tiny_run / "logs" / "stage_a.jsonl")


def test_metric_report_schema_and_self_check(tiny_run):
    report = MetricReport.model_validate_json((tiny_run / "reports" / "metrics_test.json").read_text())
    assert report.self_check.ssim == 1.0 and report.self_check.fid == 0.0
    for rows in report.per_view.values():
        assert [r.azimuth_deg for r in rows] == list(VIEW_AZIMUTHS)


def test_config_snapshot_is_byte_exact_and_reexecutable(tiny_run, tiny_config):
    snap = (tiny_run / "config.snapshot.toml").read_text()
    assert snap == dumps(load_config(tiny_config))
    rec = json.loads((tiny_run / "reports" / "train_stage_a.record.json").read_text())
    assert rec["config_snapshot"] == snap and rec["seed"] == 0
    assert rec["checkpoints"] == {"stage_a": "checkpoints/stage_a.safetensors"}
    assert load_config(tiny_run / "config.snapshot.toml") == load_config(tiny_config)


def test_region_flag_drops_only_region_stream(tmp_path, tiny_run, tiny_config):
    with_region = read_jsonl(tiny_run / "logs" / "ldm.jsonl")
    assert any("region_loss" in r for r in with_region) and all("ldm_loss" in r for r in with_region)
    run = tmp_path / "copy"
    shutil.copytree(tiny_run, run)
    assert _cli("finetune-ldm", "--config", tiny_config, "--run-dir", run, "--no-region-loss") == 0
    without = read_jsonl(run / "logs" / "ldm.jsonl")
    assert not any("region_loss" in r for r in without) and all("ldm_loss" in r for r in without)
    rec = json.loads((run / "reports" / "finetune_ldm.record.json").read_text())
    assert load_config(_write(tmp_path, rec["config_snapshot"], "snap.toml")).ldm.lambda_region == 0.0


@pytest.mark.parametrize("flag,stream,tag", [("--no-color-loss", "color_loss", "-no-color"),
                                             ("--no-eeg-text-loss", "align_loss", "-no-eeg-text")])
def test_stage_b_flags_drop_their_stream(tmp_path, tiny_run, tiny_config, flag, stream, tag):
    run = tmp_path / "copy"
    shutil.copytree(tiny_run, run)
    seg = first_segment_per_class(open_dataset(open_run(run, load_config(tiny_config))), "test")[0]
    assert _cli("reconstruct-3d", "--config", tiny_config, "--run-dir", run, "--segment", seg, flag) == 0
    base = read_jsonl(run / "logs" / f"stage_b.{seg}.jsonl")
    ablated = read_jsonl(run / "logs" / f"stage_b.{seg}{tag}.jsonl")
    assert any(stream in r for r in base)
    assert not any(stream in r for r in ablated)
    assert {k for r in base for k in r} - {stream} == {k for r in ablated for k in r}
    assert (run / "renders" / "3d" / f"{seg}{tag}" / "views.json").is_file()


def test_reconstruct_2d_is_reproducible(tmp_path, tiny_run, tiny_config):
    run = tmp_path / "copy"
    shutil.copytree(tiny_run, run)
    seg = json.loads(next((tiny_run / "renders" / "2d").glob("*.json")).read_text())["segment_id"]
    before = {p.name: p.read_bytes() for p in (run / "renders" / "2d").iterdir()}
    assert _cli("reconstruct-2d", "--config", tiny_config, "--run-dir", run, "--segment", seg) == 0
    after = {p.name: p.read_bytes() for p in (run / "renders" / "2d").iterdir()}
    assert before == after
    assert _cli("reconstruct-2d", "--config", tiny_config, "--run-dir", run, "--segment", seg, "--seed", 1) == 0
    side = json.loads((run / "renders" / "2d" / f"{seg}_seed1.json").read_text())
    assert side["seed"] == 1 and {"segment_id", "steps", "guidance"} <= side.keys()
