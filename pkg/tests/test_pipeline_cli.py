"""Config parsing, the stage CLI, and the end-to-end pipeline driver.

The CLI is exercised in-process through main(argv) so exit codes and
stdout are observable without subprocesses.
"""

import json

import numpy as np
import pytest

from splatcount.autoencoder import (AutoencoderTrainConfig, save_autoencoder,
                                    train_autoencoder)
from splatcount.cli import (EXIT_INVALID, EXIT_OK, EXIT_STAGE, EXIT_USAGE,
                            KNOWN_CONFIG_KEYS, main)
from splatcount.config import (ConfigError, get_value, load_config,
                               parse_config_text)
from splatcount.pipeline import ValidationError, auto_cameras, eval_counts
from splatcount.ply import load_ground_truth, load_scene_ply
from splatcount.scene import SyntheticSceneSpec, generate_orchard
from splatcount.semantics import build_vocabulary, save_vocabulary


# ---------------------------------------------------------------- config

def test_parse_config_text():
    cfg = parse_config_text(
        "# comment\n"
        "\n"
        "seed = 7\n"
        "generate.fruits=113   # trailing comment\n"
        "filter.positives = fruit, ripe apple\n")
    assert cfg == {"seed": "7", "generate.fruits": "113",
                   "filter.positives": "fruit, ripe apple"}


def test_parse_config_errors():
    with pytest.raises(ConfigError, match=":2"):
        parse_config_text("seed = 1\nnot a key value line\n")
    with pytest.raises(ConfigError, match="empty key"):
        parse_config_text("= 3\n")


def test_get_value_precedence():
    cfg = {"render.tile_size": "32"}
    # flag beats config beats default
    assert get_value(8, cfg, "render.tile_size", int, 16) == 8
    assert get_value(None, cfg, "render.tile_size", int, 16) == 32
    assert get_value(None, {}, "render.tile_size", int, 16) == 16
    # empty config value counts as unset
    assert get_value(None, {"k": ""}, "k", int, 5) == 5


def test_get_value_conversions():
    assert get_value(None, {"k": "true"}, "k", bool, False) is True
    assert get_value(None, {"k": "off"}, "k", bool, True) is False
    with pytest.raises(ConfigError, match="bool"):
        get_value(None, {"k": "maybe"}, "k", bool, False)
    with pytest.raises(ConfigError, match="int"):
        get_value(None, {"k": "frog"}, "k", int, 0)
    assert get_value(None, {"k": "a, b ,c"}, "k", list, []) == \
        ["a", "b", "c"]
    assert get_value(None, {"k": "plain"}, "k", str, "d") == "plain"


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nsample.points = 1000\n", encoding="utf-8")
    assert load_config(path) == {"seed": "3", "sample.points": "1000"}


# ------------------------------------------------------------ eval/cams

def test_eval_counts_values():
    under = eval_counts(97, 100)
    assert (under.recall_pct, under.overcount_pct) == (97.0, 0.0)
    assert under.absolute_error == 3
    over = eval_counts(103, 100)
    assert (over.recall_pct, over.overcount_pct) == (100.0, 3.0)
    assert eval_counts(0, 50).recall_pct == 0.0
    exact = eval_counts(100, 100)
    assert (exact.recall_pct, exact.overcount_pct) == (100.0, 0.0)
    assert exact.to_dict()["absolute_error"] == 0


def test_eval_counts_validation():
    with pytest.raises(ValidationError, match="positive"):
        eval_counts(5, 0)
    with pytest.raises(ValidationError, match=">= 0"):
        eval_counts(-1, 10)


def test_auto_cameras_frame_scene():
    spec = SyntheticSceneSpec(fruit_count=5, foliage_gaussians=100,
                              trunk_segments=4, rng_seed=1)
    scene, _ = generate_orchard(spec)
    cams = auto_cameras(scene, count=3, width=64, height=48)
    assert len(cams) == 3
    for cam in cams:
        assert cam.width == 64 and cam.height == 48
    # empty scene still yields usable cameras
    from splatcount.scene import Scene
    assert len(auto_cameras(Scene.empty(), count=2)) == 2


# ----------------------------------------------------------- CLI fixture

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Vocabulary, trained autoencoder, and a small generated scene."""
    root = tmp_path_factory.mktemp("cli")
    vocab = build_vocabulary(["fruit", "foliage", "branch"])
    save_vocabulary(vocab, root / "vocab.json")
    vectors = np.stack([vocab.entries[k] for k in sorted(vocab.entries)])
    training = train_autoencoder(
        vectors, AutoencoderTrainConfig(iterations=4000), seed=0)
    save_autoencoder(training.autoencoder, root / "ae.npz")
    rc = main(["generate",
               "--out", str(root / "scene.ply"),
               "--gt", str(root / "gt.json"),
               "--vocab", str(root / "vocab.json"),
               "--autoencoder", str(root / "ae.npz"),
               "--seed", "5", "--fruits", "6", "--foliage", "150",
               "--trunk-segments", "4"])
    assert rc == EXIT_OK
    return root


# ------------------------------------------------------------- CLI: gen

def test_cli_no_command_prints_help(capsys):
    assert main([]) == EXIT_USAGE
    assert "generate" in capsys.readouterr().out


def test_cli_unknown_command():
    assert main(["frobnicate"]) == EXIT_USAGE


def test_cli_generate_missing_out():
    assert main(["generate", "--seed", "1"]) == EXIT_USAGE


def test_cli_generate_requires_seed(tmp_path, capsys):
    rc = main(["generate", "--out", str(tmp_path / "s.ply")])
    assert rc == EXIT_INVALID
    assert "--seed" in capsys.readouterr().err


def test_cli_generate_smoke(workspace, capsys):
    scene = load_scene_ply(workspace / "scene.ply")
    gt = load_ground_truth(workspace / "gt.json")
    assert gt.fruit_count == 6
    assert len(scene) > 150


def test_cli_generate_deterministic(workspace, tmp_path):
    args = ["generate", "--seed", "5", "--fruits", "6", "--foliage",
            "150", "--trunk-segments", "4",
            "--vocab", str(workspace / "vocab.json"),
            "--autoencoder", str(workspace / "ae.npz")]
    assert main(args + ["--out", str(tmp_path / "again.ply")]) == EXIT_OK
    original = (workspace / "scene.ply").read_bytes()
    assert (tmp_path / "again.ply").read_bytes() == original


def test_cli_generate_vocab_without_autoencoder(workspace, tmp_path,
                                                capsys):
    rc = main(["generate", "--out", str(tmp_path / "x.ply"), "--seed",
               "1", "--vocab", str(workspace / "vocab.json")])
    assert rc == EXIT_INVALID
    assert "together" in capsys.readouterr().err


# ---------------------------------------------------------- CLI: config

def test_cli_rejects_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("generate.fruitz = 9\n", encoding="utf-8")
    rc = main(["generate", "--out", str(tmp_path / "s.ply"),
               "--seed", "1", "--config", str(cfg)])
    assert rc == EXIT_INVALID
    assert "generate.fruitz" in capsys.readouterr().err
    assert not (tmp_path / "s.ply").exists()


def test_cli_rejects_bad_config_value(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("generate.fruits = many\n", encoding="utf-8")
    rc = main(["generate", "--out", str(tmp_path / "s.ply"),
               "--seed", "1", "--config", str(cfg)])
    assert rc == EXIT_INVALID
    assert "int" in capsys.readouterr().err


def test_cli_flag_beats_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 2\ngenerate.fruits = 9\n"
                   "generate.foliage = 60\ngenerate.trunk_segments = 3\n",
                   encoding="utf-8")
    # config alone
    rc = main(["generate", "--out", str(tmp_path / "a.ply"),
               "--gt", str(tmp_path / "a.json"), "--config", str(cfg)])
    assert rc == EXIT_OK
    assert load_ground_truth(tmp_path / "a.json").fruit_count == 9
    # flag overrides the file
    rc = main(["generate", "--out", str(tmp_path / "b.ply"),
               "--gt", str(tmp_path / "b.json"), "--config", str(cfg),
               "--fruits", "4"])
    assert rc == EXIT_OK
    assert load_ground_truth(tmp_path / "b.json").fruit_count == 4


def test_known_config_keys_cover_sections():
    for key in ("seed", "generate.fruits", "render.tile_size",
                "ae.iterations", "train.loss_kind", "filter.tau_pos",
                "sample.points", "clean.enabled", "normals.enabled",
                "count.template", "pipeline.filter"):
        assert key in KNOWN_CONFIG_KEYS


# ---------------------------------------------------------- CLI: render

def test_cli_render_outputs(workspace, tmp_path, capsys):
    png = tmp_path / "view.png"
    raw = tmp_path / "view.raw"
    report = tmp_path / "load.json"
    rc = main(["render", "--scene", str(workspace / "scene.ply"),
               "--out", str(png), "--raw", str(raw),
               "--load-report", str(report),
               "--width", "96", "--height", "80"])
    assert rc == EXIT_OK
    assert png.stat().st_size > 0
    from splatcount.images import read_raw_float
    assert read_raw_float(raw).shape == (80, 96, 3)
    data = json.loads(report.read_text())
    assert "report" in data and "schedule" in data
    assert "rendered 96x80" in capsys.readouterr().out


def test_cli_render_nothing_to_do(workspace, capsys):
    rc = main(["render", "--scene", str(workspace / "scene.ply")])
    assert rc == EXIT_INVALID
    assert "nothing to do" in capsys.readouterr().err


def test_cli_render_feature_level(workspace, tmp_path):
    raw = tmp_path / "codes.raw"
    rc = main(["render", "--scene", str(workspace / "scene.ply"),
               "--features", "w", "--raw", str(raw),
               "--width", "64", "--height", "64"])
    assert rc == EXIT_OK
    from splatcount.images import read_raw_float
    assert read_raw_float(raw).shape == (64, 64, 3)


# ----------------------------------------------------------- CLI: query

def test_cli_query_echoes_default_thresholds(workspace, tmp_path, capsys):
    out = tmp_path / "filter.json"
    rc = main(["query", "--scene", str(workspace / "scene.ply"),
               "--autoencoder", str(workspace / "ae.npz"),
               "--vocab", str(workspace / "vocab.json"),
               "--out", str(out)])
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    assert "tau_pos=0.2255" in text
    assert "tau_neg=0.26125" in text
    data = json.loads(out.read_text())
    assert data["params"]["tau_pos"] == 0.2255
    assert data["params"]["tau_neg"] == 0.26125
    assert data["params"]["positives"] == ["fruit"]
    assert data["params"]["level"] == "w"
    # fruit prompts keep a strict, non-empty subset of the scene
    n = len(load_scene_ply(workspace / "scene.ply"))
    assert 0 < len(data["kept"]) < n


def test_cli_query_empty_positives_fails_before_stages(workspace,
                                                       tmp_path, capsys):
    cfg = tmp_path / "empty.cfg"
    cfg.write_text("filter.positives = ,\n", encoding="utf-8")
    out = tmp_path / "filter.json"
    rc = main(["query", "--scene", str(workspace / "scene.ply"),
               "--autoencoder", str(workspace / "ae.npz"),
               "--config", str(cfg), "--out", str(out)])
    assert rc == EXIT_INVALID
    assert "positive" in capsys.readouterr().err
    assert not out.exists()


def test_cli_query_threshold_flags(workspace, tmp_path, capsys):
    rc = main(["query", "--scene", str(workspace / "scene.ply"),
               "--autoencoder", str(workspace / "ae.npz"),
               "--vocab", str(workspace / "vocab.json"),
               "--tau-pos", "0.9", "--tau-neg", "0.1"])
    assert rc == EXIT_OK
    assert "tau_pos=0.9" in capsys.readouterr().out


# -------------------------------------------------- CLI: sample + count

def test_cli_sample_count_eval_chain(workspace, tmp_path, capsys):
    cloud_path = tmp_path / "cloud.ply"
    rc = main(["sample", "--in", str(workspace / "scene.ply"),
               "--out", str(cloud_path), "--seed", "3",
               "--points", "40000"])
    assert rc == EXIT_OK

    count_path = tmp_path / "count.json"
    rc = main(["count", "--cloud", str(cloud_path),
               "--out", str(count_path), "--seed", "3",
               "--template", "sphere:0.06"])
    assert rc == EXIT_OK
    count = json.loads(count_path.read_text())
    assert count["total"] >= 0
    assert count["params"]["eps"] == pytest.approx(0.036)
    assert count["params"]["min_samples"] == 20

    rc = main(["eval", "--pred", str(count_path),
               "--gt", str(workspace / "gt.json")])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "recall=" in out and "overcount=" in out


def test_cli_sample_empty_filter_is_stage_failure(workspace, tmp_path,
                                                  capsys):
    filt = tmp_path / "empty_filter.json"
    filt.write_text(json.dumps({"kept": [], "s_pos": [], "s_neg": [],
                                "params": {"tau_pos": 0.5,
                                           "tau_neg": 0.5}}),
                    encoding="utf-8")
    rc = main(["sample", "--in", str(workspace / "scene.ply"),
               "--out", str(tmp_path / "c.ply"), "--seed", "1",
               "--filter", str(filt)])
    assert rc == EXIT_STAGE
    assert "stage 'sample' failed" in capsys.readouterr().err


def test_cli_eval_requires_exactly_one_source(capsys):
    assert main(["eval", "--pred-count", "5"]) == EXIT_INVALID
    assert main(["eval", "--pred-count", "5", "--gt-count", "10",
                 "--gt", "x.json"]) == EXIT_INVALID
    capsys.readouterr()
    assert main(["eval", "--pred-count", "97",
                 "--gt-count", "100"]) == EXIT_OK
    assert "recall=97.0" in capsys.readouterr().out


# -------------------------------------------------------- CLI: pipeline

PIPELINE_CFG = ("ae.iterations = 2500\n"
                "sample.points = 30000\n"
                "generate.fruits = 8\n"
                "generate.foliage = 150\n"
                "generate.trunk_segments = 4\n"
                "generate.canopy = 2.5,2.0,2.5\n")


def run_pipeline_cli(out_dir, cfg_path, extra=()):
    return main(["pipeline", "--out-dir", str(out_dir), "--seed", "11",
                 "--deterministic", "--config", str(cfg_path),
                 *extra])


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "run.cfg"
    cfg.write_text(PIPELINE_CFG, encoding="utf-8")
    a, b, nf = root / "a", root / "b", root / "nf"
    assert run_pipeline_cli(a, cfg) == EXIT_OK
    assert run_pipeline_cli(b, cfg) == EXIT_OK
    assert run_pipeline_cli(nf, cfg, extra=("--no-filter",)) == EXIT_OK
    return a, b, nf


def test_pipeline_writes_all_artifacts(pipeline_runs):
    a, _, _ = pipeline_runs
    for name in ("vocab.json", "autoencoder.npz", "scene.ply", "gt.json",
                 "filter.json", "cloud.ply", "count.json", "eval.json",
                 "report.json"):
        assert (a / name).is_file(), name
    report = json.loads((a / "report.json").read_text())
    assert report["filter_enabled"] is True
    assert report["count_total"] >= 1
    assert "recall_pct" in report
    stages = [s["name"] for s in report["stages"]]
    assert stages == ["vocabulary", "autoencoder", "scene", "query",
                      "sample", "count", "eval"]
    # deterministic runs carry no timings
    assert all("seconds" not in s for s in report["stages"])


def test_pipeline_rerun_is_byte_identical(pipeline_runs):
    a, b, _ = pipeline_runs
    for name in ("vocab.json", "scene.ply", "gt.json", "filter.json",
                 "cloud.ply", "count.json", "eval.json", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_pipeline_no_filter_skips_query(pipeline_runs):
    a, _, nf = pipeline_runs
    assert not (nf / "filter.json").exists()
    report = json.loads((nf / "report.json").read_text())
    assert report["filter_enabled"] is False
    assert "query" not in [s["name"] for s in report["stages"]]
    assert report["count_total"] >= 1
    # the unfiltered cloud draws from every splat, not just fruit
    filtered = json.loads((a / "report.json").read_text())
    assert (nf / "cloud.ply").stat().st_size >= \
        (a / "cloud.ply").stat().st_size
    assert filtered["count_total"] >= 1


def test_pipeline_missing_input_fails_validation(tmp_path, capsys):
    rc = main(["pipeline", "--out-dir", str(tmp_path / "out"),
               "--seed", "1", "--vocab", str(tmp_path / "nope.json")])
    assert rc == EXIT_INVALID
    assert "not found" in capsys.readouterr().err
    assert not (tmp_path / "out" / "report.json").exists()


def test_pipeline_requires_seed(tmp_path, capsys):
    rc = main(["pipeline", "--out-dir", str(tmp_path / "out")])
    assert rc == EXIT_INVALID
    assert "--seed" in capsys.readouterr().err
