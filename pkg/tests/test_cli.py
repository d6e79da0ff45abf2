import json
import os

import pytest

from cli import build_settings, cli_main


def _read_lines(path):
    with open(path, encoding="utf-8") as handle:
        return handle.read().splitlines()


SMALL_MODEL = {
    "grid": {"x_range": [0.0, 20.48], "y_range": [-10.24, 10.24], "cell_h": 0.64, "cell_w": 0.64,
             "channels": 4, "max_points_per_pillar": 4},
    "deform": {"n_points": 2},
    "train": {"n_negatives": 2},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_MODEL), encoding="utf-8")
    return str(path)


def test_eval_writes_recall_table(database_file, tmp_path):
    out = str(tmp_path / "recall.csv")
    assert cli_main(["eval", "--queries", database_file, "--refs", database_file, "--out", out]) == 0
    lines = _read_lines(out)
    assert lines[0] == "n,recall,excluded"
    assert lines[1] == "1,1.0,0"


def test_usage_errors_exit_1(capsys):
    assert cli_main(["eval", "--bogus"]) == 1
    assert cli_main([]) == 1
    assert cli_main(["teleport"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    missing = str(tmp_path / "missing.rsdb")
    assert cli_main(["eval", "--queries", missing, "--refs", missing, "--out", str(tmp_path / "r.csv")]) == 2


def test_corrupt_database_exits_1(database_file, tmp_path):
    with open(database_file, "r+b") as handle:
        handle.write(b"XXXX")
    assert cli_main(["eval", "--queries", database_file, "--refs", database_file, "--out", str(tmp_path / "r.csv")]) == 1


def test_malformed_manifest_exits_1(tmp_path, capsys):
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"frame_rate_hz": 10, "frames": [{"scan": "scans/a.csv", "pose": None}]}),
                        encoding="utf-8")
    assert cli_main(["preprocess", "--sequence", str(manifest), "--out", str(tmp_path / "refined")]) == 1
    assert "frame 0" in capsys.readouterr().err


def test_unknown_override_section_exits_1(database_file, tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"telescope": {}}), encoding="utf-8")
    assert cli_main(["--config", str(config), "eval", "--queries", database_file, "--refs", database_file,
                     "--out", str(tmp_path / "r.csv")]) == 1


def test_settings_apply_overrides_and_flags(small_config):
    settings = build_settings(small_config, seed=9, flags="dpr,fa")
    assert settings.seed == 9
    assert settings.model.grid.shape == (4, 32, 32)
    assert settings.model.deform.n_points == 2
    assert settings.model.ransac.seed == 9
    assert (settings.model.flags.tsp, settings.model.flags.fa) == (False, True)
    assert settings.train.n_negatives == 2


def test_simulate_then_preprocess(tmp_path):
    out = str(tmp_path / "sim")
    assert cli_main(["--seed", "4", "simulate", "--out", out, "--frames", "5", "--traversals", "2"]) == 0
    manifest = os.path.join(out, "traversal_1", "manifest.json")
    assert os.path.exists(manifest)
    assert os.path.exists(os.path.join(out, "traversal_0", "labels.json"))

    refined = str(tmp_path / "refined")
    assert cli_main(["preprocess", "--sequence", manifest, "--out", refined]) == 0
    with open(os.path.join(refined, "ego.json"), encoding="utf-8") as handle:
        assert len(json.load(handle)["frames"]) == 5


def test_plot_from_csv(database_file, tmp_path):
    table = str(tmp_path / "recall.csv")
    cli_main(["eval", "--queries", database_file, "--refs", database_file, "--out", table])
    svg = str(tmp_path / "plots" / "recall.svg")
    assert cli_main(["plot", "--csv", table, "--out", svg]) == 0
    assert os.path.getsize(svg) > 0


@pytest.mark.slow
def test_gradcheck_command():
    assert cli_main(["gradcheck", "--skip-pipeline"]) == 0


@pytest.mark.slow
def test_train_embed_eval_is_reproducible(small_config, tmp_path):
    sim = str(tmp_path / "sim")
    assert cli_main(["simulate", "--out", sim, "--frames", "30", "--traversals", "2"]) == 0
    database = os.path.join(sim, "traversal_0", "manifest.json")
    queries = os.path.join(sim, "traversal_1", "manifest.json")

    tables = []
    for run in ("a", "b"):
        model = str(tmp_path / run / "model.rspr")
        loss_csv = str(tmp_path / run / "loss.csv")
        common = ["--config", small_config, "--seed", "2"]
        assert cli_main(common + ["train", "--database", database, "--queries", queries, "--out", model,
                                  "--epochs", "1", "--loss-csv", loss_csv]) == 0
        assert _read_lines(loss_csv)[0] == "epoch,step,loss,lr"
        refs_db = str(tmp_path / run / "refs.rsdb")
        query_db = str(tmp_path / run / "queries.rsdb")
        assert cli_main(common + ["embed", "--model", model, "--sequences", database, "--out", refs_db]) == 0
        assert cli_main(common + ["embed", "--model", model, "--sequences", queries, "--out", query_db]) == 0
        recall_csv = str(tmp_path / run / "recall.csv")
        assert cli_main(common + ["eval", "--queries", query_db, "--refs", refs_db, "--out", recall_csv]) == 0
        tables.append(_read_lines(recall_csv))
    assert tables[0] == tables[1]
