import csv
import shutil
from pathlib import Path

import numpy as np
import pytest

from recdemand import io as rio
from recdemand.cli import main
from recdemand.estimation import holdout_metrics, split_holdout

CONFIG = """
seed = 11

[world]
n_users = 120
n_goods = 24
dim = 4
hidden = 8
horizon = 6
capacities = [1, 2, 3]
n_categories = 3

[training]
embedding_dim = 4
hidden = 8
epochs = 3
batch_size = 64

[recmodel]
embedding_dim = 4
hidden = 8
epochs = 2
batch_size = 64

[policies]
kinds = ["current", "random", "popularity"]
n_placebo = 3

[incrementality]
targets = [1, 2]

[[arms]]
arm_id = "boost0"
focal_categories = [0]
boost_factor = 3.0
user_share = 0.25

[[arms]]
arm_id = "boost1"
focal_categories = [1, 2]
boost_factor = 2.0
user_share = 0.25
"""


def write_config(folder: Path, text: str = CONFIG) -> Path:
    folder.mkdir(parents=True, exist_ok=True)
    path = folder / "run.toml"
    path.write_text(text)
    return path


def run(*args) -> int:
    return main([str(a) for a in args])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    out = root / "out"
    assert run("simulate", "--config", cfg, "--out-dir", out) == 0
    assert run("fit", "--config", cfg, "--out-dir", out) == 0
    return cfg, out


def test_simulate_outputs(pipeline):
    cfg, out = pipeline
    log = rio.read_events(out / "events.tsv")
    assert log.n_events == 120 * 6
    assert sorted(p.name for p in (out / "arms").glob("*.tsv")) == [
        "events_boost0.tsv", "events_boost1.tsv", "events_control.tsv"]
    assert (out / "config.resolved.json").exists()
    assert (out / "events.tsv.meta.json").exists()


def test_simulate_is_byte_identical(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("simulate", "--config", cfg, "--out-dir", tmp_path) == 0
    for name in ("events.tsv", "truth.ckpt", "arms/events_control.tsv", "simulate_summary.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_zero_horizon_is_header_only(tmp_path):
    cfg = write_config(tmp_path, CONFIG.replace("horizon = 6", "horizon = 0").split("[[arms]]")[0])
    assert run("simulate", "--config", cfg, "--out-dir", tmp_path / "o") == 0
    lines = (tmp_path / "o" / "events.tsv").read_text().splitlines()
    assert lines[-1] == rio.EVENTS_HEADER
    assert all(line.startswith("#") for line in lines[:-1])


def test_fit_report_matches_holdout_metrics(pipeline):
    cfg, out = pipeline
    params, meta = rio.load_checkpoint(out / "params.ckpt")
    assert meta == {"kind": "fitted"}
    log = rio.read_events(out / "events.tsv")
    summary = {r["metric"]: float(r["value"]) for r in rows(out / "fit_summary.csv")}
    _, hold = split_holdout(log)
    assert holdout_metrics(params, log, events=hold)["log_loss"] == pytest.approx(
        summary["holdout_loss"], rel=1e-12)
    assert holdout_metrics(params, log)["share_r2"] == pytest.approx(summary["share_r2"], rel=1e-12)
    share_rows = rows(out / "share_fit.csv")
    assert len(share_rows) == params.n_goods + 1 and share_rows[-1]["good_id"] == "0"


def test_validate_row_count(pipeline, tmp_path):
    cfg, out = pipeline
    work = tmp_path / "v"
    shutil.copytree(out, work)
    assert run("validate", "--config", cfg, "--out-dir", work, "--checkpoint", work / "truth.ckpt") == 0
    cats = np.arange(24) % 3
    expected = sum(int((~np.isin(cats, f)).sum()) + 1 for f in ([0], [1, 2]))
    table = rows(work / "diversion.csv")
    assert len(table) == expected
    assert list(table[0]) == ["arm", "destination_id", "empirical", "model"]
    for arm in ("boost0", "boost1"):
        model = [float(r["model"]) for r in table if r["arm"] == arm]
        assert sum(model) == pytest.approx(1.0, abs=1e-10)
    summary = {r["metric"]: r["value"] for r in rows(work / "validation_summary.csv")}
    assert int(summary["n_entries"]) == expected


def test_validate_needs_control(pipeline, tmp_path):
    cfg, out = pipeline
    arms = tmp_path / "arms"
    arms.mkdir()
    shutil.copy(out / "arms" / "events_boost0.tsv", arms)
    code = run("validate", "--config", cfg, "--out-dir", tmp_path, "--checkpoint",
               out / "params.ckpt", "--arms", arms)
    assert code == 1


def test_counterfactual_table(pipeline, tmp_path):
    cfg, out = pipeline
    work = tmp_path / "c"
    assert run("counterfactual", "--config", cfg, "--out-dir", work, "--checkpoint",
               out / "params.ckpt", "--events", out / "events.tsv") == 0
    table = rows(work / "policies.csv")
    assert list(table[0]) == ["policy", "engagement", "gini", "hhi", "d_engagement_pct",
                              "d_gini_pct", "d_hhi_pct"]
    current = next(r for r in table if r["policy"] == "current")
    for key in ("d_engagement_pct", "d_gini_pct", "d_hhi_pct"):
        assert float(current[key]) == 0.0
    for r in table:
        for level, delta in (("engagement", "d_engagement_pct"), ("gini", "d_gini_pct"),
                             ("hhi", "d_hhi_pct")):
            recomputed = 100 * (float(r[level]) / float(current[level]) - 1)
            assert abs(recomputed - float(r[delta])) < 1e-9
    assert [r["policy"] for r in table] == ["current", "random", "popularity"]
    assert (work / "decomposition.csv").exists()
    assert (work / "incrementality.csv").exists()


def test_decompose_and_incrementality(pipeline, tmp_path):
    cfg, out = pipeline
    ck, ev = out / "truth.ckpt", out / "events.tsv"
    assert run("decompose", "--config", cfg, "--out-dir", tmp_path, "--checkpoint", ck,
               "--events", ev, "--policy", "random") == 0
    records = rows(tmp_path / "decomposition.csv")
    for r in records:
        total = float(r["y1_targeted"]) - float(r["y0"])
        parts = float(r["selection"]) + float(r["exposure"]) + float(r["targeting"])
        assert abs(total - parts) < 1e-12
    assert run("incrementality", "--config", cfg, "--out-dir", tmp_path, "--checkpoint", ck,
               "--events", ev, "--targets", "3") == 0
    inc = rows(tmp_path / "incrementality.csv")[0]
    assert inc["mode"] == "existing" and inc["targets"] == "3"


def test_new_good_incrementality(pipeline, tmp_path):
    cfg_text = CONFIG + "\n[exog]\nnew_goods = 2\nraw_dim = 12\n"
    cfg = write_config(tmp_path, cfg_text)
    _, out = pipeline
    ck, ev = out / "truth.ckpt", out / "events.tsv"
    assert run("export-embeddings", "--config", cfg, "--out-dir", tmp_path, "--checkpoint", ck,
               "--raw-dim", 12) == 0
    table = rio.read_embedding_table(tmp_path / "raw_embeddings.csv")
    assert len(table) == 26 and table.dim == 12
    assert run("fit", "--config", cfg, "--out-dir", tmp_path, "--events", ev, "--embeddings",
               tmp_path / "raw_embeddings.csv") == 0
    assert run("incrementality", "--config", cfg, "--out-dir", tmp_path, "--checkpoint",
               tmp_path / "params.ckpt", "--events", ev, "--mode", "new", "--targets", "25,26",
               "--embeddings", tmp_path / "raw_embeddings.csv", "--projection",
               tmp_path / "projection.ckpt") == 0
    inc = rows(tmp_path / "incrementality.csv")[0]
    assert inc["mode"] == "new" and inc["targets"] == "25 26"
    # catalog ids are not new goods
    assert run("incrementality", "--config", cfg, "--out-dir", tmp_path, "--checkpoint",
               tmp_path / "params.ckpt", "--events", ev, "--mode", "new", "--targets", "3",
               "--embeddings", tmp_path / "raw_embeddings.csv", "--projection",
               tmp_path / "projection.ckpt") == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(pipeline, tmp_path):
    cfg, out = pipeline
    bad = write_config(tmp_path / "bad", CONFIG.replace("[policies]", "[policies]\ncolour = 1"))
    assert run("simulate", "--config", bad, "--out-dir", tmp_path) == 1
    assert run("fit", "--config", cfg, "--out-dir", tmp_path, "--events", tmp_path / "nope") == 1
    assert run("counterfactual", "--config", cfg, "--out-dir", tmp_path, "--checkpoint",
               out / "params.ckpt", "--events", out / "events.tsv", "--policy", "psychic") == 1
    assert run("simulate", "--config", cfg, "--seed", -1) == 1
    corrupt = tmp_path / "corrupt.tsv"
    text = (out / "events.tsv").read_text().splitlines()
    text[-1] = "oops"
    corrupt.write_text("\n".join(text) + "\n")
    assert run("fit", "--config", cfg, "--out-dir", tmp_path, "--events", corrupt) == 1
    wild = write_config(tmp_path / "wild", CONFIG.replace(
        "epochs = 3", "epochs = 3\noptimizer = \"sgd\"\nlearning_rate = 1e9\ninit_scale = 5.0", 1))
    assert run("fit", "--config", wild, "--out-dir", tmp_path, "--events", out / "events.tsv") == 2


@pytest.mark.slow
def test_validate_slope_with_true_model_and_huge_arms(tmp_path):
    # one-day panel so treated and control histories coincide
    text = CONFIG.replace("n_users = 120", "n_users = 300000").replace("horizon = 6", "horizon = 1")
    text = text.replace("n_goods = 24", "n_goods = 200").replace("dim = 4", "dim = 8")
    text = text.replace("hidden = 8\nhorizon", "hidden = 16\nhorizon").replace(
        "capacities = [1, 2, 3]", "capacities = [1, 5, 15]").replace("n_categories = 3",
                                                                    "n_categories = 7")
    text = text.replace('n_placebo = 3', 'n_placebo = 3\nimputation = "utility"')
    cfg = write_config(tmp_path, text)
    out = tmp_path / "out"
    assert run("simulate", "--config", cfg, "--out-dir", out) == 0
    assert run("validate", "--config", cfg, "--out-dir", out, "--checkpoint", out / "truth.ckpt") == 0
    summary = {r["metric"]: float(r["value"]) for r in rows(out / "validation_summary.csv")}
    assert 0.9 <= summary["diversion_slope"] <= 1.1
