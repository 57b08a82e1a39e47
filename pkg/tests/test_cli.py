import json

import numpy as np
import pytest

from mtnet import experiment as ex
from mtnet.cli import EXIT_NUMERIC, EXIT_USAGE, EXIT_VERIFY, main
from mtnet.net import init_network, load_checkpoint, predict
from mtnet.tasks import load_task
from mtnet.verify import replay, run_suite

TINY = ["--hidden", "6,6", "--iterations", "20", "--log-every", "5", "--eval-tasks", "10", "--eval-shots", "5,10"]


def test_config_defaults_and_presets():
    cfg = ex.ExperimentConfig()
    assert cfg.resolved_iterations == 10_000
    assert ex.make_config({"desk_scale": "false"}).resolved_iterations == 70_000
    assert cfg.meta_config().alpha == 1e-2 and cfg.meta_config().meta_batch == 4
    assert cfg.layer_sizes == [1, 40, 40, 1]


def test_config_text_round_trip(tmp_path):
    cfg = ex.make_config({"model": "tnet", "hidden": "8,3", "first_order": "true", "alpha": "0.5"})
    path = tmp_path / "c.txt"
    path.write_text(cfg.to_text())
    again = ex.load_config(path)
    assert again.hidden == (8, 3) and again.first_order and again.alpha == 0.5
    assert again.hash == cfg.hash


def test_hash_ignores_output_dir_but_not_settings():
    a = ex.make_config({"output_dir": "x"})
    assert a.hash == ex.make_config({"output_dir": "y"}).hash
    assert a.hash != ex.make_config({"seed": "1"}).hash


@pytest.mark.parametrize("bad", [{"model": "resnet"}, {"eval_shots": ""}, {"alpha": "-1"}, {"colour": "red"},
                                 {"iterations": "many"}, {"mask_eval_mode": "mean"}])
def test_config_errors(bad):
    with pytest.raises(ex.ConfigError):
        ex.make_config(bad)


def test_config_file_comments_and_syntax():
    assert ex.parse_config_text("# header\nalpha = 0.1  # inline\n\n") == {"alpha": "0.1"}
    with pytest.raises(ex.ConfigError):
        ex.parse_config_text("alpha 0.1")


def test_env_var_sets_default_output_dir(monkeypatch, tmp_path):
    monkeypatch.setenv(ex.OUTPUT_ENV, str(tmp_path / "envdir"))
    assert ex.ExperimentConfig().output_dir == str(tmp_path / "envdir")


def test_train_eval_end_to_end(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--model", "mtnet", "--output-dir", str(out), *TINY]) == 0
    ck = out / "checkpoint.txt"
    h = ex.load_config(out / "config.txt").hash
    for name in ("checkpoint.txt", "train.csv", "config.txt"):
        assert f"config_hash={h}" in (out / name).read_text()
    rows = ex.read_csv(out / "train.csv")
    assert [int(r["iteration"]) for r in rows] == [5, 10, 15, 20]
    assert list(rows[0]) == ["iteration", "meta_loss", "fraction_cell0", "fraction_cell1", "fraction_cell2"]

    assert main(["eval", "--checkpoint", str(ck), "--output-dir", str(out)]) == 0
    res = ex.read_csv(out / "results.csv")
    assert [r["shots"] for r in res] == ["5", "10"]
    assert list(res[0]) == list(ex.RESULT_COLUMNS)
    assert res[0]["iterations"] == "20" and float(res[0]["ci95"]) >= 0
    assert "wall_seconds" in (out / "timing.csv").read_text()
    assert "config_hash=" in capsys.readouterr().err  # resolved config printed on startup


def test_zero_iterations_checkpoint_is_the_init(tmp_path):
    cfg = ex.make_config({"model": "tnet", "hidden": "4", "iterations": "0", "output_dir": str(tmp_path)})
    res = ex.cmd_train(cfg)
    _, params, _ = load_checkpoint(res.checkpoint)
    _, init = init_network(cfg.layer_sizes, "tnet", np.random.default_rng(cfg.seed))
    for k in init:
        np.testing.assert_array_equal(params[k], init[k])


def test_alpha_override_zero_gives_unadapted_loss(tmp_path):
    cfg = ex.make_config({"model": "maml", "hidden": "4", "iterations": "0", "eval_tasks": "5",
                          "eval_shots": "5", "output_dir": str(tmp_path)})
    ck = ex.cmd_train(cfg).checkpoint
    rec, = ex.cmd_eval(cfg, ck, alpha=0.0)
    net, params, _ = load_checkpoint(ck)
    dist = cfg.distribution(5)
    losses = []
    for j in range(5):
        task = dist.sample(np.random.default_rng([cfg.seed, 1, j]))
        pred = predict(net, params, dist.features(task.x_test)).ravel()
        losses.append(np.mean((pred - task.y_test) ** 2))
    assert rec.mean_loss == pytest.approx(np.mean(losses), rel=1e-12)


def test_usage_errors_exit_1(tmp_path):
    assert main(["train", "--model", "nope"]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.txt")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_USAGE


def test_divergence_exits_2_and_leaves_failed_marker(tmp_path):
    out = tmp_path / "boom"
    code = main(["train", "--model", "maml", "--alpha", "1e6", "--inner-steps-train", "40",
                 "--output-dir", str(out), *TINY])
    assert code == EXIT_NUMERIC
    assert (out / "FAILED").exists()
    assert not (out / "checkpoint.txt").exists()
    assert (out / "train.csv").exists() and (out / "config.txt").exists()


def test_sweep_alpha_over_a_checkpoint(tmp_path):
    cfg = ex.make_config({"model": "tnet", "hidden": "4", "iterations": "3", "eval_tasks": "4",
                          "eval_shots": "10", "output_dir": str(tmp_path)})
    ck = ex.cmd_train(cfg).checkpoint
    recs = ex.cmd_sweep_alpha(cfg, [1e-3, 1.0], checkpoint=ck)
    assert [r.alpha for r in recs] == [1e-3, 1.0]
    assert len(ex.read_csv(tmp_path / "sweep.csv")) == 2


def test_sweep_alpha_retraining_records_divergence(tmp_path):
    cfg = ex.make_config({"model": "maml", "hidden": "4", "iterations": "3", "eval_tasks": "4",
                          "eval_shots": "10", "inner_steps_train": "40", "output_dir": str(tmp_path)})
    recs = ex.cmd_sweep_alpha(cfg, [1e-2, 1e6])
    assert [r.status for r in recs] == ["ok", "diverged"]
    assert (tmp_path / "alpha_1e+06" / "FAILED").exists()


def test_poly_complexity_structure(tmp_path):
    cfg = ex.make_config({"model": "mtnet", "hidden": "5,5", "iterations": "4", "output_dir": str(tmp_path)})
    path, overall = ex.cmd_poly_complexity(cfg)
    rows = ex.read_csv(path)
    for cell in ("cell0", "cell1", "cell2", "all"):
        assert sorted(r["order"] for r in rows if r["cell"] == cell) == ["0", "1", "2"]
    assert set(overall) == {0, 1, 2}
    for r in rows:
        assert float(r["fraction"]) + float(r["complement"]) == pytest.approx(1.0)
    with pytest.raises(ex.ConfigError):
        ex.cmd_poly_complexity(ex.make_config({"model": "tnet", "output_dir": str(tmp_path)}))


def test_fit_dump_train_points_match_adapted_fit(tmp_path):
    cfg = ex.make_config({"model": "maml", "hidden": "8", "iterations": "50", "output_dir": str(tmp_path),
                          "task": "polynomial", "order": "1"})
    _, params, _ = load_checkpoint(ex.cmd_train(cfg).checkpoint)
    net = init_network(cfg.layer_sizes, "maml", np.random.default_rng(0))[0]
    rows = ex.fit_dump(net, params, cfg, n_tasks=2)
    train_rows = [r for r in rows if r[1] == "train"]
    assert len(train_rows) == 2 * cfg.k_shot
    assert len([r for r in rows if r[1] == "grid"]) == 2 * len(ex.FIT_GRID)
    post_err = np.mean([(r[5] - r[3]) ** 2 for r in train_rows])
    pre_err = np.mean([(r[4] - r[3]) ** 2 for r in train_rows])
    assert post_err <= pre_err  # adaptation fits the train points at least as well


def test_dump_tasks_round_trip(tmp_path):
    assert main(["dump-tasks", "--n", "3", "--task", "polynomial", "--order", "2",
                 "--output-dir", str(tmp_path)]) == 0
    files = sorted((tmp_path / "tasks").glob("task_*.csv"))
    assert len(files) == 3
    task = load_task(files[0].read_text())
    assert task.descriptor["order"] == 2
    np.testing.assert_allclose(task(task.x_test), task.y_test, atol=1e-12)


def test_verify_subcommand_and_forced_failure(tmp_path, capsys):
    out = tmp_path / "v.jsonl"
    assert main(["verify", "--only", "delta_y_norm,tnet_update_closed_form", "--output", str(out)]) == 0
    lines = [json.loads(ln) for ln in out.read_text().splitlines()]
    assert [r["name"] for r in lines] == ["delta_y_norm", "tnet_update_closed_form"]
    assert all(r["passed"] and r["instances"] >= 100 for r in lines)
    assert main(["verify", "--only", "delta_y_norm", "--force-failure"]) == EXIT_VERIFY
    assert "--replay delta_y_norm" in capsys.readouterr().err


def test_replay_reproduces_reported_residual():
    rec, = run_suite(only=["mtnet_unroll_closed_form"])
    again = replay(rec.name, rec.worst_seed, rec.worst_size, rec.worst_instance)
    assert again == rec.max_residual
    forced, = run_suite(only=["delta_y_norm"], force_failure=True)
    assert replay("delta_y_norm", forced.worst_seed, forced.worst_size, forced.worst_instance,
                  force_failure=True) == forced.max_residual
