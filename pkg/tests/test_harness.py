import numpy as np
import pytest

import gpssm_al.acquisition as acq_mod
from gpssm_al.acquisition import Criterion, Grid, grid_points, optimize_control
from gpssm_al.cli import main
from gpssm_al.elbo import train
from gpssm_al.harness import (AGG_HEADER, AggregateResult, ExperimentConfig, build_model, emit_csv,
                              emit_mi_landscape, emit_steps_csv, initial_data, load_config,
                              parse_config, read_csv, run_experiment)
from gpssm_al.kernels import KernelFamily
from gpssm_al.mi_total import TotalMiScorer
from gpssm_al.systems import make_system

SMALL = dict(trials=2, N=3, epochs=20, mi_samples=4)


def test_parse_config_defaults_and_overrides():
    cfg = parse_config("""
        # pendulum with a shorter budget
        system = pendulum
        criteria = random, totmi
        trials = 3
        steps = 7   # alias for N
        seed = 42
    """)
    assert cfg.system == "pendulum" and cfg.trials == 3 and cfg.N == 7 and cfg.master_seed == 42
    assert cfg.criteria == (Criterion.RANDOM, Criterion.TOTMI)
    assert cfg.kernel is KernelFamily.MATERN32 and cfg.sigma2 == 0.3 and cfg.lengthscale == 5.0
    assert cfg.epochs == 200 and cfg.T == 5
    assert parse_config("system=tras\nkernel=matern32").kernel is KernelFamily.MATERN32


@pytest.mark.parametrize("text", ["criteria = totmi", "system = kink\nbogus = 1", "system kink",
                                  "system = kink\ntrials = 0", "system = moon"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_table_defaults():
    want = {"kink": ("se", 1.0, 1.0, 100), "pendulum": ("matern32", 0.3, 5.0, 200),
            "cart-pole": ("matern32", 1.0, 1.0, 200), "tras": ("se", 1.0, 1.0, 500)}
    for name, (fam, s2, ls, ep) in want.items():
        cfg = ExperimentConfig(name)
        assert (cfg.kernel.value, cfg.sigma2, cfg.lengthscale, cfg.epochs) == (fam, s2, ls, ep)
        assert cfg.trials == 10


def test_zero_steps_give_header_only_csv(tmp_path):
    res = run_experiment(ExperimentConfig("kink", trials=1, N=0, epochs=5))
    assert res.complete and res.aggregate.steps == 0
    assert all(len(v) == 0 for v in res.aggregate.mean_rmse.values())
    emit_csv(res.aggregate, tmp_path / "a.csv", tmp_path / "t.csv")
    assert (tmp_path / "a.csv").read_text() == ",".join(AGG_HEADER) + "\n"


@pytest.fixture(scope="module")
def small_run():
    cfg = ExperimentConfig("kink", **SMALL)
    return cfg, run_experiment(cfg)


def test_aggregate_counts(small_run):
    cfg, res = small_run
    assert res.complete
    for o in res.trials:
        assert set(o.sessions) == set(cfg.criteria)
        assert all(len(s.records) == cfg.N for s in o.sessions.values())
    agg = res.aggregate
    for crit in cfg.criteria:
        r = np.array([[rec.rmse for rec in o.sessions[crit].records] for o in res.trials])
        assert np.array_equal(agg.mean_rmse[crit], r.mean(axis=0))
        assert np.array_equal(agg.std_rmse[crit], r.std(axis=0))
        assert agg.mean_seconds[crit].shape == (cfg.N,)


def test_criteria_share_initial_data(small_run):
    _, res = small_run
    for o in res.trials:
        trajs = [s.trajectory for s in o.sessions.values()]
        for t in trajs[1:]:
            assert np.array_equal(t.y[:5], trajs[0].y[:5]) and np.array_equal(t.c[:5], trajs[0].c[:5])
        inits = {s.initial_rmse for s in o.sessions.values()}
        assert inits == {o.initial_rmse}
    assert not np.array_equal(res.trials[0].sessions[Criterion.RANDOM].trajectory.y[:5],
                              res.trials[1].sessions[Criterion.RANDOM].trajectory.y[:5])


def test_csv_round_trip(small_run, tmp_path):
    _, res = small_run
    emit_csv(res.aggregate, tmp_path / "a.csv", tmp_path / "t.csv")
    back = read_csv(tmp_path / "a.csv", tmp_path / "t.csv")
    assert back == res.aggregate
    rmse_only = read_csv(tmp_path / "a.csv")
    for c in res.aggregate.criteria:
        assert np.array_equal(rmse_only.mean_rmse[c], res.aggregate.mean_rmse[c])


def test_rerun_is_byte_identical(small_run, tmp_path):
    cfg, res = small_run
    again = run_experiment(ExperimentConfig("kink", workers=2, **SMALL))
    for name, r in (("a", res), ("b", again)):
        emit_csv(r.aggregate, tmp_path / f"{name}.csv")
        emit_steps_csv(r, tmp_path / f"{name}_steps.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a_steps.csv").read_bytes() == (tmp_path / "b_steps.csv").read_bytes()
    other = run_experiment(ExperimentConfig("kink", master_seed=1, **SMALL))
    assert other.aggregate != res.aggregate


def test_failed_trial_is_flagged_not_dropped(monkeypatch):
    real = acq_mod.train
    calls = {"n": 0}

    def flaky(m, t, cfg):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FloatingPointError("diverged")
        return real(m, t, cfg)

    monkeypatch.setattr(acq_mod, "train", flaky)
    res = run_experiment(ExperimentConfig("kink", criteria=("random",), trials=2, N=2, epochs=5))
    assert not res.complete
    assert [t.failed for t in res.trials] == [True, False]
    assert "diverged" in res.trials[0].error
    assert res.aggregate.trials == 2
    assert np.all(np.isfinite(res.aggregate.mean_rmse[Criterion.RANDOM]))


def test_landscape_argmax_matches_grid_optimizer(tmp_path):
    cfg = ExperimentConfig("kink", epochs=30)
    system = make_system("kink")
    traj = initial_data(system, 9, np.random.default_rng(4))
    model, _ = train(build_model(cfg, system, np.random.default_rng(5)), traj, cfg.train_config(6))
    grid = grid_points(system.box, 50)
    emit_mi_landscape(model, traj, grid, tmp_path / "l.csv", S=16, seed=3)
    rows = np.loadtxt(tmp_path / "l.csv", delimiter=",", skiprows=1)
    assert rows.shape == (50, 3) and np.all(rows[:, 0] == 9)
    c, v = optimize_control(TotalMiScorer(model, traj, 16, 3), system.box, Grid(50))
    best = rows[np.argmax(rows[:, 2])]
    assert best[1] == c[0] and best[2] == v


def test_write_errors_carry_the_path(small_run, tmp_path):
    _, res = small_run
    bad = tmp_path / "missing" / "a.csv"
    with pytest.raises(OSError, match="missing"):
        emit_csv(res.aggregate, bad)
    with pytest.raises(OSError, match="missing"):
        emit_steps_csv(res, bad)


def test_load_config_reads_file(tmp_path):
    p = tmp_path / "k.cfg"
    p.write_text("system = kink\ntrials = 2\n")
    assert load_config(p).trials == 2


def test_aggregate_equality_handles_nan():
    a = AggregateResult((Criterion.RANDOM,), 1, 1, {Criterion.RANDOM: np.array([0.1])},
                        {Criterion.RANDOM: np.array([0.0])}, {Criterion.RANDOM: np.array([np.nan])})
    b = AggregateResult((Criterion.RANDOM,), 1, 1, {Criterion.RANDOM: np.array([0.1])},
                        {Criterion.RANDOM: np.array([0.0])}, {Criterion.RANDOM: np.array([np.nan])})
    assert a == b


# CLI


def test_cli_run_writes_outputs(tmp_path, capsys):
    cfg = tmp_path / "kink.cfg"
    cfg.write_text("system = kink\ncriteria = random,totmi\nepochs = 10\nmi_samples = 4\n")
    out = tmp_path / "out"
    code = main(["run", str(cfg), "--out-dir", str(out), "--trials", "1", "--steps", "2", "--seed", "3"])
    assert code == 0
    for name in ("aggregate.csv", "aggregate_timing.csv", "steps.csv", "steps_timing.csv"):
        assert (out / name).exists()
    agg = read_csv(out / "aggregate.csv")
    assert agg.steps == 2 and agg.trials == 1
    assert "final mean RMSE" in capsys.readouterr().out


def test_cli_run_failed_trial_exit_code(tmp_path, monkeypatch):
    def broken(m, t, cfg):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(acq_mod, "train", broken)
    cfg = tmp_path / "kink.cfg"
    cfg.write_text("system = kink\ncriteria = random\nepochs = 5\n")
    assert main(["run", str(cfg), "--out-dir", str(tmp_path), "--trials", "1", "--steps", "1"]) == 1


def test_cli_simulate(tmp_path):
    assert main(["simulate", "pendulum", "--steps", "6", "--seed", "1", "--out-dir", str(tmp_path)]) == 0
    rows = (tmp_path / "rollout_pendulum.csv").read_text().splitlines()
    assert rows[0] == "t,x_0,x_1,c_0,y_0" and len(rows) == 8


def test_cli_errors(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.cfg"), "--out-dir", str(tmp_path)]) == 2
    assert "nope.cfg" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("system = moon\n")
    assert main(["run", str(bad), "--out-dir", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["fly"])


def test_cli_check():
    assert main(["check"]) == 0
