import csv

import numpy as np
import pytest

from trajode import __version__
from trajode.checkpoint import read_checkpoint, write_checkpoint
from trajode.cli import main

SPEC_TEXT = "n_train=6\nn_val=1\nn_test=3\nlength=20\nheight=6\nwidth=6\n"
TRAIN = ["--group-length", "5", "--latent-dim", "4", "--spatial-dim", "3", "--solver-steps", "2",
         "--lr", "1e-2", "--epochs", "4"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.txt").write_text(SPEC_TEXT)
    assert main(["generate", "--spec", str(d / "spec.txt"), "--out", str(d / "data.fmtj")]) == 0
    assert main(["train", "--data", str(d / "data.fmtj"), "--out", str(d / "m.ltrj")] + TRAIN) == 0
    return d


def test_generate_default_and_deterministic(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "a.fmtj"), "--seed", "4"]) == 0
    assert main(["generate", "--out", str(tmp_path / "b.fmtj"), "--seed", "4"]) == 0
    from trajode import read_bundle
    assert read_bundle(tmp_path / "a.fmtj").num_subjects == 88
    assert (tmp_path / "a.fmtj").read_bytes() == (tmp_path / "b.fmtj").read_bytes()
    snap = (tmp_path / "a.fmtj.resolved.txt").read_text()
    assert f"tool.version={__version__}" in snap and "seed=4" in snap


def test_generate_rejects_unknown_key(tmp_path, caplog):
    (tmp_path / "s.txt").write_text("n_train=3\nwobble=1\n")
    assert main(["generate", "--spec", str(tmp_path / "s.txt"), "--out", str(tmp_path / "x")]) == 2
    assert "wobble" in caplog.text


def test_train_outputs(work):
    hist = _rows(work / "m.ltrj.history.csv")
    assert hist[0] == ["epoch", "phase", "loss", "mean_spatial_correlation"] and len(hist) == 5
    snap = (work / "m.ltrj.resolved.txt").read_text()
    assert "epochs=4" in snap and "learning_rate=0.01" in snap and "tool.version=" in snap


def test_bad_backbone_is_usage_error(work):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(work / "data.fmtj"), "--out", "x", "--backbone", "lstm"])
    assert exc.value.code == 2


def test_config_file_precedence_and_unknown_keys(work, tmp_path):
    (tmp_path / "c.txt").write_text("epochs=2\nlearning_rate=0.5\nlatent_dim=4\n")
    out = tmp_path / "m.ltrj"
    args = ["train", "--data", str(work / "data.fmtj"), "--out", str(out), "--config",
            str(tmp_path / "c.txt"), "--lr", "1e-2", "--group-length", "5", "--spatial-dim", "3"]
    assert main(args) == 0
    snap = (tmp_path / "m.ltrj.resolved.txt").read_text()
    assert "epochs=2" in snap and "learning_rate=0.01" in snap
    (tmp_path / "bad.txt").write_text("epochs=2\nflux=3\n")
    args[args.index(str(tmp_path / "c.txt"))] = str(tmp_path / "bad.txt")
    assert main(args) == 2


def test_zero_phase_two_epochs_checkpoint(work, tmp_path):
    out = tmp_path / "p1.ltrj"
    args = ["train", "--data", str(work / "data.fmtj"), "--out", str(out), "--phase1-epochs", "4"]
    assert main(args + TRAIN) == 0
    from trajode import LatentTrajectoryModel, read_bundle
    bundle = read_bundle(work / "data.fmtj")
    model = LatentTrajectoryModel(group_length=5, latent_dim=4, spatial_dim=3, solver_steps=2,
                                  learning_rate=1e-2, epochs=4, phase1_epochs=4).fit(bundle)
    params, _ = read_checkpoint(out)
    assert all(np.array_equal(params[k], model.phase1_params_[k]) for k in params)


def test_predict_outputs(work):
    out = work / "pred"
    assert main(["predict", "--ckpt", str(work / "m.ltrj"), "--data", str(work / "data.fmtj"),
                 "--out-dir", str(out)]) == 0
    per = sorted(out.glob("corr_subject*.csv"))
    assert len(per) == 3
    assert len(_rows(per[0])) == 1 + 15 and _rows(per[0])[1][0] == "5"
    assert len(_rows(out / "correlation_aggregate.csv")) == 16
    assert (out / "predictions.fmtj").exists() and (out / "resolved_config.txt").exists()


def test_interpolate_and_vae_samples(work, tmp_path):
    ckpt = tmp_path / "v.ltrj"
    assert main(["train", "--data", str(work / "data.fmtj"), "--out", str(ckpt), "--variational",
                 "on", "--objective", "bidirectional"] + TRAIN) == 0
    out = tmp_path / "interp"
    assert main(["interpolate", "--ckpt", str(ckpt), "--data", str(work / "data.fmtj"),
                 "--out-dir", str(out), "--vae-samples", "2"]) == 0
    per = sorted(out.glob("corr_subject*.csv"))
    assert [r[0] for r in _rows(per[0])[1:]] == [str(t) for t in range(10, 15)]
    assert len(list(out.glob("std_map_subject*.csv"))) == 3
    assert len(_rows(next(out.glob("std_map_subject*.csv")))) == 6
    assert (out / "sample1" / "correlation_aggregate.csv").exists()
    metrics = dict(r for r in _rows(out / "summary.csv")[1:])
    assert "copy_last_known_frame_corr" in metrics


def test_cluster(work, tmp_path):
    base = ["cluster", "--ckpt", str(work / "m.ltrj"), "--data", str(work / "data.fmtj"),
            "--split", "train", "--seed-pixel", "2,3"]
    out = tmp_path / "c1"
    assert main(base + ["--k-range", "2..2", "--out", str(out)]) == 0
    assert len(_rows(out / "scores.csv")) == 2
    params, cfg = read_checkpoint(out / "mixture.ltrj")
    assert params["gmm.means"].shape == (2, 4) and cfg["gmm.K"] == 2
    assert len(list(out.glob("center*_map.csv"))) == 2
    out = tmp_path / "c2"
    assert main(base + ["--k-range", "2..3", "--codes", "encoded", "--out", str(out)]) == 0
    assert len(_rows(out / "codes.csv")) == 24


def test_missing_checkpoint_is_file_error(work, tmp_path):
    assert main(["cluster", "--ckpt", str(tmp_path / "nope.ltrj"), "--data",
                 str(work / "data.fmtj"), "--out", str(tmp_path / "c")]) == 3


def _write_field_checkpoint(work, path, W1=None, W2=None):
    params, cfg = read_checkpoint(work / "m.ltrj")
    n = params["ode.W1"].shape[1]
    params = dict(params)
    for k in ("ode.b1", "ode.b2"):
        params[k] = np.zeros_like(params[k])
    params["ode.W1"] = np.zeros_like(params["ode.W1"]) if W1 is None else W1
    params["ode.W2"] = np.zeros_like(params["ode.W2"]) if W2 is None else W2
    write_checkpoint(path, params, cfg)
    return n, params["ode.W1"].shape[0]


def test_flow_zero_field(work, tmp_path):
    _write_field_checkpoint(work, tmp_path / "z.ltrj")
    out = tmp_path / "flow"
    assert main(["flow", "--ckpt", str(tmp_path / "z.ltrj"), "--grid", "dims=0,1 range=3 res=20",
                 "--seed-pixel", "1,1", "--starts", "4", "--out", str(out)]) == 0
    grid = np.array(_rows(out / "grid.csv")[1:], dtype=float)
    assert grid.shape == (400, 4) and np.all(grid[:, 2:] == 0)
    assert len(_rows(out / "equilibria.csv")) == 5
    # the field vanishes everywhere, so the walk stops after its escape step
    assert len(list(out.glob("walk_step*.csv"))) == 2
    assert "walk_stalled_at=1" in (out / "resolved_config.txt").read_text()


def test_flow_walk_escapes_stable_equilibrium_along_least_stable_direction(work, tmp_path):
    params, _ = read_checkpoint(work / "m.ltrj")
    h, n = params["ode.W1"].shape
    r = np.random.default_rng(0)
    Q = np.linalg.qr(r.normal(size=(n, n)))[0]
    rates = -np.linspace(0.5, 2.0, n)
    A = Q @ np.diag(rates) @ Q.T
    # tanh(W1 z) is linear to first order at 0, so the Jacobian there is W2 W1 = A
    W1 = np.zeros((h, n))
    W1[:n] = 1e-3 * np.eye(n)
    W2 = np.zeros((n, h))
    W2[:, :n] = 1e3 * A
    _write_field_checkpoint(work, tmp_path / "lin.ltrj", W1, W2)
    out = tmp_path / "flow"
    assert main(["flow", "--ckpt", str(tmp_path / "lin.ltrj"), "--walk", "step=0.5 steps=4",
                 "--seed-pixel", "1,1", "--out", str(out)]) == 0
    eq = _rows(out / "equilibria.csv")
    assert len(eq) == 2 and eq[1][-1] == "stable"
    assert np.allclose(np.array(eq[1][:n], dtype=float), 0, atol=1e-9)
    codes = np.array(_rows(out / "walk_codes.csv")[1:], dtype=float)[:, 1:]
    step = (codes[1] - codes[0]) / 0.5
    assert abs(abs(step @ Q[:, 0]) - 1) < 1e-8
    snap = (out / "resolved_config.txt").read_text()
    assert "walk_start=equilibrium" in snap


def test_traits(work, tmp_path):
    out = tmp_path / "t.csv"
    assert main(["traits", "--ckpt", str(work / "m.ltrj"), "--data", str(work / "data.fmtj"),
                 "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["trait", "nrmse", "normalizer"] and len(rows) == 7
    table = tmp_path / "traits.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "trait_1", "trait_2"])
        for s in range(10):
            w.writerow([s, s * 0.5, (s % 3) - 1.0])
    assert main(["traits", "--ckpt", str(work / "m.ltrj"), "--data", str(work / "data.fmtj"),
                 "--traits", str(table), "--out", str(out)]) == 0
    assert len(_rows(out)) == 3


def test_traits_missing_table(work, tmp_path):
    from trajode import TrajectoryBundle, read_bundle, write_bundle
    b = read_bundle(work / "data.fmtj")
    write_bundle(TrajectoryBundle(b.frames, b.splits), tmp_path / "nt.fmtj")
    assert main(["traits", "--ckpt", str(work / "m.ltrj"), "--data", str(tmp_path / "nt.fmtj"),
                 "--out", str(tmp_path / "t.csv")]) == 3


def test_commands_are_deterministic(work, tmp_path):
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert main(["train", "--data", str(work / "data.fmtj"), "--out", str(d / "m.ltrj")]
                    + TRAIN) == 0
        assert main(["predict", "--ckpt", str(d / "m.ltrj"), "--data", str(work / "data.fmtj"),
                     "--out-dir", str(d / "pred")]) == 0
        assert main(["cluster", "--ckpt", str(d / "m.ltrj"), "--data", str(work / "data.fmtj"),
                     "--split", "train", "--k-range", "2..3", "--out", str(d / "cl")]) == 0
        outs.append({p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    assert outs[0].keys() == outs[1].keys()
    differing = [k for k in outs[0] if outs[0][k] != outs[1][k]]
    assert differing == [p for p in differing if p.name.endswith(".resolved.txt")
                         or p.name == "resolved_config.txt"]
