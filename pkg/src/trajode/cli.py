"""Command-line entry point.

Exit codes: 0 success, 2 usage/configuration, 3 data or parse error,
4 numerical divergence, 5 undefined metric.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (decode_cluster_centers, equilibria_to_csv, find_equilibria, flow_walk,
                       grid_to_csv, ode_field, vector_field_grid)
from .autodiff import make_rng
from .checkpoint import format_config, parse_config, parse_value, write_checkpoint
from .data import SynthSpec, TrajectoryBundle, generate_synthetic, read_bundle, write_bundle
from .errors import ConfigurationError, DataError, ParseError, TrajodeError
from .metrics import batch_spatial_correlation
from .mixture import select_k
from .model import LatentTrajectoryModel
from .traits import TraitRegressor, evaluate_traits

log = logging.getLogger("trajode")


# -- helpers ------------------------------------------------------------------

def _write_snapshot(path: Path, command: str, resolved: dict):
    snap = {"command": command, "tool.version": __version__}
    snap.update({k: (str(v) if isinstance(v, Path) else v) for k, v in resolved.items()})
    path.write_text(format_config(snap) + "\n", encoding="utf-8")


def _read_config(path) -> dict:
    try:
        return parse_config(Path(path).read_text(encoding="utf-8"))
    except ParseError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def _resolve(args, defaults: dict) -> dict:
    """Flags override config-file values, which override built-in defaults."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        for key, val in _read_config(args.config).items():
            key = key.replace("-", "_")
            if key not in defaults:
                raise ConfigurationError(f"unknown config key {key!r}")
            resolved[key] = val
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = val
    return resolved


def _int_pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise ConfigurationError(f"expected two comma-separated integers, got {text!r}") from None
    return a, b


def _parse_kv(text: str, allowed: dict) -> dict:
    out = dict(allowed)
    for item in text.split():
        if "=" not in item:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        key, val = item.split("=", 1)
        if key not in allowed:
            raise ConfigurationError(f"unknown option {key!r}; allowed: {sorted(allowed)}")
        out[key] = val
    return out


def _load_bundle(path) -> TrajectoryBundle:
    if not Path(path).is_file():
        raise DataError(f"bundle file not found: {path}")
    return read_bundle(path)


def _load_model(path) -> LatentTrajectoryModel:
    if not Path(path).is_file():
        raise DataError(f"checkpoint file not found: {path}")
    return LatentTrajectoryModel.load(path)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _matrix_csv(path, mat):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(mat):
            w.writerow([repr(float(v)) for v in row])


# -- commands -------------------------------------------------------------------

def cmd_generate(args):
    values = _read_config(args.spec) if args.spec else {}
    spec = SynthSpec.from_mapping(values)
    bundle = generate_synthetic(spec, args.seed)
    out = Path(args.out)
    write_bundle(bundle, out)
    resolved = spec.to_dict()
    resolved["seed"] = args.seed
    _write_snapshot(out.with_name(out.name + ".resolved.txt"), "generate", resolved)
    log.info("wrote %d subjects to %s", bundle.num_subjects, out)


TRAIN_DEFAULTS = dict(
    objective="forward", backbone="ode", variational=False, epochs=100, phase1_epochs=None,
    batch_size=8, learning_rate=1e-4, beta1=0.9, beta2=0.99, kl_weight=1.0, clip_norm=None,
    latent_dim=16, spatial_dim=8, spatial_hidden=64, temporal_hidden=64, augment_dim=None,
    ode_hidden=None, augment_mode="evolving", solver="rk4", solver_steps=10,
    num_groups=4, group_length=20, downsample=1, seed=0,
)


def cmd_train(args):
    cfg = _resolve(args, TRAIN_DEFAULTS)
    if isinstance(cfg["variational"], str):
        cfg["variational"] = parse_value(cfg["variational"])
    bundle = _load_bundle(args.data)
    params = {k: v for k, v in cfg.items() if k != "seed"}
    model = LatentTrajectoryModel(random_state=cfg["seed"], **params)
    model.fit(bundle)
    out = Path(args.out)
    model.save(out)
    _write_rows(out.with_name(out.name + ".history.csv"),
                ["epoch", "phase", "loss", "mean_spatial_correlation"], model.history_)
    _write_snapshot(out.with_name(out.name + ".resolved.txt"), "train",
                    dict(cfg, data=args.data, out=args.out))
    last = model.history_[-1]
    log.info("final loss %.6g, train correlation %.4f", last[2], last[3])


def _split_subjects(bundle, split):
    idx = bundle.indices(split)
    if idx.size == 0:
        raise DataError(f"bundle has no {split!r} subjects")
    return idx, bundle.subset(idx)


def _prediction_outputs(out_dir: Path, model, sub, idx, pred, groups, scored):
    """Per-subject and aggregate correlation CSVs over the frames of ``scored`` groups."""
    T = model.group_length
    corr = batch_spatial_correlation(pred, groups)[:, scored]
    times = np.concatenate([np.arange(g * T, (g + 1) * T) for g in scored])
    corr = corr.reshape(len(idx), -1)
    for i, sid in enumerate(idx):
        ok = np.isfinite(corr[i])
        _write_rows(out_dir / f"corr_subject{sid}.csv", ["t", "corr", "defined"],
                    [(int(t), float(c) if o else 0.0, int(o)) for t, c, o in zip(times, corr[i], ok)])
    with np.errstate(invalid="ignore"):
        agg = np.nanmean(corr, axis=0)
    _write_rows(out_dir / "correlation_aggregate.csv", ["t", "mean_corr"],
                [(int(t), float(c)) for t, c in zip(times, agg)])
    return float(np.nanmean(corr))


def _run_prediction(args, command, scored_fn):
    model = _load_model(args.ckpt)
    bundle = _load_bundle(args.data)
    idx, sub = _split_subjects(bundle, args.split)
    groups = model._grouped(sub)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scored = scored_fn(model)
    pred = model.predict(groups)
    write_bundle(TrajectoryBundle(pred, sub.splits), out_dir / "predictions.fmtj")
    mean = _prediction_outputs(out_dir, model, sub, idx, pred, groups, scored)
    summary = [("mean_corr", mean)]
    if command == "interpolate":
        T = model.group_length
        copy = np.repeat(groups[:, 1, -1:], T, axis=1)
        summary.append(("copy_last_known_frame_corr",
                        float(np.nanmean(batch_spatial_correlation(copy, groups[:, 2])))))
    if args.vae_samples:
        samples = model.sample_predictions(groups, args.vae_samples, make_rng(args.seed))
        for n, s in enumerate(samples):
            sdir = out_dir / f"sample{n}"
            sdir.mkdir(exist_ok=True)
            m = _prediction_outputs(sdir, model, sub, idx, s, groups, scored)
            summary.append((f"sample{n}_mean_corr", m))
        std = samples.std(axis=0).mean(axis=(1, 2))
        for i, sid in enumerate(idx):
            _matrix_csv(out_dir / f"std_map_subject{sid}.csv", std[i])
    _write_rows(out_dir / "summary.csv", ["metric", "value"], summary)
    _write_snapshot(out_dir / "resolved_config.txt", command,
                    {"ckpt": args.ckpt, "data": args.data, "split": args.split,
                     "vae_samples": args.vae_samples, "seed": args.seed})
    log.info("%s mean correlation %.4f", command, mean)


def cmd_predict(args):
    _run_prediction(args, "predict", lambda m: list(range(1, m.num_groups)))


def cmd_interpolate(args):
    def scored(m):
        if m.num_groups != 4:
            raise ConfigurationError("interpolation scores group 2 of a 4-group model")
        return [2]
    _run_prediction(args, "interpolate", scored)


def _parse_k_range(text):
    try:
        a, b = (int(v) for v in text.split(".."))
    except ValueError:
        raise ConfigurationError(f"k-range must look like 2..6, got {text!r}") from None
    return range(a, b + 1)


def cmd_cluster(args):
    model = _load_model(args.ckpt)
    bundle = _load_bundle(args.data)
    _, sub = _split_subjects(bundle, args.split)
    groups = model._grouped(sub)
    if args.codes == "encoded":
        codes = model.encode_groups(groups.reshape((-1,) + groups.shape[2:]))
    else:
        codes = model.rollout_codes(groups).reshape(-1, model.latent_dim)
    rng = make_rng(args.seed)
    result = select_k(codes, _parse_k_range(args.k_range), rng, restarts=args.restarts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.to_csv(out / "scores.csv")
    _matrix_csv(out / "codes.csv", codes)
    if result.chosen is None:
        raise DataError("no cluster count could be fitted")
    gmm = result.mixtures[result.chosen]
    write_checkpoint(out / "mixture.ltrj",
                     {"gmm.weights": gmm.weights, "gmm.means": gmm.means,
                      "gmm.covariances": gmm.covariances},
                     {"gmm.K": result.chosen, "gmm.codes": args.codes, "tool.version": __version__})
    seed = _int_pair(args.seed_pixel)
    _write_rows(out / "centers.csv", ["k"] + [f"z{i}" for i in range(gmm.dim)],
                [[k] + list(mu) for k, mu in enumerate(gmm.means)])
    for k, (frames, tmap) in enumerate(decode_cluster_centers(gmm.means, model.decode, seed)):
        tmap.to_csv(out / f"center{k}_map.csv")
    _write_snapshot(out / "resolved_config.txt", "cluster",
                    {"ckpt": args.ckpt, "data": args.data, "split": args.split,
                     "codes": args.codes, "k_range": args.k_range, "restarts": args.restarts,
                     "seed": args.seed, "seed_pixel": args.seed_pixel, "chosen_k": result.chosen})
    log.info("chosen K = %d", result.chosen)


def cmd_flow(args):
    model = _load_model(args.ckpt)
    if model.backbone != "ode":
        raise ConfigurationError("flow analysis needs an ODE checkpoint")
    fld = ode_field(model.params_, model.spec_.ode, model.augment_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid_opts = _parse_kv(args.grid or "", {"dims": "0,1", "range": "3", "res": "20"})
    walk_opts = _parse_kv(args.walk or "", {"step": "0.5", "steps": "4"})
    grid = vector_field_grid(fld, _int_pair(grid_opts["dims"]), float(grid_opts["range"]),
                             int(grid_opts["res"]), core_dim=model.latent_dim)
    grid_to_csv(grid, out / "grid.csv")
    eqs = find_equilibria(fld, args.starts, make_rng(args.seed), args.tol)
    equilibria_to_csv(eqs, out / "equilibria.csv")
    start = eqs[0].point if eqs else np.zeros(fld.dim)
    walk = flow_walk(start, fld, float(walk_opts["step"]), int(walk_opts["steps"]),
                     model.decode, _int_pair(args.seed_pixel), model.latent_dim)
    _write_rows(out / "walk_codes.csv", ["step"] + [f"z{i}" for i in range(fld.dim)],
                [[n] + list(c) for n, c in enumerate(walk.codes)])
    for n, tmap in enumerate(walk.maps):
        tmap.to_csv(out / f"walk_step{n}.csv")
    _write_snapshot(out / "resolved_config.txt", "flow",
                    {"ckpt": args.ckpt, "grid": args.grid or "", "walk": args.walk or "",
                     "seed_pixel": args.seed_pixel, "starts": args.starts, "tol": args.tol,
                     "seed": args.seed, "equilibria_found": len(eqs),
                     "walk_start": "equilibrium" if eqs else "origin",
                     "walk_stalled_at": walk.stalled_at})


def read_trait_csv(path, num_subjects):
    """Trait table with header ``subject_id, name_1..name_m``; every subject must appear."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2 or rows[0][0] != "subject_id":
        raise DataError(f"{path}: header must start with subject_id and name at least one trait")
    names = rows[0][1:]
    table = np.full((num_subjects, len(names)), np.nan)
    for lineno, row in enumerate(rows[1:], 2):
        try:
            sid, vals = int(row[0]), [float(v) for v in row[1:]]
        except (ValueError, IndexError):
            raise DataError(f"{path}: malformed row {lineno}") from None
        if len(vals) != len(names) or not 0 <= sid < num_subjects:
            raise DataError(f"{path}: row {lineno} does not match the header or subject count")
        table[sid] = vals
    if np.isnan(table).any():
        raise DataError(f"{path}: traits missing for some subjects")
    return names, table


def cmd_traits(args):
    model = _load_model(args.ckpt)
    bundle = _load_bundle(args.data)
    if args.traits:
        names, table = read_trait_csv(args.traits, bundle.num_subjects)
        bundle = TrajectoryBundle(bundle.frames, bundle.splits, names, table)
    if bundle.traits is None:
        raise DataError("bundle carries no trait table")
    tr, train = _split_subjects(bundle, "train")
    te, test = _split_subjects(bundle, args.split)
    head = TraitRegressor(ridge="auto" if args.ridge is None else args.ridge).fit(model.transform(train), bundle.traits[tr])
    report = evaluate_traits(head, model.transform(test), bundle.traits[te], bundle.trait_names)
    out = Path(args.out)
    report.to_csv(out)
    _write_snapshot(out.with_name(out.name + ".resolved.txt"), "traits",
                    {"ckpt": args.ckpt, "data": args.data, "traits": args.traits or "bundle",
                     "split": args.split, "ridge": args.ridge})
    for name, err in report.errors.items():
        log.warning("trait %s: %s", name, err)


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajode", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"trajode {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic trajectory bundle")
    g.add_argument("--spec", help="key=value synthetic spec file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value file; flags take precedence")
    t.add_argument("--objective", choices=["forward", "bidirectional"])
    t.add_argument("--backbone", choices=["ode", "latent-rnn", "pure-rnn"])
    t.add_argument("--variational", choices=["on", "off"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--phase1-epochs", dest="phase1_epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--kl-weight", dest="kl_weight", type=float)
    t.add_argument("--clip-norm", dest="clip_norm", type=float)
    t.add_argument("--latent-dim", dest="latent_dim", type=int)
    t.add_argument("--spatial-dim", dest="spatial_dim", type=int)
    t.add_argument("--augment-dim", dest="augment_dim", type=int)
    t.add_argument("--augment-mode", dest="augment_mode", choices=["evolving", "constant-zero"])
    t.add_argument("--solver", choices=["rk4", "euler"])
    t.add_argument("--solver-steps", dest="solver_steps", type=int)
    t.add_argument("--group-length", dest="group_length", type=int)
    t.add_argument("--num-groups", dest="num_groups", type=int)
    t.add_argument("--downsample", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    for name, func in (("predict", cmd_predict), ("interpolate", cmd_interpolate)):
        q = sub.add_parser(name, help=f"{name} test trajectories and score them")
        q.add_argument("--ckpt", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--split", default="test", choices=["train", "val", "test"])
        q.add_argument("--out-dir", dest="out_dir", required=True)
        q.add_argument("--vae-samples", dest="vae_samples", type=int, default=0)
        q.add_argument("--seed", type=int, default=0)
        q.set_defaults(func=func)

    c = sub.add_parser("cluster", help="Gaussian-mixture analysis of latent codes")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--split", default="test", choices=["train", "val", "test"])
    c.add_argument("--codes", choices=["encoded", "rolled-out"], default="rolled-out")
    c.add_argument("--k-range", dest="k_range", default="2..6")
    c.add_argument("--restarts", type=int, default=3)
    c.add_argument("--seed-pixel", dest="seed_pixel", default="0,0")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    f = sub.add_parser("flow", help="vector-field grid, equilibria and flow walk")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--grid", help='e.g. "dims=0,1 range=3 res=20"')
    f.add_argument("--walk", help='e.g. "step=0.5 steps=4"')
    f.add_argument("--seed-pixel", dest="seed_pixel", default="0,0")
    f.add_argument("--starts", type=int, default=64)
    f.add_argument("--tol", type=float, default=1e-8)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_flow)

    r = sub.add_parser("traits", help="fit a linear trait head and report NRMSE")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="test", choices=["train", "val", "test"])
    r.add_argument("--traits", help="CSV trait table overriding the bundle's own")
    r.add_argument("--ridge", type=float, default=None,
                   help="ridge penalty; default: none unless the codes are rank deficient")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_traits)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TrajodeError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
