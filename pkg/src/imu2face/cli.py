"""Command-line entry point: ``imu2face <command> [--config PATH] [--key value ...]``.

Exit codes: 0 success, 2 configuration error, 3 malformed data, 4 missing
prerequisite, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import container
from . import face3d
from . import landmarks as lm
from . import model as mdl
from . import synth
from . import training as tr
from .config import FIELD_TYPES, RunConfig, load_config
from .exceptions import ConfigError, DataError, GeometryError, NumericalError
from .signal import N_CHANNELS, preprocess_stream, read_imu_csv, segment_windows, write_imu_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4, 5
FEATURE_KIND = "imu2face.features"


class MissingPrerequisite(Exception):
    """An input artifact produced by an earlier command is absent."""


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingPrerequisite(f"{what} not found at {path}")
    return Path(path)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_manifest(cfg: RunConfig):
    path = _require(Path(cfg.data_dir) / "manifest.json", "session manifest (run `synth` first)")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: RunConfig):
    out = Path(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    sessions = synth.generate_sessions(
        cfg.n_sessions, seed=cfg.seed, user_seed=cfg.user_seed, perturbation=cfg.user_perturbation,
        duration=cfg.duration, noise_sigma=cfg.noise_sigma, latent_dim=cfg.latent_dim,
        jitter=cfg.jitter, rate=cfg.rate,
    )
    entries = []
    for i, s in enumerate(sessions):
        sid = f"session_{i:02d}"
        write_imu_csv(out / f"{sid}_imu.csv", s.imu)
        lm.write_landmarks_csv(out / f"{sid}_landmarks.csv", s.landmarks_raw, s.frames)
        entries.append({"id": sid, "imu": f"{sid}_imu.csv", "landmarks": f"{sid}_landmarks.csv",
                        "seed": int(s.spec.seed), "frames": int(len(s.frames))})
    rig = synth.generate_rig(cfg.seed, cfg.rig_vertices, cfg.rig_dims)
    face3d.save_rig(out / "rig.bin", rig)
    _write_json(out / "manifest.json", {
        "generator_seed": cfg.seed, "user_seed": cfg.user_seed,
        "user_perturbation": cfg.user_perturbation, "noise_sigma": cfg.noise_sigma,
        "n_sessions": len(entries), "sessions": entries, "rig": "rig.bin",
    })
    print(f"wrote {len(entries)} sessions ({cfg.duration:g} s each) and rig.bin to {out}")


def cmd_preprocess(cfg: RunConfig):
    manifest = _read_manifest(cfg)
    out = cfg.features_path
    out.mkdir(parents=True, exist_ok=True)
    for entry in manifest["sessions"]:
        imu_path = _require(Path(cfg.data_dir) / entry["imu"], "IMU file")
        lm_path = _require(Path(cfg.data_dir) / entry["landmarks"], "landmark file")
        stream = read_imu_csv(imu_path)
        frames, raw = lm.read_landmarks_csv(lm_path)
        session = tr.assemble_session(stream, raw, entry["id"], **cfg.signal_kwargs())
        n = len(session)
        _, nose, theta, d = lm.normalize_points(raw[:n])
        container.save(out / f"{entry['id']}.feat", {"kind": FEATURE_KIND, "id": entry["id"]}, {
            "features": session.features, "targets": session.targets, "frames": frames[:n],
            "nose": nose, "theta": theta, "d": d,
        })
        print(f"{entry['id']}: {n} frames, {N_CHANNELS} channels, feature dim {session.features.shape[1]}")


def load_feature_sessions(path: Path):
    files = sorted(_require(path, "feature directory (run `preprocess` first)").glob("*.feat"))
    if not files:
        raise MissingPrerequisite(f"no feature files in {path} (run `preprocess` first)")
    sessions = []
    for f in files:
        meta, t = container.load(f)
        if meta.get("kind") != FEATURE_KIND:
            raise DataError(f"{f}: not a feature file")
        sessions.append(tr.Session(meta["id"], t["features"], t["targets"]))
    return sessions


def _split(cfg: RunConfig, sessions):
    by_id = {s.id: s for s in sessions}
    if cfg.train_sessions:
        unknown = [i for i in cfg.train_sessions + cfg.test_sessions if i not in by_id]
        if unknown:
            raise ConfigError(f"unknown session ids in split: {', '.join(unknown)}")
        train = [by_id[i] for i in cfg.train_sessions]
        test_ids = cfg.test_sessions or tuple(i for i in by_id if i not in cfg.train_sessions)
        return train, [by_id[i] for i in test_ids]
    return tr.split_sessions(sessions, cfg.n_train, cfg.seed)


def cmd_train(cfg: RunConfig):
    sessions = load_feature_sessions(cfg.features_path)
    train, test = _split(cfg, sessions)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    weights, history = tr.train(train, cfg.train_config(), cfg.model_config(), cfg.metric_config())
    cfg.weights_path.parent.mkdir(parents=True, exist_ok=True)
    mdl.save_weights(cfg.weights_path, weights)
    tr.write_history_csv(out / "history.csv", history)
    _write_json(out / "split.json", {"train": [s.id for s in train], "test": [s.id for s in test]})
    best = history.val_nme[history.best_epoch] if history.best_epoch >= 0 else float("nan")
    print(f"trained {len(history.step_loss)} steps in {time.perf_counter() - t0:.1f} s; "
          f"best validation NME {best:.3f}% (epoch {history.best_epoch}); weights -> {cfg.weights_path}")


def _adaptation_sessions(train, seconds):
    """The first ``seconds`` of the training sessions, in order."""
    out, left = [], int(round(seconds * 30.0))
    for s in train:
        if left < tr.WINDOW:
            break
        n = min(len(s), left)
        out.append(tr.Session(s.id, s.features[:n], s.targets[:n]))
        left -= n
    return out


def cmd_finetune(cfg: RunConfig):
    weights = mdl.load_weights(_require(cfg.weights_path, "pretrained weights"))
    sessions = load_feature_sessions(cfg.features_path)
    train, test = _split(cfg, sessions)
    adapt = _adaptation_sessions(train, cfg.adapt_seconds)
    tuned, history = tr.fine_tune(weights, adapt, cfg.train_config())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "finetuned_weights.bin"
    mdl.save_weights(path, tuned)
    tr.write_history_csv(out / "finetune_history.csv", history)
    _write_json(out / "split.json", {"train": [s.id for s in train], "test": [s.id for s in test]})
    frames = sum(len(s) for s in adapt)
    print(f"fine-tuned linear layers on {frames} frames ({frames / 30.0:.0f} s); weights -> {path}")


def _read_predictions(path: Path, sessions):
    """Predictions per session from ``<id>_predictions.csv`` files, aligned to window targets."""
    preds, targets = [], []
    for s in sessions:
        f = _require(path / f"{s.id}_predictions.csv", "prediction file")
        frames, pts = lm.read_landmarks_csv(f)
        _, y = s.windows()
        last = np.arange(tr.WINDOW - 1, len(s))
        lookup = dict(zip(frames.tolist(), range(len(frames))))
        missing = [int(fr) for fr in last if int(fr) not in lookup]
        if missing:
            raise DataError(f"{f}: no prediction for frame {missing[0]}")
        preds.append(pts[[lookup[int(fr)] for fr in last]])
        targets.append(y)
    return np.concatenate(preds), np.concatenate(targets)


def cmd_eval(cfg: RunConfig):
    sessions = load_feature_sessions(cfg.features_path)
    _, test = _split(cfg, sessions)
    if cfg.predictions:
        pred, y = _read_predictions(_require(Path(cfg.predictions), "prediction directory"), test)
        report = tr.report_from_predictions(pred, y, cfg.metric_config())
    else:
        weights = mdl.load_weights(_require(cfg.weights_path, "weights (run `train` first)"))
        report = tr.evaluate(weights, test, cfg.metric_config(), cfg.latency_samples)
    out = Path(cfg.out_dir) / "report"
    tr.write_report(report, out)
    print(f"MAE {report.mae_mm:.3f} mm, NME {report.nme_pct:.3f}% over {report.n_windows} windows "
          f"of {len(test)} test sessions; report -> {out}")


def cmd_infer(cfg: RunConfig):
    weights = mdl.load_weights(_require(cfg.weights_path, "weights (run `train` first)"))
    manifest = _read_manifest(cfg)
    out = Path(cfg.out_dir) / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    latencies = []
    for entry in manifest["sessions"]:
        stream = read_imu_csv(_require(Path(cfg.data_dir) / entry["imu"], "IMU file"))
        features, _, _ = preprocess_stream(stream, **cfg.signal_kwargs())
        windows = segment_windows(features)
        if cfg.infer_frames:
            windows = windows[:cfg.infer_frames]
        preds = np.empty((len(windows), lm.N_LANDMARKS, 2))
        for i, w in enumerate(windows):
            t0 = time.perf_counter()
            preds[i] = mdl.forward(weights, w).data
            latencies.append((time.perf_counter() - t0) * 1e3)
        frames = np.arange(tr.WINDOW - 1, tr.WINDOW - 1 + len(windows))
        lm.write_landmarks_csv(out / f"{entry['id']}_predictions.csv", preds, frames)
    lat = np.asarray(latencies)
    summary = {"p50_latency_ms": float(np.percentile(lat, 50)),
               "p95_latency_ms": float(np.percentile(lat, 95)), "windows": int(lat.size)}
    _write_json(Path(cfg.out_dir) / "latency.json", summary)
    print(f"{lat.size} windows; latency p50 {summary['p50_latency_ms']:.2f} ms, "
          f"p95 {summary['p95_latency_ms']:.2f} ms; predictions -> {out}")


def _fit_input(cfg: RunConfig) -> Path:
    path = Path(cfg.predictions) if cfg.predictions else Path(cfg.out_dir) / "predictions"
    _require(path, "landmark predictions (run `infer` first)")
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise MissingPrerequisite(f"no landmark CSV files in {path}")
        return files[0]
    return path


def cmd_fit(cfg: RunConfig):
    rig = face3d.load_rig(_require(cfg.rig_path, "rig file"))
    source = _fit_input(cfg)
    frames, pts = lm.read_landmarks_csv(source)
    if cfg.fit_frames:
        frames, pts = frames[:cfg.fit_frames], pts[:cfg.fit_frames]
    if len(pts) == 0:
        raise DataError(f"{source}: no landmark rows")
    result = face3d.fit_parameters(rig, pts, reg_beta=cfg.reg_beta, reg_psi=cfg.reg_psi,
                                   max_iter=cfg.max_iter, tol=cfg.fit_tol,
                                   smooth_window=cfg.smooth_window)
    out = Path(cfg.out_dir)
    face3d.export_mesh_sequence(rig, result.params, out / "meshes")
    with open(out / "fit_params.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"beta{i}" for i in range(rig.n_shape)]
                   + [f"psi{i}" for i in range(rig.n_expression)] + ["theta_jaw"])
        for fr, p in zip(frames, result.params):
            w.writerow([int(fr)] + [repr(float(v)) for v in p.beta] + [repr(float(v)) for v in p.psi]
                       + [repr(p.theta_jaw)])
    cam = result.camera
    _write_json(out / "fit_camera.json", {
        "s": cam.s, "R": cam.R.tolist(), "t": cam.t.tolist(), "status": result.status,
        "iterations": result.iterations, "residual_rms": result.residual_rms,
    })
    print(f"fitted {len(result.params)} frames from {source.name} ({result.status}, "
          f"{result.iterations} iterations, RMS residual {result.residual_rms:.3g}); "
          f"meshes -> {out / 'meshes'}")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "fit": cmd_fit,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-reproducible runs")
    common.add_argument("--out", dest="out_dir", help="output directory (config key out_dir)")
    for key in FIELD_TYPES:
        if key == "out_dir":
            continue
        common.add_argument(f"--{key}", dest=key, help=argparse.SUPPRESS if key != "seed" else "master seed")
    parser = argparse.ArgumentParser(prog="imu2face", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.replace("cmd_", ""))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    overrides = {k: v for k, v in vars(args).items()
                 if k in FIELD_TYPES and v is not None}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ctx = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        ctx = threadpool_limits(limits=1)
    try:
        with ctx:
            COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, GeometryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
