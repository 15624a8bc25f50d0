"""Command-line driver: generate datasets, train the bias net, run the
filter, and evaluate correction quality.

Every command is a pure function of (config file, seed): outputs are
byte-identical across repeated runs except for the wall-clock timing block
inside run reports. Configs are JSON; see README for the schemas.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import biasnet, estimator, simulator
from .geometry import Pose, extract_features, yaw_rotation
from .tdoa import TdoaMeasurement
from .simulator import (
    AxisProfile,
    BiasParams,
    OutlierConfig,
    SinusoidTerm,
    TrajectorySpec,
    YawProfile,
    circle_spec,
    gen_trajectory,
    load_constellation,
    random_trajectory_spec,
)

TRAJECTORY_LOG_HEADER = ("t,est_px,est_py,est_pz,true_px,true_py,true_pz,"
                         "est_vx,est_vy,est_vz,sigma_x,sigma_y,sigma_z")


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _axis_from_dict(d: dict) -> AxisProfile:
    terms = tuple(
        SinusoidTerm(float(t["amplitude"]), tuple(float(p) for p in t["periods"]),
                     tuple(float(p) for p in t["phases"]))
        for t in d.get("terms", ()))
    return AxisProfile(offset=float(d.get("offset", 0.0)), terms=terms)


def _trajectory_from_config(cfg: dict, rng) -> TrajectorySpec:
    kind = cfg.get("kind", "random")
    duration = float(cfg.get("duration_s", 30.0))
    rate = float(cfg.get("rate_hz", 50.0))
    arena = tuple(tuple(v) for v in cfg["arena"]) if "arena" in cfg \
        else simulator.DEFAULT_ARENA
    if kind == "random":
        return random_trajectory_spec(rng, arena=arena, duration=duration,
                                      rate=rate)
    if kind == "circle":
        return circle_spec(
            radius=float(cfg.get("radius_m", 1.5)),
            period=float(cfg.get("period_s", 12.0)),
            z0=float(cfg.get("z0_m", 1.2)),
            z_amp=float(cfg.get("z_amp_m", 0.0)),
            z_period=float(cfg.get("z_period_s", 7.0)),
            duration=duration, rate=rate,
            yaw_rate=float(cfg.get("yaw_rate", 0.2)), arena=arena)
    if kind == "hover":
        pos = cfg.get("position", [0.0, 0.0, 1.0])
        return TrajectorySpec(
            x=AxisProfile(float(pos[0])), y=AxisProfile(float(pos[1])),
            z=AxisProfile(float(pos[2])),
            yaw=YawProfile(rate=float(cfg.get("yaw_rate", 0.0))),
            duration=duration, rate=rate, arena=arena)
    if kind == "terms":
        yaw_cfg = cfg.get("yaw", {})
        yaw = YawProfile(offset=float(yaw_cfg.get("offset", 0.0)),
                         rate=float(yaw_cfg.get("rate", 0.0)),
                         terms=_axis_from_dict(yaw_cfg).terms)
        return TrajectorySpec(
            x=_axis_from_dict(cfg["x"]), y=_axis_from_dict(cfg["y"]),
            z=_axis_from_dict(cfg["z"]), yaw=yaw,
            duration=duration, rate=rate, arena=arena)
    raise ValueError(f"unknown trajectory kind {kind!r}")


def _bias_from_config(cfg: dict | None) -> BiasParams:
    if cfg is None:
        return BiasParams()
    return BiasParams(k1=float(cfg.get("k1", 0.15)),
                      k2=float(cfg.get("k2", 0.10)),
                      k3=float(cfg.get("k3", 0.05)))


def _outliers_from_config(cfg: dict | None) -> OutlierConfig | None:
    if cfg is None or float(cfg.get("probability", 0.0)) == 0.0:
        return None
    return OutlierConfig(
        probability=float(cfg["probability"]),
        min_shift=float(cfg.get("min_shift_m", 1.0)),
        max_shift=float(cfg.get("max_shift_m", 3.0)),
        positive_fraction=float(cfg.get("positive_fraction", 0.9)))


def _noise_from_config(cfg: dict | None) -> estimator.NoiseConfig:
    cfg = cfg or {}
    return estimator.NoiseConfig(
        accel_density=float(cfg.get("accel_density", 0.02)),
        gyro_density=float(cfg.get("gyro_density", 0.002)),
        sigma_uwb=float(cfg.get("sigma_uwb", 0.1)))


def _cost_from_config(cfg: dict | None) -> estimator.RobustCost:
    cfg = cfg or {"kind": "gm"}
    kind = cfg.get("kind", "gm")
    if kind == "huber":
        return estimator.RobustCost.huber(float(cfg.get("param", 1.345)))
    if kind == "cauchy":
        return estimator.RobustCost.cauchy(float(cfg.get("param", 2.3849)))
    return estimator.RobustCost(kind)


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out: Path, command: str, config: dict, seed: int,
                    outputs: list[str], extra: dict | None = None) -> None:
    payload = {"command": command, "config_sha256": _config_hash(config),
               "seed": seed, "outputs": sorted(outputs)}
    if extra:
        payload.update(extra)
    _write_json(out / "manifest.json", payload)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(config: dict, seed: int, out: Path) -> list[str]:
    """Simulate one dataset CSV per constellation plus a manifest."""
    paths = config["constellations"]
    if isinstance(paths, str):
        paths = [paths]
    sigma = float(config.get("sigma_uwb", 0.1))
    bias = _bias_from_config(config.get("bias"))
    outliers = _outliers_from_config(config.get("outliers"))
    rate = float(config.get("tdoa_rate_hz", 50.0))
    children = np.random.SeedSequence(seed).spawn(2 * len(paths))
    outputs = []
    counts = {}
    seen_names = set()
    for k, cpath in enumerate(paths):
        const = load_constellation(cpath)
        if const.name in seen_names:
            raise ValueError(f"duplicate constellation name {const.name!r}; "
                             "dataset files would overwrite each other")
        seen_names.add(const.name)
        spec = _trajectory_from_config(config.get("trajectory", {}),
                                       np.random.default_rng(children[2 * k]))
        traj = gen_trajectory(spec)
        ds = simulator.synth_tdoa(traj, const, bias=bias, sigma=sigma,
                                  outliers=outliers, rate=rate,
                                  seed=children[2 * k + 1])
        fname = f"dataset_{const.name}.csv"
        simulator.save_dataset_csv(ds, out / fname)
        outputs.append(fname)
        counts[fname] = {"records": len(ds),
                         "skipped_singular": ds.skipped_singular}
    _write_manifest(out, "generate", config, seed, outputs,
                    {"datasets": counts})
    return outputs


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_named_datasets(entries) -> list[simulator.TdoaDataset]:
    datasets = []
    for entry in entries:
        const = load_constellation(entry["constellation"])
        datasets.append(simulator.load_dataset_csv(entry["csv"], const))
    return datasets


def _feature_slice(mode: str) -> slice | None:
    if mode == "full":
        return None
    if mode == "no-orientation":
        return slice(0, 6)  # dp_i, dp_j only
    raise ValueError(f"unknown feature mode {mode!r}")


def cmd_train(config: dict, seed: int, out: Path) -> list[str]:
    """Train the bias net on dataset CSVs; write model file and loss log."""
    datasets = _load_named_datasets(config["datasets"])
    mode = config.get("feature_mode", "full")
    splits = simulator.build_dataset(datasets,
                                     seed=int(config.get("split_seed", 5)),
                                     feature_slice=_feature_slice(mode))
    train_cfg = biasnet.TrainConfig(
        batch_size=int(config.get("batch_size", 128)),
        learning_rate=float(config.get("learning_rate", 0.2)),
        max_epochs=int(config.get("max_epochs", 100)),
        patience=int(config.get("patience", 5)),
        rng_seed=seed,
        halve_lr_on_increase=bool(config.get("halve_lr_on_increase", True)))
    hidden = tuple(config.get("hidden", (30, 30, 30)))
    activation = config.get("activation", "relu")
    try:
        result = biasnet.train(splits.train, splits.val, train_cfg,
                               hidden=hidden, activation=activation)
    except RuntimeError as exc:
        raise RuntimeError(f"{exc} (see loss log for preceding epochs)") from exc
    biasnet.save_model(result.model, out / "model.bin")
    with open(out / "training_log.csv", "w") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for ep, (tr, va) in enumerate(zip(result.train_mse, result.val_mse)):
            fh.write(f"{ep},{tr:.17g},{va:.17g}\n")
    test_mse = biasnet.mse(result.model, *splits.test)
    _write_manifest(out, "train", config, seed,
                    ["model.bin", "training_log.csv"],
                    {"best_epoch": result.best_epoch,
                     "val_mse": result.val_mse[result.best_epoch],
                     "test_mse": test_mse,
                     "feature_mode": mode})
    return ["model.bin", "training_log.csv"]


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Machine-readable summary of one filter run."""

    rmse_x: float
    rmse_y: float
    rmse_z: float
    rmse_total: float
    coverage_x: float
    coverage_y: float
    coverage_z: float
    meas_mean_before: float
    meas_std_before: float
    meas_mean_after: float
    meas_std_after: float
    n_updates: int
    n_downweighted: int
    n_true_outliers: int
    predict_median_us: float
    update_median_us: float

    def to_dict(self) -> dict:
        d = asdict(self)
        timing = {"predict_median_us": d.pop("predict_median_us"),
                  "update_median_us": d.pop("update_median_us")}
        d["timing"] = timing
        return d


@dataclass
class RunResult:
    t: np.ndarray
    est_pos: np.ndarray
    true_pos: np.ndarray
    est_vel: np.ndarray
    sigma: np.ndarray
    report: MetricsReport


def run_experiment(constellation, spec: TrajectorySpec,
                   noise: estimator.NoiseConfig, bias: BiasParams,
                   outliers: OutlierConfig | None,
                   cost: estimator.RobustCost, iterations: int,
                   model: biasnet.MlpModel | None, seed: int,
                   imu_rate: float = 100.0, tdoa_rate: float = 50.0,
                   init_std=(0.1, 0.1, 0.02),
                   sigma_sim: float | None = None) -> RunResult:
    """Simulate a flight and run the filter over it.

    The filter predicts on every IMU sample and applies one robust TDOA
    update per measurement; bias-net features are computed from the current
    state estimate, never from ground truth. ``sigma_sim`` is the true
    injected TDOA noise; ``noise.sigma_uwb`` is the filter's measurement
    scale, usually set above the true noise so the robust weighting keeps
    most of the information in clean measurements.
    """
    ss = np.random.SeedSequence(seed).spawn(3)
    traj = gen_trajectory(spec)
    imu = simulator.synth_imu(traj, noise.accel_density, noise.gyro_density,
                              rate=imu_rate, seed=ss[0])
    tdoa_ds = simulator.synth_tdoa(
        traj, constellation, bias=bias,
        sigma=noise.sigma_uwb if sigma_sim is None else sigma_sim,
        outliers=outliers, rate=tdoa_rate, seed=ss[1])
    anchor_pose = {aid: pose for aid, pose in constellation.anchors}

    rng = np.random.default_rng(ss[2])
    s0 = traj.at(0.0)
    pos_std, vel_std, att_std = init_std
    state = estimator.FilterState.create(
        p=s0.pos[0] + pos_std * rng.standard_normal(3),
        v=s0.vel[0] + vel_std * rng.standard_normal(3),
        C=yaw_rotation(float(s0.yaw[0] + att_std * rng.standard_normal())),
        pos_std=pos_std, vel_std=vel_std, att_std=att_std)

    n_steps = len(imu)
    dt = 1.0 / imu_rate
    truth = traj.at(imu.timestamps)
    est_pos = np.empty((n_steps, 3))
    est_vel = np.empty((n_steps, 3))
    sig = np.empty((n_steps, 3))
    ideal = tdoa_ds.ideal_values()
    before = tdoa_ds.d_raw - ideal
    after = before.copy()
    n_down = 0
    predict_times = []
    update_times = []

    next_meas = 0
    n_meas = len(tdoa_ds)
    for k in range(n_steps):
        t0 = time.perf_counter_ns()
        state = estimator.predict(state, imu[k], dt, noise)
        predict_times.append(time.perf_counter_ns() - t0)
        t_now = imu.timestamps[k] + 1e-9
        while next_meas < n_meas and tdoa_ds.t[next_meas] <= t_now:
            m = next_meas
            pose_i = anchor_pose[int(tdoa_ds.anchor_i[m])]
            pose_j = anchor_pose[int(tdoa_ds.anchor_j[m])]
            d_raw = float(tdoa_ds.d_raw[m])
            if model is not None:
                chi = extract_features(Pose(state.p, state.C), pose_i, pose_j)
                x = chi.as_array()
                if model.input_dim == 6:
                    x = x[:6]
                corrected = d_raw - biasnet.forward(model, x)
            else:
                corrected = d_raw
            after[m] = corrected - ideal[m]
            e0 = (corrected - (
                np.linalg.norm(state.p - pose_i.position)
                - np.linalg.norm(state.p - pose_j.position))) / noise.sigma_uwb
            if abs(e0) > 3.0:
                n_down += 1
            meas = TdoaMeasurement(int(tdoa_ds.anchor_i[m]),
                                   int(tdoa_ds.anchor_j[m]),
                                   d_raw, float(tdoa_ds.t[m]))
            t0 = time.perf_counter_ns()
            state = estimator.m_update(
                state, meas, corrected, (pose_i, pose_j), noise, cost,
                iterations)
            update_times.append(time.perf_counter_ns() - t0)
            next_meas += 1
        est_pos[k] = state.p
        est_vel[k] = state.v
        sig[k] = np.sqrt(np.diag(state.P)[:3])

    err = est_pos - truth.pos
    rmse_axis = np.sqrt(np.mean(err**2, axis=0))
    inside = np.abs(err) <= 3.0 * sig
    report = MetricsReport(
        rmse_x=float(rmse_axis[0]), rmse_y=float(rmse_axis[1]),
        rmse_z=float(rmse_axis[2]),
        rmse_total=float(np.sqrt(np.mean(np.sum(err**2, axis=1)))),
        coverage_x=float(inside[:, 0].mean()),
        coverage_y=float(inside[:, 1].mean()),
        coverage_z=float(inside[:, 2].mean()),
        meas_mean_before=float(before.mean()),
        meas_std_before=float(before.std()),
        meas_mean_after=float(after.mean()),
        meas_std_after=float(after.std()),
        n_updates=next_meas,
        n_downweighted=n_down,
        n_true_outliers=int(tdoa_ds.is_outlier.sum()),
        predict_median_us=float(np.median(predict_times) / 1e3),
        update_median_us=float(np.median(update_times) / 1e3)
        if update_times else 0.0,
    )
    return RunResult(t=imu.timestamps, est_pos=est_pos, true_pos=truth.pos,
                     est_vel=est_vel, sigma=sig, report=report)


def cmd_run(config: dict, seed: int, out: Path) -> list[str]:
    """Run the localization pipeline on a simulated flight."""
    const = load_constellation(config["constellation"])
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    spec = _trajectory_from_config(config.get("trajectory", {}), rng)
    noise = _noise_from_config(config.get("noise"))
    sigma_sim = config.get("noise", {}).get("sigma_uwb_sim")
    model_path = config.get("bias_model", "none")
    model = None if model_path in (None, "none") else biasnet.load_model(model_path)
    init = config.get("init", {})
    try:
        result = run_experiment(
            const, spec, noise,
            bias=_bias_from_config(config.get("bias")),
            outliers=_outliers_from_config(config.get("outliers")),
            cost=_cost_from_config(config.get("cost")),
            iterations=int(config.get("irls_iterations", 2)),
            model=model, seed=seed,
            imu_rate=float(config.get("imu_rate_hz", 100.0)),
            tdoa_rate=float(config.get("tdoa_rate_hz", 50.0)),
            init_std=(float(init.get("pos_std", 0.1)),
                      float(init.get("vel_std", 0.1)),
                      float(init.get("att_std", 0.02))),
            sigma_sim=None if sigma_sim is None else float(sigma_sim))
    except estimator.CovarianceDegenerate as exc:
        raise RuntimeError(f"{exc}") from exc
    with open(out / "trajectory_log.csv", "w") as fh:
        fh.write(TRAJECTORY_LOG_HEADER + "\n")
        for k in range(len(result.t)):
            vals = [result.t[k], *result.est_pos[k], *result.true_pos[k],
                    *result.est_vel[k], *result.sigma[k]]
            fh.write(",".join(format(v, ".17g") for v in vals) + "\n")
    _write_json(out / "report.json", result.report.to_dict())
    _write_manifest(out, "run", config, seed,
                    ["trajectory_log.csv", "report.json"])
    return ["trajectory_log.csv", "report.json"]


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(config: dict, seed: int, out: Path) -> list[str]:
    """Residual statistics before/after correction on the test split."""
    model = biasnet.load_model(config["model"])
    datasets = _load_named_datasets(config["datasets"])
    mode = config.get("feature_mode",
                      "full" if model.input_dim == 14 else "no-orientation")
    splits = simulator.build_dataset(datasets,
                                     seed=int(config.get("split_seed", 5)),
                                     feature_slice=_feature_slice(mode))
    X, y = splits.test
    if X.shape[1] != model.input_dim:
        raise ValueError(
            f"model expects {model.input_dim} features but mode {mode!r} "
            f"provides {X.shape[1]}")
    after = y - biasnet.forward(model, X)
    n_bins = int(config.get("histogram_bins", 60))
    lo = min(float(y.min()), float(after.min()))
    hi = max(float(y.max()), float(after.max()))
    edges = np.linspace(lo, hi, n_bins + 1)
    count_before, _ = np.histogram(y, bins=edges)
    count_after, _ = np.histogram(after, bins=edges)
    with open(out / "histogram.csv", "w") as fh:
        fh.write("bin_lo,bin_hi,count_before,count_after\n")
        for k in range(n_bins):
            fh.write(f"{edges[k]:.17g},{edges[k+1]:.17g},"
                     f"{count_before[k]},{count_after[k]}\n")
    _write_json(out / "report.json", {
        "n_test": int(len(y)),
        "mean_before": float(y.mean()), "std_before": float(y.std()),
        "mean_after": float(after.mean()), "std_after": float(after.std()),
    })
    _write_manifest(out, "eval", config, seed, ["histogram.csv", "report.json"])
    return ["histogram.csv", "report.json"]


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {"generate": cmd_generate, "train": cmd_train,
             "run": cmd_run, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tdoaloc",
        description="UWB TDOA localization experiments: simulate, train, "
                    "filter, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](config, seed, out)
    except Exception as exc:  # noqa: BLE001 - single exit point for the CLI
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
