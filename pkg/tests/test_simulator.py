import math

import numpy as np
import pytest

from tdoaloc.estimator import FilterState, NoiseConfig, predict
from tdoaloc.geometry import Pose, extract_features, yaw_rotation
from tdoaloc.simulator import (
    AxisProfile,
    BiasParams,
    Constellation,
    OutlierConfig,
    SinusoidTerm,
    TrajectorySpec,
    build_dataset,
    circle_spec,
    corner_constellation,
    gen_trajectory,
    load_constellation,
    load_dataset_csv,
    random_constellation,
    random_trajectory_spec,
    save_constellation,
    save_dataset_csv,
    synth_bias,
    synth_bias_batch,
    synth_imu,
    synth_tdoa,
)


def hover_spec(duration=5.0, rate=50.0, pos=(0.0, 0.0, 1.0)):
    return TrajectorySpec(x=AxisProfile(pos[0]), y=AxisProfile(pos[1]),
                          z=AxisProfile(pos[2]), duration=duration, rate=rate)


class TestSynthBias:
    def symmetric_chi(self):
        # dp_j mirrors dp_i, anchor angles equal pairwise, tag elevations equal
        return np.array([1.0, 2.0, 0.5, -1.0, -2.0, -0.5,
                         0.3, 0.3, 0.1, 0.9, -0.4, -0.4, 0.2, 0.2])

    def test_antisymmetric_construction_cancels(self):
        assert synth_bias(self.symmetric_chi()) == pytest.approx(0.0, abs=1e-15)

    def test_zero_terms(self):
        chi = np.zeros(14)
        chi[0:3] = [3, 0, 0]
        chi[3:6] = [0, 3, 0]  # equal ranges, all angles zero
        assert synth_bias(chi) == pytest.approx(0.0, abs=1e-15)

    def test_scalar_formula_oracle(self):
        rng = np.random.default_rng(0)
        params = BiasParams(k1=0.2, k2=0.07, k3=0.04)
        for _ in range(200):
            chi = rng.normal(size=14)
            ri = math.sqrt(chi[0]**2 + chi[1]**2 + chi[2]**2)
            rj = math.sqrt(chi[3]**2 + chi[4]**2 + chi[5]**2)
            expected = (params.k1 * (math.sin(chi[10]) * math.cos(chi[6])
                                     - math.sin(chi[11]) * math.cos(chi[7]))
                        + params.k2 * (math.sin(2 * chi[12])
                                       - math.sin(2 * chi[13]))
                        + params.k3 * (ri - rj) / (1.0 + ri + rj))
            assert synth_bias(chi, params) == pytest.approx(expected, abs=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(1)
        chi = rng.uniform(-1, 1, size=(1_000_000, 14))
        chi[:, 0:6] *= 8.0
        chi[:, 6:10] *= math.pi
        chi[:, 10:14] *= math.pi / 2
        p = BiasParams()
        b = synth_bias_batch(chi, p)
        assert np.abs(b).max() <= 2 * p.k1 + 2 * p.k2 + p.k3

    def test_swap_antisymmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            chi = rng.normal(size=14)
            swapped = chi.copy()
            swapped[0:3], swapped[3:6] = chi[3:6].copy(), chi[0:3].copy()
            for base in (6, 10):
                swapped[base], swapped[base + 1] = chi[base + 1], chi[base]
                swapped[base + 2], swapped[base + 3] = chi[base + 3], chi[base + 2]
            assert synth_bias(swapped) == pytest.approx(-synth_bias(chi),
                                                        abs=1e-12)


class TestTrajectory:
    def test_zero_amplitudes_hover(self):
        traj = gen_trajectory(hover_spec())
        s = traj.at(np.linspace(0, 5, 100))
        assert np.allclose(s.pos, [0, 0, 1])
        assert np.allclose(s.vel, 0.0)
        assert np.allclose(s.acc, 0.0)

    def test_single_sinusoid_velocity_amplitude(self):
        A, T = 1.2, 6.0
        spec = TrajectorySpec(
            x=AxisProfile(0.0, (SinusoidTerm(A, (T,), (0.0,)),)),
            y=AxisProfile(0.0), z=AxisProfile(1.0), duration=12.0, rate=200.0)
        s = gen_trajectory(spec).at(np.linspace(0, 12, 5000))
        assert np.abs(s.vel[:, 0]).max() == pytest.approx(2 * math.pi * A / T,
                                                          rel=1e-4)

    def test_analytic_derivatives_match_finite_differences(self):
        spec = random_trajectory_spec(3, duration=20.0)
        traj = gen_trajectory(spec)
        rng = np.random.default_rng(4)
        h = 1e-4
        for t in rng.uniform(1.0, 19.0, size=25):
            sm = traj.at(t - h)
            s0 = traj.at(t)
            sp = traj.at(t + h)
            vel_fd = (sp.pos[0] - sm.pos[0]) / (2 * h)
            acc_fd = (sp.pos[0] - 2 * s0.pos[0] + sm.pos[0]) / (h * h)
            yawrate_fd = (sp.yaw[0] - sm.yaw[0]) / (2 * h)
            assert np.abs(s0.vel[0] - vel_fd).max() < 1e-6
            assert np.abs(s0.acc[0] - acc_fd).max() < 1e-4
            assert abs(s0.yaw_rate[0] - yawrate_fd) < 1e-6

    def test_arena_violation(self):
        spec = TrajectorySpec(
            x=AxisProfile(0.0, (SinusoidTerm(10.0, (5.0,), (0.0,)),)),
            y=AxisProfile(0.0), z=AxisProfile(1.0))
        with pytest.raises(ValueError, match="exceeds arena"):
            gen_trajectory(spec)

    def test_random_specs_stay_in_arena(self):
        for seed in range(20):
            spec = random_trajectory_spec(seed)
            traj = gen_trajectory(spec)
            s = traj.at(np.linspace(0, spec.duration, 2000))
            lo, hi = np.asarray(spec.arena[0]), np.asarray(spec.arena[1])
            assert np.all(s.pos >= lo - 1e-9)
            assert np.all(s.pos <= hi + 1e-9)


class TestSynthImu:
    def test_hover_static_specific_force(self):
        traj = gen_trajectory(hover_spec())
        imu = synth_imu(traj, 0.0, 0.0, rate=100.0, seed=0)
        assert np.allclose(imu.accel, [0, 0, 9.81], atol=1e-12)
        assert np.allclose(imu.gyro, 0.0, atol=1e-12)
        assert np.all(np.diff(imu.timestamps) > 0)

    def test_closed_loop_consistency(self):
        # Noise-free IMU driven through the filter's prediction must
        # reproduce the analytic trajectory.
        spec = circle_spec(radius=1.5, period=8.0, z0=1.2, z_amp=0.5,
                           duration=10.0, yaw_rate=0.4)
        traj = gen_trajectory(spec)
        rate = 1000.0
        imu = synth_imu(traj, 0.0, 0.0, rate=rate, seed=0)
        s0 = traj.at(0.0)
        state = FilterState.create(p=s0.pos[0], v=s0.vel[0],
                                   C=yaw_rotation(float(s0.yaw[0])))
        noise = NoiseConfig()
        for k in range(len(imu)):
            state = predict(state, imu[k], 1.0 / rate, noise)
        end = traj.at(10.0)
        assert np.linalg.norm(state.p - end.pos[0]) < 1e-3

    def test_seeded_bitwise_determinism(self):
        traj = gen_trajectory(hover_spec())
        a = synth_imu(traj, 0.02, 0.002, rate=100.0, seed=42)
        b = synth_imu(traj, 0.02, 0.002, rate=100.0, seed=42)
        assert np.array_equal(a.accel, b.accel)
        assert np.array_equal(a.gyro, b.gyro)
        c = synth_imu(traj, 0.02, 0.002, rate=100.0, seed=43)
        assert not np.array_equal(a.accel, c.accel)


@pytest.fixture(scope="module")
def constellation():
    return corner_constellation(7, name="fixture")


class TestSynthTdoa:
    def test_noiseless_ideal(self, constellation):
        traj = gen_trajectory(hover_spec(duration=2.0))
        ds = synth_tdoa(traj, constellation, bias=BiasParams.zero(),
                        sigma=0.0, rate=50.0, seed=0)
        assert np.array_equal(ds.d_raw, ds.ideal_values())
        assert np.all(~ds.is_outlier)

    def test_forced_outliers(self, constellation):
        traj = gen_trajectory(hover_spec(duration=4.0))
        ds = synth_tdoa(traj, constellation, bias=BiasParams.zero(), sigma=0.0,
                        outliers=OutlierConfig(probability=1.0, min_shift=1.0,
                                               max_shift=3.0),
                        rate=50.0, seed=1)
        assert np.all(ds.is_outlier)
        assert np.all(np.abs(ds.d_raw - ds.ideal_values()) >= 1.0)

    def test_noise_moment(self, constellation):
        spec = random_trajectory_spec(5, duration=2000.0, rate=50.0)
        ds = synth_tdoa(gen_trajectory(spec), constellation, sigma=0.1,
                        rate=50.0, seed=2)
        resid = ds.d_raw - ds.ideal_values() - ds.bias_true
        assert len(ds) == 100_000
        assert abs(resid.std() - 0.1) < 0.005
        assert np.abs(resid).max() <= 0.6  # non-flagged residuals within 6 sigma

    def test_round_robin_pairs(self, constellation):
        traj = gen_trajectory(hover_spec(duration=1.0))
        ds = synth_tdoa(traj, constellation, rate=50.0, seed=3)
        pairs = constellation.round_robin_pairs()
        for k in range(len(ds)):
            assert (ds.anchor_i[k], ds.anchor_j[k]) == pairs[k % len(pairs)]

    def test_bias_labels_match_features(self, constellation):
        traj = gen_trajectory(circle_spec(duration=2.0))
        params = BiasParams()
        ds = synth_tdoa(traj, constellation, bias=params, sigma=0.0,
                        rate=50.0, seed=4)
        assert np.allclose(ds.bias_true, synth_bias_batch(ds.features(), params),
                           atol=1e-14)

    def test_determinism(self, constellation):
        traj = gen_trajectory(circle_spec(duration=2.0))
        a = synth_tdoa(traj, constellation, sigma=0.1, rate=50.0, seed=9)
        b = synth_tdoa(traj, constellation, sigma=0.1, rate=50.0, seed=9)
        assert np.array_equal(a.d_raw, b.d_raw)
        assert np.array_equal(a.bias_true, b.bias_true)


class TestFeatures:
    def test_vectorized_matches_scalar_extraction(self, constellation):
        spec = random_trajectory_spec(6, duration=3.0, rate=50.0)
        ds = synth_tdoa(gen_trajectory(spec), constellation, sigma=0.05,
                        rate=50.0, seed=5)
        X = ds.features()
        assert X.shape == (len(ds), 14)
        for k in range(0, len(ds), 17):
            rec = ds[k]
            chi = extract_features(rec.tag,
                                   constellation.pose(rec.anchor_i),
                                   constellation.pose(rec.anchor_j))
            assert np.allclose(X[k], chi.as_array(), atol=1e-12)


class TestBuildDataset:
    def make_dataset(self, constellation, n_records=1000, sigma=0.0,
                     outliers=None, seed=0):
        spec = random_trajectory_spec(8, duration=n_records / 50.0, rate=50.0)
        return synth_tdoa(gen_trajectory(spec), constellation, sigma=sigma,
                          outliers=outliers, rate=50.0, seed=seed)

    def test_split_sizes(self, constellation):
        ds = self.make_dataset(constellation, 1000)
        splits = build_dataset(ds, seed=0)
        assert (len(splits.train), len(splits.val), len(splits.test)) == (700, 150, 150)

    def test_outliers_dropped(self, constellation):
        ds = self.make_dataset(
            constellation, 1000, sigma=0.0,
            outliers=OutlierConfig(probability=0.1, min_shift=2.0,
                                   max_shift=2.5), seed=1)
        n_out = int(ds.is_outlier.sum())
        assert n_out > 0
        splits = build_dataset(ds, seed=0)
        total = len(splits.train) + len(splits.val) + len(splits.test)
        assert total == len(ds) - n_out
        for split in (splits.train, splits.val, splits.test):
            assert np.abs(split.labels).max() <= 1.0

    def test_noiseless_labels_equal_bias(self, constellation):
        ds = self.make_dataset(constellation, 500)
        assert np.allclose(ds.labels(), ds.bias_true, atol=1e-12)

    def test_empty_after_filter(self, constellation):
        ds = self.make_dataset(
            constellation, 200, sigma=0.0,
            outliers=OutlierConfig(probability=1.0, min_shift=2.0,
                                   max_shift=3.0), seed=2)
        with pytest.raises(ValueError, match="no records left"):
            build_dataset(ds, seed=0)

    def test_feature_slice_ablation(self, constellation):
        ds = self.make_dataset(constellation, 400)
        splits = build_dataset(ds, seed=0, feature_slice=slice(0, 6))
        assert splits.train.features.shape[1] == 6


class TestSerialization:
    def test_dataset_csv_round_trip(self, constellation, tmp_path):
        spec = random_trajectory_spec(9, duration=3.0, rate=50.0)
        ds = synth_tdoa(gen_trajectory(spec), constellation, sigma=0.1,
                        outliers=OutlierConfig(probability=0.2), rate=50.0,
                        seed=6)
        path = tmp_path / "ds.csv"
        save_dataset_csv(ds, path)
        back = load_dataset_csv(path, constellation)
        assert np.array_equal(ds.t, back.t)
        assert np.array_equal(ds.anchor_i, back.anchor_i)
        assert np.array_equal(ds.d_raw, back.d_raw)
        assert np.array_equal(ds.tag_pos, back.tag_pos)
        assert np.array_equal(ds.tag_quat, back.tag_quat)
        assert np.array_equal(ds.bias_true, back.bias_true)
        assert np.array_equal(ds.is_outlier, back.is_outlier)

    def test_constellation_round_trip(self, tmp_path):
        const = random_constellation(11, n_anchors=6, name="rt")
        path = tmp_path / "const.txt"
        save_constellation(const, path)
        back = load_constellation(path)
        assert back.name == "rt"
        assert back.ids == const.ids
        for aid in const.ids:
            assert np.allclose(back.pose(aid).position,
                               const.pose(aid).position, atol=1e-12)
            assert np.allclose(back.pose(aid).rotation,
                               const.pose(aid).rotation, atol=1e-12)

    def test_small_constellation_warns(self, tmp_path):
        const = Constellation(anchors=tuple(
            (k, Pose(position=(k, 0, 0))) for k in range(3)), name="tiny")
        path = tmp_path / "tiny.txt"
        save_constellation(const, path)
        with pytest.warns(UserWarning, match="at least 4"):
            load_constellation(path)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            Constellation(anchors=((0, Pose(position=(0, 0, 0))),
                                   (0, Pose(position=(1, 0, 0)))))
