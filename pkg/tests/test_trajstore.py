import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdcg.trajstore import (BadMagicError, Ensemble, Frame, Trajectory,
                            TruncatedFileError, UnsupportedVersionError,
                            export_csv, read_trajectory, slice_time, subsample,
                            write_trajectory)


def make_traj(n_frames=5, n_particles=2, dim=3, dt=0.1, forces=True, seed=0):
    rng = np.random.default_rng(seed)
    w = dim * n_particles
    return Trajectory(
        dim,
        rng.uniform(0.5, 2.0, n_particles),
        dt * np.arange(n_frames),
        rng.normal(size=(n_frames, w)),
        rng.normal(size=(n_frames, w)),
        rng.normal(size=(n_frames, w)) if forces else None,
        dt,
    )


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        tr = make_traj()
        p = tmp_path / "a.trj"
        write_trajectory(tr, p)
        back = read_trajectory(p)
        assert back.dim == tr.dim
        assert back.dt_nominal == tr.dt_nominal
        np.testing.assert_array_equal(back.masses, tr.masses)
        np.testing.assert_array_equal(back.times, tr.times)
        np.testing.assert_array_equal(back.positions, tr.positions)
        np.testing.assert_array_equal(back.momenta, tr.momenta)
        np.testing.assert_array_equal(back.forces, tr.forces)

    def test_no_forces(self, tmp_path):
        tr = make_traj(forces=False)
        p = tmp_path / "a.trj"
        write_trajectory(tr, p)
        assert read_trajectory(p).forces is None

    def test_rewrite_is_byte_stable(self, tmp_path):
        tr = make_traj(seed=3)
        a, b = tmp_path / "a.trj", tmp_path / "b.trj"
        write_trajectory(tr, a)
        write_trajectory(read_trajectory(a), b)
        assert a.read_bytes() == b.read_bytes()

    @settings(max_examples=25, deadline=None)
    @given(
        n_frames=st.integers(1, 6),
        n_particles=st.integers(1, 4),
        dim=st.integers(1, 3),
        forces=st.booleans(),
        seed=st.integers(0, 2**16),
    )
    def test_round_trip_property(self, tmp_path_factory, n_frames, n_particles,
                                 dim, forces, seed):
        tr = make_traj(n_frames, n_particles, dim, forces=forces, seed=seed)
        p = tmp_path_factory.mktemp("rt") / "t.trj"
        write_trajectory(tr, p)
        back = read_trajectory(p)
        np.testing.assert_array_equal(back.positions, tr.positions)
        np.testing.assert_array_equal(back.momenta, tr.momenta)
        if forces:
            np.testing.assert_array_equal(back.forces, tr.forces)
        else:
            assert back.forces is None


class TestFileLayout:
    def test_header_and_payload_size(self, tmp_path):
        # fixed header 44 bytes, then 8*M masses, then per frame 8*(1 + 2*D*M)
        tr = Trajectory(1, [1.0], [0.0], [[0.5]], [[0.1]], None, 1.0)
        p = tmp_path / "one.trj"
        write_trajectory(tr, p)
        assert p.stat().st_size == 44 + 8 + 8 * (1 + 2)

    def test_magic_bytes(self, tmp_path):
        p = tmp_path / "m.trj"
        write_trajectory(make_traj(), p)
        assert p.read_bytes()[:4] == b"TRJ1"

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.trj"
        write_trajectory(make_traj(), p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            read_trajectory(p)

    def test_unsupported_version(self, tmp_path):
        p = tmp_path / "v.trj"
        write_trajectory(make_traj(), p)
        raw = bytearray(p.read_bytes())
        struct.pack_into("<I", raw, 4, 99)
        p.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            read_trajectory(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.trj"
        write_trajectory(make_traj(), p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(TruncatedFileError):
            read_trajectory(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "h.trj"
        p.write_bytes(b"TRJ1\x01\x00")
        with pytest.raises(TruncatedFileError):
            read_trajectory(p)


class TestValidation:
    def test_nonuniform_times_rejected(self):
        with pytest.raises(ValueError, match="non-uniform"):
            make_traj().__class__(
                1, [1.0], [0.0, 0.1, 0.35], np.zeros((3, 1)), np.zeros((3, 1)),
                None, 0.1)

    def test_negative_mass_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            Trajectory(1, [-1.0], [0.0], [[0.0]], [[0.0]], None, 0.1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Trajectory(3, [1.0], [0.0, 0.1], np.zeros((2, 4)), np.zeros((2, 4)),
                       None, 0.1)

    def test_frame_roundtrip(self):
        tr = make_traj()
        fr = tr.frame(2)
        assert isinstance(fr, Frame)
        assert fr.time == tr.times[2]
        np.testing.assert_array_equal(fr.positions, tr.positions[2])

    def test_from_frames(self):
        frames = [Frame(0.1 * i, 2, [1.0 * i, 2.0], [0.0, 0.5]) for i in range(4)]
        tr = Trajectory.from_frames(frames, [1.0], 0.1)
        assert tr.n_frames == 4
        assert tr.n_particles == 1
        assert tr.positions[3, 0] == 3.0


class TestSubsample:
    def test_stride(self):
        tr = make_traj(n_frames=10, dt=0.1)
        sub = subsample(tr, 3)
        np.testing.assert_allclose(sub.times, [0.0, 0.3, 0.6, 0.9])
        assert sub.dt_nominal == pytest.approx(0.3)
        np.testing.assert_array_equal(sub.positions, tr.positions[::3])

    def test_stride_one_is_identity(self):
        tr = make_traj()
        sub = subsample(tr, 1)
        np.testing.assert_array_equal(sub.times, tr.times)

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            subsample(make_traj(), 0)

    @given(st.integers(1, 9), st.integers(2, 40))
    @settings(max_examples=30, deadline=None)
    def test_frame_count_property(self, stride, n_frames):
        tr = make_traj(n_frames=n_frames)
        sub = subsample(tr, stride)
        assert sub.n_frames == (n_frames - 1) // stride + 1


class TestSliceTime:
    def test_window(self):
        tr = make_traj(n_frames=10, dt=0.1)
        cut = slice_time(tr, 0.25, 0.65)
        np.testing.assert_allclose(cut.times, [0.3, 0.4, 0.5, 0.6])

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            slice_time(make_traj(n_frames=5, dt=0.1), 0.11, 0.19)

    def test_inclusive_endpoints(self):
        tr = make_traj(n_frames=5, dt=0.1)
        cut = slice_time(tr, 0.1, 0.3)
        np.testing.assert_allclose(cut.times, [0.1, 0.2, 0.3])


class TestEnsemble:
    def test_shared_grid_enforced(self):
        a = make_traj(n_frames=5, seed=1)
        b = make_traj(n_frames=6, seed=2)
        with pytest.raises(ValueError, match="frames"):
            Ensemble([a, b], 1.0)

    def test_mismatched_particle_count(self):
        a = make_traj(n_particles=2, seed=1)
        b = make_traj(n_particles=3, seed=2)
        with pytest.raises(ValueError):
            Ensemble([a, b], 1.0)

    def test_subsample_all_paths(self):
        ens = Ensemble([make_traj(n_frames=9, seed=s) for s in range(3)], 2.0)
        sub = ens.subsample(2)
        assert sub.n_paths == 3
        assert all(tr.n_frames == 5 for tr in sub.paths)
        assert sub.beta == 2.0

    def test_needs_positive_beta(self):
        with pytest.raises(ValueError):
            Ensemble([make_traj()], 0.0)


def test_export_csv_columns(tmp_path):
    tr = make_traj(n_frames=2, n_particles=1, dim=2)
    p = tmp_path / "t.csv"
    export_csv(tr, p)
    lines = p.read_text().strip().splitlines()
    assert lines[0] == "time,particle,axis,q,p,f"
    assert len(lines) == 1 + 2 * 2
    first = lines[1].split(",")
    assert float(first[3]) == tr.positions[0, 0]
