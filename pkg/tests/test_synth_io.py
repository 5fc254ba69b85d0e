import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staticinv import elasticity as el
from staticinv.config import ConfigError, RunConfig, load_config, parse_config
from staticinv.forward import solve_quasistatic
from staticinv.inverse import HistoryRecord, ValidationReport
from staticinv.io import (HISTORY_COLUMNS, read_history_csv, read_json, read_poses, write_history_csv,
                          write_json, write_poses, write_validation_csv)
from staticinv.mesh import MeshError, PoseObservation, surface_vertices
from staticinv.synth import (band_labels, banded_material, make_block, rotated_gravity, rotation_angles,
                             synthesize_poses)


class TestSynth:
    def test_block_counts_and_orientation(self):
        mesh = make_block((2, 2, 10))
        assert mesh.n_nodes == 3 * 3 * 11 and mesh.n_tets == 200
        from staticinv.mesh import element_volumes
        vols = element_volumes(mesh.nodes, mesh.tets)
        assert vols.min() > 0
        assert vols.sum() == pytest.approx(0.02 * 0.02 * 0.1, rel=1e-12)
        assert (mesh.nodes[mesh.fixed_vertices, 0] == 0).all()

    def test_bands(self):
        mesh = make_block((2, 2, 9))
        labels = band_labels(mesh, 3, "z")
        assert np.bincount(labels).tolist() == [60, 60, 60]
        z = mesh.nodes[mesh.tets].mean(axis=1)[:, 2]
        assert (np.diff(labels[np.argsort(z)]) >= 0).all()

    def test_rotation_angles(self):
        np.testing.assert_array_equal(rotation_angles(5), [-60, -30, 0, 30, 60])
        np.testing.assert_array_equal(rotation_angles(1), [0])

    def test_xz_gravity_vectors(self):
        for t in rotation_angles(5):
            g = rotated_gravity(t, "xz")
            r = np.deg2rad(t)
            assert g @ np.array([np.sin(r), 0, -np.cos(r)]) == pytest.approx(9.81, rel=1e-14)
            assert np.linalg.norm(g) == pytest.approx(9.81, rel=1e-14)
            assert g[1] == 0.0
        np.testing.assert_allclose(rotated_gravity(0, "xz"), [0, 0, -9.81])
        np.testing.assert_allclose(rotated_gravity(90, "yz"), [0, 9.81, 0], atol=1e-15)

    def test_noiseless_single_pose_equals_forward(self):
        mesh = make_block((2, 2, 4))
        mat = banded_material(mesh, [1e5, 2e5, 3e5])
        poses, states = synthesize_poses(mesh, mat, [rotated_gravity(0.0)])
        direct = solve_quasistatic(mesh, mat, rotated_gravity(0.0))
        np.testing.assert_array_equal(poses[0].targets, direct.positions[poses[0].observed_ids])
        expect = np.setdiff1d(surface_vertices(mesh), mesh.fixed_vertices)
        np.testing.assert_array_equal(poses[0].observed_ids, expect)

    def test_noise_statistics(self):
        mesh = make_block((2, 2, 10))
        mat = banded_material(mesh, [1e5, 2e5, 3e5])
        g = rotated_gravity(0.0)
        clean, _ = synthesize_poses(mesh, mat, [g] * 18)
        noisy, _ = synthesize_poses(mesh, mat, [g] * 18, noise_std=1e-4, rng=np.random.default_rng(0))
        d = np.concatenate([np.linalg.norm(n.targets - c.targets, axis=1) for n, c in zip(noisy, clean)])
        assert d.size >= 1000
        assert np.sqrt((d**2).mean()) == pytest.approx(1e-4 * np.sqrt(3), rel=0.2)
        assert d.mean() == pytest.approx(1e-4 * np.sqrt(3), rel=0.2)


class TestIO:
    def test_poses_round_trip(self, tmp_path):
        poses = [PoseObservation([0.1, 0.0, -9.8], [3, 5], [[0.1, 0.2, 0.3], [1e-17, 2.0, 3.0]]),
                 PoseObservation([0.0, 0.0, 0.0], [], np.zeros((0, 3)))]
        write_poses(tmp_path / "p.json", poses)
        back = read_poses(tmp_path / "p.json")
        for a, b in zip(poses, back):
            np.testing.assert_array_equal(a.gravity, b.gravity)
            np.testing.assert_array_equal(a.observed_ids, b.observed_ids)
            np.testing.assert_array_equal(a.targets, b.targets)

    def test_poses_errors(self, tmp_path):
        p = tmp_path / "bad.json"
        write_json(p, {"gravity": [0, 0, 1]})
        with pytest.raises(MeshError, match="top-level list"):
            read_poses(p)
        write_json(p, [{"gravity": [0, 0, 1], "observed": [1]}])
        with pytest.raises(MeshError, match="targets"):
            read_poses(p)

    def test_history_round_trip(self, tmp_path):
        hist = [HistoryRecord("material_0", 0, 1.5, 1.25, 0.25, 3e-9, 0.0, [1e6, 2e5]),
                HistoryRecord("rest_0", 1, 0.1 + 0.2, 0.3, 0.0, 1e-300, 0.5, [1e6, 2e5])]
        write_history_csv(tmp_path / "h.csv", hist, 2)
        rows = read_history_csv(tmp_path / "h.csv")
        header = (tmp_path / "h.csv").read_text().splitlines()[0].split(",")
        assert header == HISTORY_COLUMNS + ["E_0", "E_1"]
        assert rows[1]["objective"] == 0.1 + 0.2 and rows[1]["iter"] == 1 and rows[0]["E_1"] == 2e5

    def test_validation_csv(self, tmp_path):
        rep = ValidationReport(["pose_0", "pose_1"], [1.0, 3.0], [0.1, 0.3])
        write_validation_csv(tmp_path / "v.csv", {"inverted": rep})
        lines = (tmp_path / "v.csv").read_text().splitlines()
        assert lines[0] == "model,pose,total_error,mean_vertex_error"
        assert lines[-1] == "inverted,aggregate,4.0,0.2"

    def test_json_numpy(self, tmp_path):
        write_json(tmp_path / "a.json", {"x": np.arange(3.0), "n": np.int64(4)})
        assert read_json(tmp_path / "a.json") == {"x": [0.0, 1.0, 2.0], "n": 4}

    def test_no_temp_files_left(self, tmp_path):
        write_json(tmp_path / "a.json", [1])
        assert [p.name for p in tmp_path.iterdir()] == ["a.json"]


class TestConfig:
    def test_defaults_and_text_round_trip(self):
        cfg = RunConfig()
        assert cfg.physics.poisson == 0.43 and cfg.physics.density == 1000.0
        assert cfg.solver.max_newton_iters == 100 and cfg.inverse.P_upper == 1e6
        back = parse_config(cfg.to_text())
        assert back.to_flat() == cfg.to_flat()

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1.0, 5000.0), st.floats(0.0, 0.49), st.integers(1, 64), st.one_of(st.none(), st.floats(0, 1)),
           st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 20)))
    def test_flat_round_trip(self, rho, nu, threads, alpha, cells):
        cfg = RunConfig()
        cfg.physics.density, cfg.physics.poisson, cfg.threads = rho, nu, str(threads)
        cfg.inverse = dataclasses.replace(cfg.inverse, alpha=alpha)
        cfg.synth.cells = cells
        assert RunConfig.from_flat(cfg.to_flat()).to_flat() == cfg.to_flat()
        assert parse_config(cfg.to_text()).to_flat() == cfg.to_flat()

    def test_relative_paths(self, tmp_path):
        (tmp_path / "run.cfg").write_text("paths.node = mesh.node  # rest mesh\nthreads = auto\n")
        cfg = load_config(tmp_path / "run.cfg")
        assert cfg.paths.node == str(tmp_path / "mesh.node")
        assert cfg.thread_count() >= 1

    @pytest.mark.parametrize("text,match", [("physics.colour = red", "unknown"),
                                            ("bogus.key = 1", "unknown"),
                                            ("physics.density = heavy", "bad value"),
                                            ("inverse.P_lower = 5e6", "inverse"),
                                            ("just words", "line 1")])
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text)

    def test_bad_threads(self):
        cfg = parse_config("threads = 0")
        with pytest.raises(ConfigError):
            cfg.thread_count()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.cfg")
