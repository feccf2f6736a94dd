import math
import subprocess
import sys

import numpy as np
import pytest

from helpers import random_rotation
from kidney_pivot import io
from kidney_pivot.cli import main
from kidney_pivot.config import RunConfig, config_from_dict, load_config
from kidney_pivot.errors import ConfigError
from kidney_pivot.geometry import PointCloud, RigidTransform, box_mesh

SMALL = """\
schema_version = 1
patients = 2
offsets = 2
er_list = [0.3, 0.6, 1.0]
workers = 1

[gains]
theta_rate_deg = 5.0
"""


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


# ---------------------------------------------------------------------------
# configuration


def test_defaults_and_degrees(small_config):
    cfg = load_config(small_config)
    assert cfg.patients == 2 and cfg.er_list == (0.3, 0.6, 1.0)
    assert cfg.gains.theta_rate == pytest.approx(math.radians(5.0))
    assert load_config() == RunConfig()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"patiens": 3})
    with pytest.raises(ConfigError):
        config_from_dict({"gains": {"K_p99": 1.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"gains": {"theta_rate": 0.1}})  # the file takes degrees
    with pytest.raises(ConfigError):
        config_from_dict({"schema_version": 2})
    with pytest.raises(ConfigError):
        config_from_dict({"er_list": [0.2, 0.5]})
    with pytest.raises(ConfigError):
        config_from_dict({"gains": {"K_p1": -1.0}})


def test_digest_stable_and_sensitive():
    a = RunConfig()
    assert a.digest() == RunConfig().digest() and len(a.digest()) == 16
    assert load_config(workers=4).digest() == a.digest()
    assert load_config(seed=1).digest() != a.digest()


# ---------------------------------------------------------------------------
# file formats


def test_ply_round_trip(tmp_path, rng):
    nrm = rng.normal(size=(50, 3))
    cloud = PointCloud(rng.normal(size=(50, 3)) * 100, nrm / np.linalg.norm(nrm, axis=1, keepdims=True))
    io.write_ply(tmp_path / "c.ply", cloud)
    back = io.read_ply(tmp_path / "c.ply")
    assert np.array_equal(back.points, cloud.points)
    np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-15)  # the reader renormalizes


def test_obj_and_pose_round_trip(tmp_path, rng):
    mesh = box_mesh((10.0, 20.0, 30.0), (1.0 / 3.0, 0.0, 0.0))
    io.write_obj(tmp_path / "m.obj", mesh)
    back = io.read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.vertices, mesh.vertices) and np.array_equal(back.faces, mesh.faces)
    pose = RigidTransform(random_rotation(rng), rng.normal(size=3))
    io.write_pose(tmp_path / "p.txt", pose)
    assert np.array_equal(io.read_pose(tmp_path / "p.txt").as_matrix(), pose.as_matrix())


def test_csv_stamp(tmp_path):
    io.write_csv(tmp_path / "t.csv", ("a", "b"), [(1, 0.5)], ["config abc seeds 1 2"])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["# config abc seeds 1 2", "a,b", "1,0.500000"]


# ---------------------------------------------------------------------------
# command line


def test_template_build_no_inputs(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["template", "build", str(tmp_path / "empty"), "--out", str(tmp_path)]) == 2
    assert "no inputs" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("colour = 'red'\n")
    assert main(["patient", "gen", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["experiment", "er", "--patients", "0", "--out", str(tmp_path)]) == 2


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["run", "sweep", "--strategy", "zigzag"])
    assert info.value.code == 2


def test_template_and_patient_commands(tmp_path):
    assert main(["template", "cohort", "--count", "3", "--out", str(tmp_path / "cohort")]) == 0
    assert main(["template", "build", str(tmp_path / "cohort"), "--sample-k", "256", "--out", str(tmp_path / "t")]) == 0
    assert len(io.read_ply(tmp_path / "t" / "template.ply")) == 256
    rows = (tmp_path / "t" / "convergence.csv").read_text().splitlines()
    assert rows[0].startswith("# config ") and rows[1] == "n,mean_diff_mm" and len(rows) == 4
    assert main(["patient", "gen", "--seed", "5", "--out", str(tmp_path / "p")]) == 0
    assert {p.name for p in (tmp_path / "p").iterdir()} >= {"kidney.obj", "kidney_gt_pose.txt", "body_surface.csv"}


def test_explore_localize_sweep_pipeline(tmp_path):
    pdir, out = tmp_path / "p", tmp_path / "run"
    assert main(["patient", "gen", "--seed", "0", "--out", str(pdir)]) == 0
    assert main(["run", "explore", "--patient", str(pdir), "--er", "0.6", "--out", str(out), "--trace"]) == 0
    assert (out / "trace.csv").exists() and len(io.read_ply(out / "p_local.ply")) > 50
    assert main(["template", "cohort", "--count", "4", "--out", str(tmp_path / "c")]) == 0
    assert main(["template", "build", str(tmp_path / "c"), "--sample-k", "512", "--out", str(tmp_path / "t")]) == 0
    assert main(["run", "localize", "--cloud", str(out / "p_local.ply"),
                 "--template", str(tmp_path / "t" / "template.ply"), "--out", str(out)]) == 0
    assert (out / "icp_log.jsonl").read_text().count("\n") >= 1
    assert main(["run", "sweep", "--patient", str(pdir), "--strategy", "op",
                 "--kidney-pose", str(out / "kidney_pose.txt"), "--out", str(out)]) == 0
    assert main(["run", "sweep", "--patient", str(pdir), "--strategy", "nop", "--out", str(out)]) == 2
    v = float((out / "metrics.csv").read_text().splitlines()[-1].split(",")[-1])
    assert v > 0.8


def test_experiment_er_is_byte_deterministic(tmp_path, small_config):
    for d in ("a", "b"):
        assert main(["experiment", "er", "--config", str(small_config), "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "er_study.csv").read_bytes()
    assert a == (tmp_path / "b" / "er_study.csv").read_bytes()
    assert a.startswith(b"# config ") and a.count(b"\n") == 2 + 2 * 2 * 3


def test_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "kidney_pivot.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "experiment" in out.stdout
