import json

import numpy as np
import pytest

from dreamphys.config import SimConfig, config_from_dict, load_config
from dreamphys.errors import EmptyScene, MalformedPly, RangeError, SchemaError
from dreamphys.ply import load_ply, save_ply
from dreamphys.scene import build_covariance

from conftest import random_scene


def write_min_ply(path, rows, fmt="binary_little_endian", extra_props=(),
                  element="vertex"):
    """Minimal 3DGS ply with raw (pre-activation) values."""
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", *extra_props,
             "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3"]
    header = ["ply", f"format {fmt} 1.0", f"element {element} {len(rows)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        arr = np.asarray(rows, dtype=np.float32).reshape(len(rows), len(names))
        if fmt == "ascii":
            f.write("\n".join(" ".join(repr(float(v)) for v in r) for r in arr)
                    .encode())
        else:
            f.write(arr.astype("<f4").tobytes())


def min_row(x=0.0, y=0.0, z=0.0, opacity_raw=0.0, scale_raw=(0, 0, 0),
            rot=(1, 0, 0, 0), dc=(0.1, 0.2, 0.3)):
    return [x, y, z, *dc, opacity_raw, *scale_raw, *rot]


class TestLoadPly:
    def test_sigmoid_opacity(self, tmp_path):
        p = tmp_path / "one.ply"
        write_min_ply(p, [min_row(opacity_raw=0.0)])
        scene = load_ply(p)
        assert scene.opacities[0] == pytest.approx(0.5)

    def test_exp_scale(self, tmp_path):
        p = tmp_path / "one.ply"
        write_min_ply(p, [min_row(scale_raw=(0, 0, 0))])
        scene = load_ply(p)
        np.testing.assert_allclose(scene.scales[0], 1.0)

    def test_bounds(self, tmp_path):
        p = tmp_path / "two.ply"
        write_min_ply(p, [min_row(0, 0, 0), min_row(1, 2, 3)])
        scene = load_ply(p)
        np.testing.assert_allclose(scene.bounds_min, [0, 0, 0])
        np.testing.assert_allclose(scene.bounds_max, [1, 2, 3])

    def test_quaternion_normalized(self, tmp_path):
        p = tmp_path / "q.ply"
        write_min_ply(p, [min_row(rot=(2.0, 0, 0, 0))])
        scene = load_ply(p)
        assert abs(np.linalg.norm(scene.rotations[0]) - 1.0) < 1e-6

    def test_ascii_format(self, tmp_path):
        p = tmp_path / "a.ply"
        write_min_ply(p, [min_row(1, 2, 3, opacity_raw=1.5)], fmt="ascii")
        scene = load_ply(p)
        np.testing.assert_allclose(scene.centers[0], [1, 2, 3])
        assert scene.opacities[0] == pytest.approx(1 / (1 + np.exp(-1.5)))

    def test_sh_degree_inferred(self, tmp_path):
        p = tmp_path / "sh1.ply"
        extra = [f"f_rest_{i}" for i in range(9)]
        row = min_row()
        row = row[:6] + list(np.arange(9) * 0.1) + row[6:]
        write_min_ply(p, [row], extra_props=extra)
        scene = load_ply(p)
        assert scene.sh_degree == 1
        assert scene.sh.shape == (1, 4, 3)
        # channel-major file layout: first 3 entries are the red coefficients
        np.testing.assert_allclose(scene.sh[0, 1:, 0], [0.0, 0.1, 0.2],
                                   atol=1e-7)

    def test_missing_property(self, tmp_path):
        p = tmp_path / "bad.ply"
        names = ["x", "y", "z"]
        header = ["ply", "format binary_little_endian 1.0",
                  "element vertex 1"]
        header += [f"property float {n}" for n in names]
        header.append("end_header")
        with open(p, "wb") as f:
            f.write(("\n".join(header) + "\n").encode())
            f.write(np.zeros(3, dtype="<f4").tobytes())
        with pytest.raises(MalformedPly):
            load_ply(p)

    def test_wrong_element(self, tmp_path):
        p = tmp_path / "elem.ply"
        write_min_ply(p, [min_row()], element="face")
        with pytest.raises(MalformedPly):
            load_ply(p)

    def test_empty(self, tmp_path):
        p = tmp_path / "empty.ply"
        write_min_ply(p, [])
        with pytest.raises(EmptyScene):
            load_ply(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "trunc.ply"
        write_min_ply(p, [min_row()])
        blob = p.read_bytes()
        p.write_bytes(blob[:-8])
        with pytest.raises(MalformedPly):
            load_ply(p)


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path, rng):
        for degree in (0, 1, 2, 3):
            scene = random_scene(rng, n=17, degree=degree)
            p = tmp_path / f"rt{degree}.ply"
            save_ply(scene, p)
            back = load_ply(p)
            assert back.sh_degree == degree
            for field in ("centers", "opacities", "scales", "rotations", "sh"):
                np.testing.assert_allclose(getattr(back, field),
                                           getattr(scene, field),
                                           atol=1e-6, rtol=1e-5)

    def test_loaded_kernels_satisfy_invariants(self, tmp_path, rng):
        for trial in range(20):
            scene = random_scene(rng, n=7, degree=int(rng.integers(0, 4)))
            p = tmp_path / f"inv{trial}.ply"
            save_ply(scene, p)
            back = load_ply(p)
            assert np.all(np.abs(np.linalg.norm(back.rotations, axis=1) - 1) < 1e-6)
            assert np.all((back.opacities >= 0) & (back.opacities <= 1))
            cov = build_covariance(back.scales, back.rotations)
            np.testing.assert_allclose(cov, cov.transpose(0, 2, 1), atol=1e-12)
            assert np.all(np.linalg.eigvalsh(cov) > 0)
            assert np.all(back.centers >= back.bounds_min - 1e-12)
            assert np.all(back.centers <= back.bounds_max + 1e-12)


class TestConfig:
    def test_defaults(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{}")
        cfg = load_config(p)
        assert cfg.dt == 5e-5
        assert cfg.substeps_per_frame == 800
        assert cfg.grid_resolution == 64
        np.testing.assert_allclose(cfg.gravity, [0, -9.8, 0])

    def test_frame_count_16_accepted(self):
        cfg = config_from_dict({"frame_count": 16})
        assert cfg.frame_count == 16

    def test_poisson_half_rejected(self):
        with pytest.raises(RangeError):
            config_from_dict({"poisson": 0.5})

    def test_dt_nonpositive_rejected(self):
        with pytest.raises(RangeError):
            config_from_dict({"dt": 0.0})

    def test_unknown_key_rejected(self):
        with pytest.raises(SchemaError):
            config_from_dict({"dtt": 1e-4})

    def test_unknown_boundary_key_rejected(self):
        with pytest.raises(SchemaError):
            config_from_dict({"boundary": {"kind": "none", "height": 1}})

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(SchemaError):
            load_config(p)

    def test_roundtrip_dict(self):
        cfg = config_from_dict({
            "dt": 1e-4, "boundary": {"kind": "slip_ground", "ground_height": 0.5},
            "fixed_region": {"min": [0, 0, 0], "max": [1, 1, 1]},
            "initial_velocity": {"kind": "translate", "velocity": [1, 0, 0]},
            "image_size": [32, 48],
        })
        again = config_from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()
