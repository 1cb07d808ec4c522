from __future__ import annotations

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from rtpos.scene import (Building, Material, PerturbationSpec, RruConfig, SceneError, SceneModel, UeTrajectory,
                         fixture_path, load_fixture, load_scene, parse_scene, perturb_scene, save_scene,
                         scenario_to_doc)

MINIMAL = """
name: minimal
materials:
  - {id: 0, n: 2.4}
  - {id: 1, n: 2.2}
ground: {extent: [-50, -50, 50, 50], material: 1}
buildings:
  - {footprint: [[0, 10], [10, 10], [10, 20], [0, 20]], height: 15, material: 0}
rrus:
  - {id: 0, position: [-20, 0, 12], azimuth_deg: 90, tilt_deg: 10}
ue_tracks:
  - points:
      - {tti: 0, xyz: [0, 0]}
      - {tti: 1, xyz: [1, 0]}
"""


@pytest.fixture
def minimal_doc():
    return yaml.safe_load(MINIMAL)


def write(tmp_path, doc, name="scene.yaml"):
    p = tmp_path / name
    p.write_text(doc if isinstance(doc, str) else yaml.safe_dump(doc))
    return p


# --------------------------------------------------------------------------
# types


@pytest.mark.parametrize("kw", [dict(refractive_index=0.9), dict(scattering_amplitude=-0.1),
                                dict(scattering_exponent=0.0)])
def test_material_invariants(kw):
    with pytest.raises(SceneError):
        Material(0, **kw)


def test_material_defaults_concrete():
    m = Material(0)
    assert (m.refractive_index, m.scattering_amplitude, m.scattering_exponent) == (2.4, 0.4, 4.0)


def test_box_building_has_twelve_triangles():
    tris, faces = Building.box(0, 0, 10, 5, 8).triangles()
    assert tris.shape == (12, 3, 3)
    assert len(set(faces)) == 6  # four walls, roof, floor


def test_building_clockwise_footprint_reoriented():
    b = Building(np.array([[0, 0], [0, 5], [5, 5], [5, 0]]), 3.0, 0)
    tris, _ = b.triangles()
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    centre = b.centroid
    outward = np.einsum("ij,ij->i", n, tris.mean(axis=1) - centre)
    assert np.all(outward > 0)


def test_building_rejects_concave_footprint():
    with pytest.raises(SceneError, match="convex"):
        Building(np.array([[0, 0], [10, 0], [5, 2], [10, 10], [0, 10]]), 5.0, 0)


@pytest.mark.parametrize("kw", [dict(rows=0), dict(cols=0), dict(tilt=np.pi / 2), dict(tilt=-0.1),
                                dict(spacing_h=0.0), dict(spacing_v=-1.0)])
def test_rru_invariants(kw):
    with pytest.raises(SceneError):
        RruConfig(0, (0, 0, 10), 0.0, **kw)


def test_rru_defaults():
    r = RruConfig(0, (0, 0, 20), 0.0)
    assert (r.rows, r.cols, r.n_elements) == (4, 8, 32)
    assert r.tilt == pytest.approx(np.deg2rad(10))
    assert r.spacings(0.1) == (0.05, 0.05)


@given(st.floats(-np.pi + 1e-9, np.pi))
def test_rru_facing_roundtrip(az):
    r = RruConfig.facing(0, (0, 0, 10), az)
    assert np.isclose(np.angle(np.exp(1j * (r.boresight_azimuth - az))), 0.0, atol=1e-12)


def test_track_requires_increasing_tti():
    with pytest.raises(SceneError, match="strictly increasing"):
        UeTrajectory([0, 2, 2], np.zeros((3, 3)))


def test_scene_model_missing_material_named():
    with pytest.raises(SceneError, match="material id 7"):
        SceneModel({0: Material(0)}, [Building.box(0, 0, 1, 1, 1, 7)], (-5, -5, 5, 5), 0)


def test_scene_model_ground_at_zero(flat_scene):
    assert flat_scene.n_triangles == 2
    np.testing.assert_array_equal(flat_scene.vertices[:, :, 2], 0.0)


def test_perturbation_spec_invariants():
    with pytest.raises(ValueError):
        PerturbationSpec(wall_position_sigma=-1)
    with pytest.raises(ValueError):
        PerturbationSpec(transmission_scale_low=2.0, transmission_scale_high=1.0)
    with pytest.raises(ValueError):
        PerturbationSpec(transmission_scale_low=0.0)


# --------------------------------------------------------------------------
# loading


def test_minimal_file_loads(tmp_path):
    sc = load_scene(write(tmp_path, MINIMAL))
    assert sc.scene.n_triangles == 2 + 12
    assert len(sc.rrus) == 1 and len(sc.tracks) == 1
    # xy-only track points take the scene UE height
    np.testing.assert_allclose(sc.tracks[0].positions[:, 2], 1.5)
    assert sc.rrus[0].boresight_azimuth == pytest.approx(np.pi / 2)


def test_missing_material_error_names_id(tmp_path, minimal_doc):
    minimal_doc["buildings"][0]["material"] = 42
    with pytest.raises(SceneError, match="42"):
        load_scene(write(tmp_path, minimal_doc))


def test_parse_error_reports_line(tmp_path):
    with pytest.raises(SceneError, match=r"line \d+"):
        load_scene(write(tmp_path, "materials:\n  - {id: 0\n  bad"))


def test_schema_error_reports_field(tmp_path, minimal_doc):
    minimal_doc["rrus"][0]["rows"] = "four"
    with pytest.raises(SceneError, match=r"rrus\[0\]\.rows"):
        load_scene(write(tmp_path, minimal_doc))


def test_invariant_violation_named(tmp_path, minimal_doc):
    minimal_doc["rrus"][0]["tilt_deg"] = 95
    with pytest.raises(SceneError, match="tilt"):
        load_scene(write(tmp_path, minimal_doc))


def test_track_outside_bounds_rejected(minimal_doc):
    minimal_doc["ue_tracks"][0]["points"][1]["xyz"] = [500, 0]
    with pytest.raises(SceneError, match="outside the scene bounds"):
        parse_scene(minimal_doc)


def test_missing_file(tmp_path):
    with pytest.raises(SceneError):
        load_scene(tmp_path / "nope.yaml")


def test_canyon_fixture_triangle_count(canyon):
    header = fixture_path("canyon").read_text().splitlines()
    documented = next(int(line.split(":")[1].split()[0]) for line in header if line.startswith("# Triangles:"))
    assert canyon.scene.n_triangles == documented == 26
    assert len(canyon.rrus) == 3 and len(canyon.tracks[0]) == 101


@pytest.mark.parametrize("name", ["two_ray_flat", "mirror_wall", "canyon", "block"])
def test_fixtures_load_and_roundtrip(tmp_path, name):
    sc = load_fixture(name)
    save_scene(sc, tmp_path / "out.yaml")
    again = load_scene(tmp_path / "out.yaml")
    np.testing.assert_array_equal(again.scene.vertices, sc.scene.vertices)
    assert scenario_to_doc(again) == scenario_to_doc(sc)


def test_load_is_deterministic():
    a, b = load_fixture("block"), load_fixture("block")
    np.testing.assert_array_equal(a.scene.vertices, b.scene.vertices)
    np.testing.assert_array_equal(a.scene.bvh.order, b.scene.bvh.order)


# --------------------------------------------------------------------------
# perturbation


def test_identity_perturbation_is_noop(canyon):
    out = perturb_scene(canyon.scene, PerturbationSpec(rng_seed=99))
    np.testing.assert_array_equal(out.vertices, canyon.scene.vertices)
    assert out.materials == canyon.scene.materials


def test_perturbation_deterministic_under_seed(block):
    spec = PerturbationSpec(wall_position_sigma=1.0, rng_seed=5)
    d1 = [np.linalg.norm(b.centroid - a.centroid) for a, b in
          zip(block.scene.buildings, perturb_scene(block.scene, spec).buildings)]
    d2 = [np.linalg.norm(b.centroid - a.centroid) for a, b in
          zip(block.scene.buildings, perturb_scene(block.scene, spec).buildings)]
    assert d1 == d2 and max(d1) > 0


def test_perturbation_leaves_input_untouched(canyon):
    before = canyon.scene.vertices.copy()
    perturb_scene(canyon.scene, PerturbationSpec(2.0, 0.5, 2.0, rng_seed=1))
    np.testing.assert_array_equal(canyon.scene.vertices, before)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 3.0))
def test_perturbation_preserves_topology_and_scale_bounds(seed, sigma):
    sc = load_fixture("canyon").scene
    out = perturb_scene(sc, PerturbationSpec(sigma, 0.5, 2.0, rng_seed=seed))
    assert out.n_triangles == sc.n_triangles
    np.testing.assert_array_equal(out.face_ids, sc.face_ids)
    np.testing.assert_array_equal(out.material_ids, sc.material_ids)
    for mid, m in sc.materials.items():
        p = out.materials[mid]
        assert 0.5 * m.scattering_amplitude - 1e-12 <= p.scattering_amplitude <= 2.0 * m.scattering_amplitude + 1e-12
        assert max(1.0, 0.5 * m.refractive_index) - 1e-12 <= p.refractive_index <= 2.0 * m.refractive_index + 1e-12
    # buildings move rigidly and horizontally
    for a, b in zip(sc.buildings, out.buildings):
        shift = b.footprint - a.footprint
        np.testing.assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), atol=1e-9)
        assert (a.height, a.base) == (b.height, b.base)
