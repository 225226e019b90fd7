import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvtex import meshio

# hand-written unit cube, 24 corner entries, 12 triangles
CUBE_OBJ = """
v -1 -1 -1
v 1 -1 -1
v 1 1 -1
v -1 1 -1
v -1 -1 1
v 1 -1 1
v 1 1 1
v -1 1 1
vt 0 0
vt 1 0
vt 1 1
vt 0 1
vn 0 0 -1
vn 0 0 1
f 1/1/1 3/3/1 2/2/1
f 1/1/1 4/4/1 3/3/1
f 5/1/2 6/2/2 7/3/2
f 5/1/2 7/3/2 8/4/2
"""


def test_load_obj_single_triangle(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\n"
                    "vn 0 0 1\nvn 0 0 1\nvn 0 0 1\nf 1/1/1 2/2/2 3/3/3\n")
    mesh = meshio.load_obj(path)
    assert len(mesh.triangles) == 1
    assert np.allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-6)


def test_load_obj_zero_index_rejected(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 0/1 1/1 2/1\n")
    with pytest.raises(meshio.MeshError, match="1-based"):
        meshio.load_obj(path)


def test_load_obj_requires_uvs(tmp_path):
    path = tmp_path / "nouv.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(meshio.MeshError, match="UV"):
        meshio.load_obj(path)


def test_load_obj_cube_vertices_match_file(tmp_path):
    path = tmp_path / "cube.obj"
    path.write_text(CUBE_OBJ)
    mesh = meshio.load_obj(path)
    # second, independent read of the vertex lines; corner splitting may
    # reorder, so match each parsed vertex against the raw set
    raw = np.array([
        [float(x) for x in line.split()[1:4]]
        for line in CUBE_OBJ.strip().splitlines() if line.startswith("v ")
    ])
    dists = np.abs(mesh.vertices[:, None, :] - raw[None, :, :]).sum(axis=2)
    assert (dists.min(axis=1) < 1e-7).all()


def test_load_obj_missing_normals_rebuilt(tmp_path):
    path = tmp_path / "nonorm.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\n"
                    "f 1/1 2/2 3/3\n")
    mesh = meshio.load_obj(path)
    assert np.allclose(mesh.normals, [0, 0, 1])


def test_obj_text_round_trip(tmp_path):
    mesh = meshio.gen_primitive("torus", radius_major=1.5, radius_minor=0.4,
                                seg_u=8, seg_v=6)
    path = tmp_path / "t.obj"
    meshio.save_obj(path, mesh)
    again = meshio.load_obj(path)
    # corner splitting may renumber vertices; triangle order is preserved
    assert np.allclose(again.vertices[again.triangles],
                       mesh.vertices[mesh.triangles], atol=1e-6)
    assert np.allclose(again.uvs[again.triangles], mesh.uvs[mesh.triangles],
                       atol=1e-6)


def test_sphere_vertices_on_radius():
    mesh = meshio.gen_primitive("sphere", radius=1.0, seg_u=32, seg_v=16)
    assert np.allclose(np.linalg.norm(mesh.vertices, axis=1), 1.0, atol=1e-6)
    mesh.validate()


def test_cube_corner_positions():
    mesh = meshio.gen_primitive("cube", edge=2.0)
    corners = {tuple(np.sign(v).astype(int)) for v in mesh.vertices}
    assert len(corners) >= 8
    assert np.allclose(np.abs(mesh.vertices).max(axis=1), 1.0)


def test_torus_axis_distance_bounds():
    mesh = meshio.gen_primitive("torus", radius_major=2.0, radius_minor=0.5,
                                seg_u=32, seg_v=16)
    rho = np.linalg.norm(mesh.vertices[:, :2], axis=1)
    # analytic parametric bounds: R -+ r
    assert abs(rho.min() - 1.5) < 1e-6
    assert abs(rho.max() - 2.5) < 1e-6


def test_primitive_bad_params():
    with pytest.raises(meshio.MeshError):
        meshio.gen_primitive("sphere", seg_u=2)
    with pytest.raises(meshio.MeshError):
        meshio.gen_primitive("pyramid")


def test_checker_metallic_binary():
    tex = meshio.gen_procedural_pbr(64, "checker",
                                    material_a=((1, 0, 0), 0.5, 0.0),
                                    material_b=((0, 0, 1), 0.5, 1.0))
    assert set(np.unique(tex.metallic)) == {0.0, 1.0}


def test_procedural_determinism():
    a = meshio.gen_procedural_pbr(64, "noise", seed=7)
    b = meshio.gen_procedural_pbr(64, "noise", seed=7)
    assert np.array_equal(a.channels, b.channels)


def test_noise_albedo_mean_fixture():
    # value recorded once from the fixed integer hash; the range is the
    # sanity envelope, the exact value pins the hash across platforms
    tex = meshio.gen_procedural_pbr(64, "noise", seed=7)
    mean_r = float(tex.channels[0].mean())
    assert 0.3 <= mean_r <= 0.7
    assert abs(mean_r - 0.5021412968635559) < 1e-6


def test_unknown_recipe():
    with pytest.raises(ValueError, match="recipe"):
        meshio.gen_procedural_pbr(32, "plaid")


def test_resolution_power_of_two():
    with pytest.raises(ValueError):
        meshio.gen_procedural_pbr(48, "checker")


@settings(max_examples=25, deadline=None)
@given(recipe=st.sampled_from(["checker", "radial", "noise"]),
       seed=st.integers(0, 2 ** 32 - 1),
       res_pow=st.integers(2, 6))
def test_pbr_channels_in_range(recipe, seed, res_pow):
    tex = meshio.gen_procedural_pbr(1 << res_pow, recipe, seed=seed)
    tex.validate()
    assert tex.channels.min() >= 0.0 and tex.channels.max() <= 1.0
    bump = tex.decode_bump()
    assert np.allclose(np.linalg.norm(bump, axis=-1), 1.0, atol=1e-3)


def test_tensor_round_trip(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "a.rt"
    meshio.write_tensor(path, arr)
    back = meshio.read_tensor(path)
    assert np.array_equal(back, arr) and back.dtype == np.float32


def test_tensor_bad_magic(tmp_path):
    path = tmp_path / "bad.rt"
    path.write_bytes(b"XXXX4567" + b"\x00" * 16)
    with pytest.raises(meshio.TensorFileError, match="magic"):
        meshio.read_tensor(path)


def test_tensor_truncated(tmp_path):
    arr = np.ones((4, 4), dtype=np.float32)
    path = tmp_path / "t.rt"
    meshio.write_tensor(path, arr)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(meshio.TensorFileError, match="size"):
        meshio.read_tensor(path)


def test_tensor_dtype_mismatch(tmp_path):
    path = tmp_path / "u.rt"
    meshio.write_tensor(path, np.ones((2, 2), dtype=np.uint8))
    with pytest.raises(meshio.TensorFileError, match="dtype"):
        meshio.read_tensor(path, dtype=np.float32)


def test_tensor_empty_shape_valid(tmp_path):
    path = tmp_path / "e.rt"
    meshio.write_tensor(path, np.zeros((0,), dtype=np.float32))
    back = meshio.read_tensor(path)
    assert back.shape == (0,)


def test_tensor_rejects_nonfinite(tmp_path):
    with pytest.raises(meshio.TensorFileError):
        meshio.write_tensor(tmp_path / "n.rt", np.array([np.nan], dtype=np.float32))


@settings(max_examples=30, deadline=None)
@given(
    shape=st.lists(st.integers(0, 5), min_size=1, max_size=4),
    u8=st.booleans(),
    seed=st.integers(0, 2 ** 31),
)
def test_tensor_round_trip_property(shape, u8, seed):
    import tempfile

    rng = np.random.default_rng(seed)
    if u8:
        arr = rng.integers(0, 255, size=shape).astype(np.uint8)
    else:
        arr = rng.standard_normal(shape).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/p.rt"
        meshio.write_tensor(path, arr)
        back = meshio.read_tensor(path)
    assert back.dtype == arr.dtype and np.array_equal(back, arr)
