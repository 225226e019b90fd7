"""Mesh and texture ingestion, procedural test assets, and tensor file formats.

All float payloads travel as ``.rt`` raw tensor files (magic ``MVTEX001``);
PNG is used only for 8-bit display artifacts. Procedural generators are
bit-deterministic: randomness comes from an integer hash, never from
ambient RNG state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MVTEX001"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_FOR_DTYPE = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


class MeshError(ValueError):
    """Malformed mesh data or unparseable OBJ content."""


class TensorFileError(ValueError):
    """Corrupt or mistyped raw tensor file."""


# ---------------------------------------------------------------------------
# Raw tensor files
# ---------------------------------------------------------------------------

def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    """Write a float32 or uint8 array as a raw tensor file (row-major, LE)."""
    arr = np.ascontiguousarray(tensor)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        arr = arr.astype("<f4", copy=False)
    elif arr.dtype == np.bool_:
        arr = arr.astype("u1")
    if arr.dtype not in _CODE_FOR_DTYPE:
        raise TensorFileError(f"unsupported dtype {arr.dtype}")
    if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise TensorFileError("refusing to write non-finite values")
    if arr.ndim > 255:
        raise TensorFileError("rank exceeds format limit")
    header = MAGIC + struct.pack(
        "<BB", _CODE_FOR_DTYPE[arr.dtype], arr.ndim
    ) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path: str | Path, dtype: np.dtype | None = None) -> np.ndarray:
    """Read a raw tensor file; optionally enforce an expected dtype."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 2 or blob[: len(MAGIC)] != MAGIC:
        raise TensorFileError(f"bad magic in {path}")
    code, rank = struct.unpack_from("<BB", blob, len(MAGIC))
    if code not in _DTYPE_CODES:
        raise TensorFileError(f"unknown dtype code {code}")
    offset = len(MAGIC) + 2
    if len(blob) < offset + 4 * rank:
        raise TensorFileError(f"truncated header in {path}")
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    dt = _DTYPE_CODES[code]
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = n * dt.itemsize
    if len(blob) - offset != expected:
        raise TensorFileError(
            f"payload size mismatch in {path}: have {len(blob) - offset}, want {expected}"
        )
    if dtype is not None and np.dtype(dtype) != dt:
        raise TensorFileError(f"dtype mismatch in {path}: file has {dt}, want {np.dtype(dtype)}")
    return np.frombuffer(blob, dtype=dt, count=n, offset=offset).reshape(shape).copy()


# ---------------------------------------------------------------------------
# PNG display artifacts
# ---------------------------------------------------------------------------

def write_png(path: str | Path, image: np.ndarray, gamma: bool = False) -> None:
    """Write an HxW or HxWx3 image as 8-bit PNG.

    Float input is clipped to [0, 1]; `gamma` applies the 2.2 display encode
    used for rendered (linear radiance) images.
    """
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(arr.astype(np.float64), 0.0, 1.0)
        if gamma:
            arr = arr ** (1.0 / 2.2)
        arr = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(Path(path))


def read_png(path: str | Path) -> np.ndarray:
    """Read a PNG into a float32 array in [0, 1] (no gamma decode)."""
    from PIL import Image

    arr = np.asarray(Image.open(Path(path)))
    return arr.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

@dataclass
class Mesh:
    """Indexed triangle mesh with per-vertex normals and a UV atlas."""

    vertices: np.ndarray   # (V, 3) float64, world units
    triangles: np.ndarray  # (F, 3) int32, CCW = front
    normals: np.ndarray    # (V, 3) float64, unit
    uvs: np.ndarray        # (V, 2) float64 in [0, 1]^2

    def validate(self) -> None:
        v, f = len(self.vertices), len(self.triangles)
        if f and (self.triangles.min() < 0 or self.triangles.max() >= v):
            raise MeshError("triangle index out of range")
        if len(self.normals) != v or len(self.uvs) != v:
            raise MeshError("attribute count does not match vertex count")
        if v:
            norms = np.linalg.norm(self.normals, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise MeshError("normals are not unit length")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def compute_vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted average of face normals, normalized per vertex."""
    normals = np.zeros_like(vertices)
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    face_n = np.cross(b - a, c - a)  # magnitude = 2 * area
    for k in range(3):
        np.add.at(normals, triangles[:, k], face_n)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    lengths[lengths == 0.0] = 1.0
    return normals / lengths


def load_obj(path: str | Path) -> Mesh:
    """Parse a Wavefront OBJ subset: v / vt / vn and f with v/vt[/vn] indices.

    UVs are mandatory (needed for baking). Missing normals are rebuilt from
    face geometry. Corners whose (v, vt, vn) triple differs are split into
    distinct vertices.
    """
    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    obj_normals: list[list[float]] = []
    corner_map: dict[tuple[int, int, int], int] = {}
    out_pos: list[list[float]] = []
    out_uv: list[list[float]] = []
    out_nrm: list[list[float]] = []
    tris: list[tuple[int, int, int]] = []
    has_normals = True

    def corner(token: str, line_no: int) -> int:
        nonlocal has_normals
        parts = token.split("/")
        if len(parts) < 2 or parts[1] == "":
            raise MeshError(f"line {line_no}: face corner '{token}' has no UV index")
        try:
            vi = int(parts[0])
            ti = int(parts[1])
            ni = int(parts[2]) if len(parts) > 2 and parts[2] != "" else 0
        except ValueError as exc:
            raise MeshError(f"line {line_no}: bad face corner '{token}'") from exc
        if vi <= 0 or ti <= 0 or ni < 0:
            raise MeshError(f"line {line_no}: OBJ indices are 1-based, got '{token}'")
        if vi > len(positions) or ti > len(texcoords) or ni > len(obj_normals):
            raise MeshError(f"line {line_no}: index out of range in '{token}'")
        if ni == 0:
            has_normals = False
        key = (vi, ti, ni)
        if key not in corner_map:
            corner_map[key] = len(out_pos)
            out_pos.append(positions[vi - 1])
            out_uv.append(texcoords[ti - 1])
            out_nrm.append(obj_normals[ni - 1] if ni else [0.0, 0.0, 0.0])
        return corner_map[key]

    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            tag = fields[0]
            try:
                if tag == "v":
                    positions.append([float(x) for x in fields[1:4]])
                elif tag == "vt":
                    texcoords.append([float(x) for x in fields[1:3]])
                elif tag == "vn":
                    obj_normals.append([float(x) for x in fields[1:4]])
                elif tag == "f":
                    if len(fields) < 4:
                        raise MeshError(f"line {line_no}: face with fewer than 3 corners")
                    ids = [corner(tok, line_no) for tok in fields[1:]]
                    for k in range(1, len(ids) - 1):
                        tris.append((ids[0], ids[k], ids[k + 1]))
            except MeshError:
                raise
            except (ValueError, IndexError) as exc:
                raise MeshError(f"line {line_no}: malformed '{line}'") from exc

    if not tris:
        raise MeshError(f"{path}: no faces found")
    vertices = np.asarray(out_pos, dtype=np.float64)
    triangles = np.asarray(tris, dtype=np.int32)
    uvs = np.asarray(out_uv, dtype=np.float64)
    if has_normals:
        normals = np.asarray(out_nrm, dtype=np.float64)
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        lengths[lengths == 0.0] = 1.0
        normals = normals / lengths
    else:
        normals = compute_vertex_normals(vertices, triangles)
    mesh = Mesh(vertices, triangles, normals, uvs)
    mesh.validate()
    return mesh


def save_obj(path: str | Path, mesh: Mesh) -> None:
    """Write a Mesh as OBJ with aligned v/vt/vn indices."""
    lines: list[str] = []
    for p in mesh.vertices:
        lines.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
    for t in mesh.uvs:
        lines.append(f"vt {t[0]:.9g} {t[1]:.9g}")
    for n in mesh.normals:
        lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    for tri in mesh.triangles:
        a, b, c = (int(i) + 1 for i in tri)
        lines.append(f"f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Procedural primitives
# ---------------------------------------------------------------------------

def gen_primitive(kind: str, **params) -> Mesh:
    """Build a watertight test mesh with a bijective UV atlas.

    Kinds: ``sphere(radius, seg_u, seg_v)``, ``cube(edge, seg)``,
    ``torus(radius_major, radius_minor, seg_u, seg_v)``.
    """
    if kind == "sphere":
        return _gen_sphere(
            params.get("radius", 1.0), params.get("seg_u", 32), params.get("seg_v", 16)
        )
    if kind == "cube":
        return _gen_cube(params.get("edge", 2.0), params.get("seg", 1))
    if kind == "torus":
        return _gen_torus(
            params.get("radius_major", 2.0),
            params.get("radius_minor", 0.5),
            params.get("seg_u", 32),
            params.get("seg_v", 16),
        )
    raise MeshError(f"unknown primitive kind '{kind}'")


def _gen_sphere(radius: float, seg_u: int, seg_v: int) -> Mesh:
    if seg_u < 3 or seg_v < 3 or radius <= 0:
        raise MeshError("sphere needs seg_u, seg_v >= 3 and radius > 0")
    # Equirectangular atlas: u = azimuth, v = polar angle. The seam and the
    # poles duplicate positions so every vertex carries a single UV.
    us = np.arange(seg_u + 1) / seg_u
    vs = np.arange(seg_v + 1) / seg_v
    uu, vv = np.meshgrid(us, vs, indexing="xy")
    phi = 2.0 * np.pi * uu
    theta = np.pi * vv
    x = radius * np.sin(theta) * np.cos(phi)
    y = radius * np.sin(theta) * np.sin(phi)
    z = radius * np.cos(theta)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    uvs = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    normals = verts / radius
    tris = []
    cols = seg_u + 1
    for r in range(seg_v):
        for c in range(seg_u):
            i00 = r * cols + c
            i01 = i00 + 1
            i10 = i00 + cols
            i11 = i10 + 1
            if r > 0:  # skip degenerate north-pole slivers
                tris.append((i00, i10, i01))
            if r < seg_v - 1:
                tris.append((i01, i10, i11))
    mesh = Mesh(verts, np.asarray(tris, dtype=np.int32), normals, uvs)
    mesh.validate()
    return mesh


_CUBE_FACES = (
    # (axis normal, uv cell column, uv cell row)
    ((1, 0, 0), 0, 0),
    ((-1, 0, 0), 1, 0),
    ((0, 1, 0), 2, 0),
    ((0, -1, 0), 0, 1),
    ((0, 0, 1), 1, 1),
    ((0, 0, -1), 2, 1),
)


def _gen_cube(edge: float, seg: int) -> Mesh:
    if edge <= 0 or seg < 1:
        raise MeshError("cube needs edge > 0 and seg >= 1")
    h = edge / 2.0
    verts, normals, uvs, tris = [], [], [], []
    # 3x2 per-face atlas with a small gutter so face borders never share texels.
    gutter = 0.02
    for normal, cell_c, cell_r in _CUBE_FACES:
        n = np.asarray(normal, dtype=np.float64)
        axis = int(np.argmax(np.abs(n)))
        t_axis = (axis + 1) % 3
        b_axis = (axis + 2) % 3
        base = len(verts)
        for r in range(seg + 1):
            for c in range(seg + 1):
                p = np.zeros(3)
                p[axis] = h * n[axis]
                p[t_axis] = -h + edge * c / seg
                p[b_axis] = -h + edge * r / seg
                verts.append(p)
                normals.append(n)
                u0 = (cell_c + gutter) / 3.0
                v0 = (cell_r + gutter) / 2.0
                du = (1.0 - 2.0 * gutter) / 3.0
                dv = (1.0 - 2.0 * gutter) / 2.0
                uvs.append((u0 + du * c / seg, v0 + dv * r / seg))
        for r in range(seg):
            for c in range(seg):
                i00 = base + r * (seg + 1) + c
                i01 = i00 + 1
                i10 = i00 + seg + 1
                i11 = i10 + 1
                if n[axis] * (1 if (t_axis + 1) % 3 == b_axis else -1) > 0:
                    tris.append((i00, i01, i10))
                    tris.append((i01, i11, i10))
                else:
                    tris.append((i00, i10, i01))
                    tris.append((i01, i10, i11))
    mesh = Mesh(
        np.asarray(verts), np.asarray(tris, dtype=np.int32),
        np.asarray(normals, dtype=np.float64), np.asarray(uvs, dtype=np.float64),
    )
    _orient_outward(mesh)
    mesh.validate()
    return mesh


def _gen_torus(radius_major: float, radius_minor: float, seg_u: int, seg_v: int) -> Mesh:
    if seg_u < 3 or seg_v < 3 or radius_major <= radius_minor or radius_minor <= 0:
        raise MeshError("torus needs seg >= 3 and 0 < radius_minor < radius_major")
    us = np.arange(seg_u + 1) / seg_u
    vs = np.arange(seg_v + 1) / seg_v
    uu, vv = np.meshgrid(us, vs, indexing="xy")
    phi = 2.0 * np.pi * uu    # around the z axis
    psi = 2.0 * np.pi * vv    # around the tube
    ring = radius_major + radius_minor * np.cos(psi)
    x = ring * np.cos(phi)
    y = ring * np.sin(phi)
    z = radius_minor * np.sin(psi)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    center = np.stack(
        [radius_major * np.cos(phi), radius_major * np.sin(phi), np.zeros_like(phi)], axis=-1
    ).reshape(-1, 3)
    normals = verts - center
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    uvs = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    tris = []
    cols = seg_u + 1
    for r in range(seg_v):
        for c in range(seg_u):
            i00 = r * cols + c
            i01 = i00 + 1
            i10 = i00 + cols
            i11 = i10 + 1
            tris.append((i00, i01, i10))
            tris.append((i01, i11, i10))
    mesh = Mesh(verts, np.asarray(tris, dtype=np.int32), normals, uvs)
    _orient_outward(mesh)
    mesh.validate()
    return mesh


def _orient_outward(mesh: Mesh) -> None:
    """Flip triangles whose geometric normal opposes the vertex normals."""
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    face_n = np.cross(b - a, c - a)
    vert_n = (
        mesh.normals[mesh.triangles[:, 0]]
        + mesh.normals[mesh.triangles[:, 1]]
        + mesh.normals[mesh.triangles[:, 2]]
    )
    flip = np.einsum("ij,ij->i", face_n, vert_n) < 0.0
    mesh.triangles[flip] = mesh.triangles[flip][:, [0, 2, 1]]


# ---------------------------------------------------------------------------
# PBR textures
# ---------------------------------------------------------------------------

#: channel order of the 8-plane PBR stack
PBR_CHANNELS = (
    "albedo_r", "albedo_g", "albedo_b", "roughness", "metallic",
    "bump_x", "bump_y", "bump_z",
)


@dataclass
class PBRTexture:
    """8-channel material stack; bump normals stored as (n + 1) / 2."""

    resolution: int
    channels: np.ndarray                 # (8, R, R) float32 in [0, 1]
    validity: np.ndarray = field(default=None)  # (R, R) bool

    def __post_init__(self):
        if self.validity is None:
            self.validity = np.ones((self.resolution, self.resolution), dtype=bool)

    @property
    def albedo(self) -> np.ndarray:
        return self.channels[0:3]

    @property
    def roughness(self) -> np.ndarray:
        return self.channels[3]

    @property
    def metallic(self) -> np.ndarray:
        return self.channels[4]

    def decode_bump(self) -> np.ndarray:
        """Tangent-space unit normals, (R, R, 3)."""
        b = self.channels[5:8].transpose(1, 2, 0).astype(np.float64) * 2.0 - 1.0
        lengths = np.linalg.norm(b, axis=-1, keepdims=True)
        lengths[lengths == 0.0] = 1.0
        return b / lengths

    def validate(self) -> None:
        if self.channels.shape != (8, self.resolution, self.resolution):
            raise ValueError("channel stack shape mismatch")
        valid = self.validity
        ch = self.channels[:, valid]
        if ch.size and (ch.min() < -1e-6 or ch.max() > 1.0 + 1e-6):
            raise ValueError("PBR channel out of [0, 1] on valid texels")
        b = self.decode_bump()[valid]
        if b.size and not np.allclose(np.linalg.norm(b, axis=-1), 1.0, atol=1e-3):
            raise ValueError("decoded bump not unit length")


def hash_u64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over uint64 lattices; platform independent."""
    x = x.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        x += np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int, salt: int) -> np.ndarray:
    """Uniform [0,1) from integer lattice coordinates."""
    with np.errstate(over="ignore"):
        key = (
            ix.astype(np.uint64) * np.uint64(0x9E3779B1)
            + iy.astype(np.uint64) * np.uint64(0x85EBCA77)
            + np.uint64(seed) * np.uint64(0xC2B2AE3D)
            + np.uint64(salt) * np.uint64(0x27D4EB2F)
        )
    return (hash_u64(key) >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(resolution: int, seed: int, salt: int, cells: int, octaves: int = 3) -> np.ndarray:
    """Multi-octave lattice value noise in [0, 1], smoothstep interpolated."""
    coords = (np.arange(resolution) + 0.5) / resolution
    px, py = np.meshgrid(coords, coords, indexing="xy")
    total = np.zeros((resolution, resolution))
    amp, amp_sum = 1.0, 0.0
    for octave in range(octaves):
        freq = cells * (1 << octave)
        gx = px * freq
        gy = py * freq
        ix = np.floor(gx).astype(np.int64)
        iy = np.floor(gy).astype(np.int64)
        fx = gx - ix
        fy = gy - iy
        sx = fx * fx * (3.0 - 2.0 * fx)
        sy = fy * fy * (3.0 - 2.0 * fy)
        # wrap the lattice so the texture tiles
        x0, x1 = ix % freq, (ix + 1) % freq
        y0, y1 = iy % freq, (iy + 1) % freq
        v00 = _hash01(x0, y0, seed, salt * 8 + octave)
        v10 = _hash01(x1, y0, seed, salt * 8 + octave)
        v01 = _hash01(x0, y1, seed, salt * 8 + octave)
        v11 = _hash01(x1, y1, seed, salt * 8 + octave)
        top = v00 + sx * (v10 - v00)
        bot = v01 + sx * (v11 - v01)
        total += amp * (top + sy * (bot - top))
        amp_sum += amp
        amp *= 0.5
    return total / amp_sum


def _flat_bump(resolution: int) -> np.ndarray:
    bump = np.zeros((3, resolution, resolution))
    bump[0] = 0.5
    bump[1] = 0.5
    bump[2] = 1.0
    return bump


def _bump_from_height(height: np.ndarray, strength: float) -> np.ndarray:
    """Tangent normals from a height field's finite differences, stored (n+1)/2."""
    gx = np.gradient(height, axis=1) * strength
    gy = np.gradient(height, axis=0) * strength
    n = np.stack([-gx, -gy, np.ones_like(height)], axis=0)
    n /= np.linalg.norm(n, axis=0, keepdims=True)
    return (n + 1.0) / 2.0


_RECIPES = ("checker", "radial", "noise")


def gen_procedural_pbr(
    resolution: int,
    recipe: str = "checker",
    seed: int = 0,
    material_a: tuple | None = None,
    material_b: tuple | None = None,
    cells: int = 8,
) -> PBRTexture:
    """Deterministic ground-truth material stack for round-trip tests.

    Recipes: ``checker`` alternates two (albedo, roughness, metallic) tuples;
    ``radial`` blends them by distance from the texture center; ``noise``
    drives all channels from seeded lattice value noise.
    """
    if resolution < 2 or resolution & (resolution - 1):
        raise ValueError("resolution must be a power of two >= 2")
    if recipe not in _RECIPES:
        raise ValueError(f"unknown recipe '{recipe}' (have {_RECIPES})")
    if material_a is None:
        material_a = ((0.8, 0.25, 0.2), 0.3, 0.0)
    if material_b is None:
        material_b = ((0.15, 0.4, 0.85), 0.8, 1.0)

    def stack_for(weight: np.ndarray) -> np.ndarray:
        ch = np.empty((8, resolution, resolution))
        (alb_a, rough_a, met_a), (alb_b, rough_b, met_b) = material_a, material_b
        for i in range(3):
            ch[i] = alb_a[i] + weight * (alb_b[i] - alb_a[i])
        ch[3] = rough_a + weight * (rough_b - rough_a)
        ch[4] = met_a + weight * (met_b - met_a)
        ch[5:8] = _flat_bump(resolution)
        return ch

    if recipe == "checker":
        idx = np.arange(resolution) * cells // resolution
        cx, cy = np.meshgrid(idx, idx, indexing="xy")
        weight = ((cx + cy) % 2).astype(np.float64)
        channels = stack_for(weight)
    elif recipe == "radial":
        coords = (np.arange(resolution) + 0.5) / resolution - 0.5
        px, py = np.meshgrid(coords, coords, indexing="xy")
        weight = np.clip(np.sqrt(px * px + py * py) / 0.5, 0.0, 1.0)
        channels = stack_for(weight)
    else:  # noise
        channels = np.empty((8, resolution, resolution))
        for i in range(3):
            channels[i] = _value_noise(resolution, seed, salt=i, cells=cells)
        channels[3] = 0.1 + 0.85 * _value_noise(resolution, seed, salt=3, cells=cells)
        channels[4] = (_value_noise(resolution, seed, salt=4, cells=max(2, cells // 2)) > 0.6)
        height = _value_noise(resolution, seed, salt=5, cells=cells * 2)
        channels[5:8] = _bump_from_height(height, strength=8.0)

    tex = PBRTexture(resolution, np.clip(channels, 0.0, 1.0).astype(np.float32))
    tex.validate()
    return tex


def sample_texture(texture: PBRTexture, uv: np.ndarray) -> np.ndarray:
    """Bilinear sample of the 8-channel stack at UV points (..., 2) -> (..., 8)."""
    res = texture.resolution
    u = np.clip(uv[..., 0], 0.0, 1.0) * res - 0.5
    v = np.clip(uv[..., 1], 0.0, 1.0) * res - 0.5
    x0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, res - 2)
    fx = np.clip(u - x0, 0.0, 1.0)[..., None]
    fy = np.clip(v - y0, 0.0, 1.0)[..., None]
    ch = texture.channels.transpose(1, 2, 0)  # (R, R, 8), row = v
    top = ch[y0, x0] * (1 - fx) + ch[y0, x0 + 1] * fx
    bot = ch[y0 + 1, x0] * (1 - fx) + ch[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy
