"""Tetrahedral meshes: MSH 2.2 ASCII reader/writer and structured box generator."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyMeshError, GeometryError, MeshParseError

MSH_TRIANGLE = 2
MSH_TET = 4

# faces of a tet opposite to vertex 3, 2, 1, 0
TET_FACES = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])


def signed_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p0 = nodes[tets[:, 0]]
    jac = np.stack([nodes[tets[:, k]] - p0 for k in (1, 2, 3)], axis=-1)
    return np.linalg.det(jac) / 6.0


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TetMesh:
    """Immutable linear tetrahedral mesh.

    Attributes
    ----------
    nodes : (n, 3) float array, coordinates in meters
    tets : (ne, 4) int array, positively oriented
    region_id : (ne,) int array, material region tag per tet
    boundary_sets : mapping name -> sorted array of node indices
    """

    nodes: np.ndarray
    tets: np.ndarray
    region_id: np.ndarray
    boundary_sets: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 3)
        tets = np.asarray(self.tets, dtype=np.int64).reshape(-1, 4)
        region = np.asarray(self.region_id, dtype=np.int64).reshape(-1)
        if len(tets) == 0:
            raise EmptyMeshError("mesh has no tetrahedra")
        if region.shape[0] != tets.shape[0]:
            raise ValueError("region_id must have one entry per tet")
        n = nodes.shape[0]
        if tets.min() < 0 or tets.max() >= n:
            raise GeometryError("tet node index out of range")

        vol = signed_volumes(nodes, tets)
        edges = nodes[tets[:, [1, 2, 3, 1, 2, 3]]] - nodes[tets[:, [0, 0, 0, 2, 3, 3]]]
        scale = np.max(np.linalg.norm(edges, axis=-1), axis=1) ** 3
        degenerate = np.abs(vol) <= 1e-14 * scale
        if np.any(degenerate):
            raise GeometryError(f"degenerate tet {int(np.argmax(degenerate))} (zero volume)")
        flip = vol < 0
        if np.any(flip):
            tets = tets.copy()
            tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()

        bsets: dict[str, np.ndarray] = {}
        seen = np.zeros(n, dtype=bool)
        for name, idx in self.boundary_sets.items():
            idx = np.unique(np.asarray(idx, dtype=np.int64))
            if idx.size and (idx[0] < 0 or idx[-1] >= n):
                raise GeometryError(f"boundary set {name!r} has node index out of range")
            if np.any(seen[idx]):
                raise GeometryError(f"boundary set {name!r} overlaps another boundary set")
            seen[idx] = True
            bsets[str(name)] = _freeze(idx)

        object.__setattr__(self, "nodes", _freeze(nodes))
        object.__setattr__(self, "tets", _freeze(tets))
        object.__setattr__(self, "region_id", _freeze(region))
        object.__setattr__(self, "boundary_sets", bsets)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    def volumes(self) -> np.ndarray:
        return signed_volumes(self.nodes, self.tets)

    def extent(self) -> float:
        return float(np.max(np.ptp(self.nodes, axis=0)))

    def boundary_faces(self) -> np.ndarray:
        """Triangles (sorted node triples) that belong to exactly one tet."""
        faces = np.sort(self.tets[:, TET_FACES].reshape(-1, 3), axis=1)
        uniq, counts = np.unique(faces, axis=0, return_counts=True)
        return uniq[counts == 1]


def generate_box_mesh(nx: int, ny: int, nz: int, lx: float = 1.0, ly: float = 1.0,
                      lz: float = 1.0, layer_splits=(), regions=None) -> TetMesh:
    """Structured box mesh with each hexahedral cell split into 6 Kuhn tets.

    ``layer_splits`` are z-planes; ``regions`` gives one region tag per layer
    (``len(layer_splits) + 1`` entries, default 1, 2, ...). Tets are assigned
    by centroid height. Nodes at z=0 form the "ground" set, at z=lz "hv".
    """
    for name, v in (("nx", nx), ("ny", ny), ("nz", nz)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    if min(lx, ly, lz) <= 0:
        raise ValueError("box extents must be positive")
    splits = sorted(float(z) for z in layer_splits)
    if any(not (0.0 < z < lz) for z in splits):
        raise ValueError("layer splits must lie strictly inside (0, lz)")
    if regions is None:
        regions = list(range(1, len(splits) + 2))
    if len(regions) != len(splits) + 1:
        raise ValueError("need one region tag per layer")

    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    zs = np.linspace(0.0, lz, nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    tets = []
    # Kuhn subdivision: one tet per monotone lattice path from corner 000 to 111
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=int)
        path = [corner.copy()]
        for axis in perm:
            corner[axis] += 1
            path.append(corner.copy())
        tets.append(np.column_stack([nid(I + c[0], J + c[1], K + c[2]) for c in path]))
    tets = np.stack(tets, axis=1).reshape(-1, 4)

    tol = 1e-12 * max(lx, ly, lz)
    zc = nodes[tets, 2].mean(axis=1)
    layer = np.searchsorted(np.asarray(splits) - tol, zc, side="left") if splits else np.zeros(len(tets), int)
    region_id = np.asarray(regions, dtype=np.int64)[layer]

    ground = np.flatnonzero(np.abs(nodes[:, 2]) <= tol)
    hv = np.flatnonzero(np.abs(nodes[:, 2] - lz) <= tol)
    return TetMesh(nodes, tets, region_id, {"ground": ground, "hv": hv})


# --------------------------------------------------------------------------
# MSH 2.2 ASCII

class _Lines:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, section: str) -> str:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        raise MeshParseError(f"unexpected end of file in {section}", self.pos)

    @property
    def lineno(self) -> int:
        return self.pos


def load_msh(path) -> TetMesh:
    """Read a Gmsh MSH 2.2 ASCII file.

    Tetrahedra become elements (physical tag -> region id); triangles with a
    physical tag contribute their nodes to a named boundary set. All other
    element types are ignored.
    """
    text = Path(path).read_text()
    src = _Lines(text)
    try:
        header = src.next("header")
    except MeshParseError:
        raise MeshParseError("empty file, expected $MeshFormat", 1)
    if header != "$MeshFormat":
        raise MeshParseError("expected $MeshFormat header", src.lineno)
    fmt = src.next("$MeshFormat").split()
    if len(fmt) < 3 or not fmt[0].startswith("2.2"):
        raise MeshParseError(f"unsupported MSH version {' '.join(fmt)!r}, need 2.2", src.lineno)
    if fmt[1] != "0":
        raise MeshParseError("binary MSH files are not supported", src.lineno)
    if src.next("$MeshFormat") != "$EndMeshFormat":
        raise MeshParseError("expected $EndMeshFormat", src.lineno)

    names: dict[tuple[int, int], str] = {}
    node_ids = node_xyz = None
    elements = None
    while src.pos < len(src.lines):
        try:
            tag = src.next("file")
        except MeshParseError:
            break
        if tag == "$PhysicalNames":
            names = _read_physical_names(src)
        elif tag == "$Nodes":
            node_ids, node_xyz = _read_nodes(src)
        elif tag == "$Elements":
            elements = _read_elements(src)
        elif tag.startswith("$") and not tag.startswith("$End"):
            end = "$End" + tag[1:]
            while src.next(tag) != end:
                pass
        else:
            raise MeshParseError(f"unexpected content {tag!r}", src.lineno)

    if node_ids is None:
        raise MeshParseError("missing $Nodes section", src.lineno)
    if elements is None:
        raise MeshParseError("missing $Elements section", src.lineno)

    index = {nid: k for k, nid in enumerate(node_ids)}

    def remap(ids, lineno):
        try:
            return [index[i] for i in ids]
        except KeyError as exc:
            raise MeshParseError(f"element references unknown node {exc.args[0]}", lineno) from None

    tets, regions = [], []
    bsets: dict[str, set[int]] = {}
    for etype, tags, conn, lineno in elements:
        if etype == MSH_TET:
            tets.append(remap(conn, lineno))
            regions.append(tags[0] if tags else 0)
        elif etype == MSH_TRIANGLE and tags:
            name = names.get((2, tags[0]), str(tags[0]))
            bsets.setdefault(name, set()).update(remap(conn, lineno))
    if not tets:
        raise EmptyMeshError(f"{path}: mesh contains no tetrahedra")
    return TetMesh(node_xyz, np.array(tets), np.array(regions),
                   {k: np.array(sorted(v), dtype=np.int64) for k, v in bsets.items()})


def _section_count(src: _Lines, section: str) -> int:
    line = src.next(section)
    try:
        return int(line)
    except ValueError:
        raise MeshParseError(f"bad entry count {line!r} in {section}", src.lineno) from None


def _read_physical_names(src):
    names = {}
    for _ in range(_section_count(src, "$PhysicalNames")):
        line = src.next("$PhysicalNames")
        parts = line.split(maxsplit=2)
        if len(parts) != 3:
            raise MeshParseError(f"malformed $PhysicalNames entry {line!r}", src.lineno)
        try:
            names[(int(parts[0]), int(parts[1]))] = parts[2].strip().strip('"')
        except ValueError:
            raise MeshParseError(f"malformed $PhysicalNames entry {line!r}", src.lineno) from None
    if src.next("$PhysicalNames") != "$EndPhysicalNames":
        raise MeshParseError("expected $EndPhysicalNames", src.lineno)
    return names


def _read_nodes(src):
    n = _section_count(src, "$Nodes")
    ids = np.empty(n, dtype=np.int64)
    xyz = np.empty((n, 3))
    for k in range(n):
        line = src.next("$Nodes")
        parts = line.split()
        if len(parts) != 4 or parts[0].startswith("$"):
            raise MeshParseError(f"malformed or truncated $Nodes entry {line!r}", src.lineno)
        try:
            ids[k] = int(parts[0])
            xyz[k] = [float(p) for p in parts[1:]]
        except ValueError:
            raise MeshParseError(f"malformed $Nodes entry {line!r}", src.lineno) from None
    if src.next("$Nodes") != "$EndNodes":
        raise MeshParseError("expected $EndNodes (truncated $Nodes section?)", src.lineno)
    return ids.tolist(), xyz


_NODES_PER_TYPE = {1: 2, 2: 3, 3: 4, 4: 4, 5: 8, 6: 6, 7: 5, 8: 3, 9: 6, 11: 10, 15: 1}


def _read_elements(src):
    out = []
    for _ in range(_section_count(src, "$Elements")):
        line = src.next("$Elements")
        try:
            parts = [int(p) for p in line.split()]
            etype, ntags = parts[1], parts[2]
        except (ValueError, IndexError):
            raise MeshParseError(f"malformed or truncated $Elements entry {line!r}", src.lineno) from None
        tags = parts[3:3 + ntags]
        conn = parts[3 + ntags:]
        expected = _NODES_PER_TYPE.get(etype)
        if expected is not None and len(conn) != expected:
            raise MeshParseError(f"element of type {etype} needs {expected} nodes", src.lineno)
        out.append((etype, tags, conn, src.lineno))
    if src.next("$Elements") != "$EndElements":
        raise MeshParseError("expected $EndElements (truncated $Elements section?)", src.lineno)
    return out


def write_msh(mesh: TetMesh, path) -> None:
    """Write ``mesh`` as MSH 2.2 ASCII.

    Boundary sets are stored as tagged boundary triangles, so each set must be
    exactly the node set of the boundary faces lying inside it.
    """
    faces = mesh.boundary_faces()
    bnames = sorted(mesh.boundary_sets)
    regions = sorted(set(mesh.region_id.tolist()))
    btag = {name: max(regions) + 1 + k for k, name in enumerate(bnames)}

    tri_rows = []
    for name in bnames:
        members = np.zeros(mesh.n_nodes, dtype=bool)
        members[mesh.boundary_sets[name]] = True
        sel = faces[members[faces].all(axis=1)]
        covered = np.unique(sel)
        if not np.array_equal(covered, mesh.boundary_sets[name]):
            raise GeometryError(f"boundary set {name!r} is not a union of boundary faces")
        tri_rows.extend((btag[name], f) for f in sel)

    lines = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$PhysicalNames",
             str(len(regions) + len(bnames))]
    lines += [f'3 {r} "region_{r}"' for r in regions]
    lines += [f'2 {btag[n]} "{n}"' for n in bnames]
    lines += ["$EndPhysicalNames", "$Nodes", str(mesh.n_nodes)]
    lines += [f"{k + 1} {x!r} {y!r} {z!r}" for k, (x, y, z) in enumerate(mesh.nodes.tolist())]
    lines += ["$EndNodes", "$Elements", str(len(tri_rows) + mesh.n_tets)]
    eid = 1
    for tag, f in tri_rows:
        lines.append(f"{eid} 2 2 {tag} {tag} " + " ".join(str(i + 1) for i in f))
        eid += 1
    for r, t in zip(mesh.region_id.tolist(), mesh.tets.tolist()):
        lines.append(f"{eid} 4 2 {r} {r} " + " ".join(str(i + 1) for i in t))
        eid += 1
    lines.append("$EndElements")
    Path(path).write_text("\n".join(lines) + "\n")
