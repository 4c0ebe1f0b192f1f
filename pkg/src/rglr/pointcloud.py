"""Point cloud container, ASCII I/O, canonical rescaling and noise injection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rglr.errors import DegenerateCloud, EmptyCloud, ParseError

log = logging.getLogger(__name__)

RED = 0
BLUE = 1

DEFAULT_DIAGONAL = 100.0

FORMATS = ("xyz", "ply")


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional unit normals and red/blue labels.

    Arrays are copied and made read-only on construction, so a cloud can be
    shared freely.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float, copy=True).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals and points differ in length")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-9):
                raise ValueError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int8, copy=True).reshape(-1)
            if len(lab) != len(pts):
                raise ValueError("labels and points differ in length")
            if not np.all((lab == RED) | (lab == BLUE)):
                raise ValueError("labels must be RED (0) or BLUE (1)")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and _opt_equal(self.normals, other.normals)
            and _opt_equal(self.labels, other.labels)
        )

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.normals, self.labels)

    def diagonal(self) -> float:
        """Length of the axis-aligned bounding box diagonal."""
        lo, hi = self.points.min(axis=0), self.points.max(axis=0)
        return float(np.linalg.norm(hi - lo))


def _opt_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in ("gaussian", "laplacian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError("sigma must be finite and non-negative")


def _guess_format(path: Path) -> str:
    suffix = path.suffix.lower().lstrip(".")
    if suffix in FORMATS:
        return suffix
    raise ValueError(f"cannot infer format from {path.name!r}; pass format=")


def load(path, format: str | None = None) -> PointCloud:
    """Read a cloud from an XYZ or ASCII PLY file."""
    path = Path(path)
    fmt = (format or _guess_format(path)).lower()
    text = path.read_text()
    if fmt == "xyz":
        pts, nrm = _parse_xyz(text)
    elif fmt == "ply":
        pts, nrm = _parse_ply(text)
    else:
        raise ValueError(f"unsupported format {fmt!r}")
    if len(pts) == 0:
        raise EmptyCloud(f"{path} holds no points")
    if nrm is not None:
        nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm)


def _parse_row(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric value in {' '.join(tokens)!r}", lineno) from None


def _parse_xyz(text):
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if len(tokens) not in (3, 6):
            raise ParseError(f"expected 3 or 6 columns, got {len(tokens)}", lineno)
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise ParseError(f"expected {width} columns, got {len(tokens)}", lineno)
        rows.append(_parse_row(tokens, lineno))
    if not rows:
        return np.empty((0, 3)), None
    data = np.asarray(rows)
    return data[:, :3], (data[:, 3:6] if width == 6 else None)


def _parse_ply(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    header_end = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError("only ASCII PLY is supported", lineno)
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", lineno)
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tokens[2])
                except ValueError:
                    raise ParseError("vertex count is not an integer", lineno) from None
            elif n_vertex is None:
                raise ParseError("vertex element must come first", lineno)
        elif key == "property":
            if in_vertex:
                if tokens[1] == "list":
                    raise ParseError("list properties on vertices are not supported", lineno)
                props.append(tokens[-1])
        elif key == "end_header":
            header_end = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {key!r}", lineno)
    if header_end is None:
        raise ParseError("missing end_header", len(lines))
    if n_vertex is None:
        raise ParseError("no vertex element", header_end)
    for axis in "xyz":
        if axis not in props:
            raise ParseError(f"vertex property {axis!r} missing", header_end)
    cols = [props.index(a) for a in "xyz"]
    has_normals = all(f"n{a}" in props for a in "xyz")
    ncols = [props.index(f"n{a}") for a in "xyz"] if has_normals else None

    rows = []
    lineno = header_end
    for line in lines[header_end:]:
        lineno += 1
        if len(rows) == n_vertex:
            break
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != len(props):
            raise ParseError(f"expected {len(props)} values, got {len(tokens)}", lineno)
        rows.append(_parse_row(tokens, lineno))
    if len(rows) != n_vertex:
        raise ParseError(f"expected {n_vertex} vertices, found {len(rows)}", lineno)
    if n_vertex == 0:
        return np.empty((0, 3)), None
    data = np.asarray(rows)
    return data[:, cols], (data[:, ncols] if has_normals else None)


def save(cloud: PointCloud, path, format: str | None = None) -> None:
    """Write ``cloud`` as XYZ or ASCII PLY with 17 significant digits.

    Raises OSError when the path is not writable.
    """
    path = Path(path)
    fmt = (format or _guess_format(path)).lower()
    cols = [cloud.points]
    if cloud.normals is not None:
        cols.append(cloud.normals)
    data = np.hstack(cols)
    body = "".join(" ".join(f"{v:.17g}" for v in row) + "\n" for row in data)
    if fmt == "xyz":
        out = body
    elif fmt == "ply":
        header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
        header += [f"property double {a}" for a in "xyz"]
        if cloud.normals is not None:
            header += [f"property double n{a}" for a in "xyz"]
        header.append("end_header")
        out = "\n".join(header) + "\n" + body
    else:
        raise ValueError(f"unsupported format {fmt!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write(out)


def rescale_to_diagonal(cloud: PointCloud, target_diag: float = DEFAULT_DIAGONAL):
    """Scale uniformly about the bounding-box center to a given diagonal.

    Returns the new cloud and the applied scale factor.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot rescale an empty cloud")
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        raise DegenerateCloud("all points coincide")
    scale = target_diag / diag
    if scale == 1.0:
        return cloud, 1.0
    center = 0.5 * (lo + hi)
    pts = (cloud.points - center) * scale + center
    return cloud.with_points(pts), scale


def sample_laplace(rng: np.random.Generator, scale: float, size) -> np.ndarray:
    """Inverse-CDF Laplace sampler with scale ``b``; variance is ``2 b**2``."""
    u = rng.random(size) - 0.5
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def add_noise(cloud: PointCloud, spec: NoiseSpec) -> PointCloud:
    """Perturb every coordinate with iid zero-mean noise of SD ``spec.sigma``."""
    if spec.sigma == 0:
        return cloud
    rng = np.random.default_rng(spec.seed)
    shape = cloud.points.shape
    if spec.kind == "gaussian":
        noise = rng.normal(0.0, spec.sigma, size=shape)
    else:
        noise = sample_laplace(rng, spec.sigma / np.sqrt(2.0), shape)
    return PointCloud(cloud.points + noise, labels=cloud.labels)
