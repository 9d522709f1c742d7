"""Synthetic pendulum images and the binary tensor file format.

A pendulum image is a 16x16 anti-aliased rendering of a bright rod hinged at
the image centre with a disk bob at its free end; the joint angle is the only
factor of variation.  Datasets are stored as `.vht` tensor files (little-endian
float32 with a small header) plus a sibling CSV of angle labels.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import struct
import tempfile

import numpy as np

TWO_PI = 2.0 * math.pi

# angles are snapped to this grid so that wrapped inputs (theta + 2*pi carries
# rounding error) render bit-identically; 1.5e-9 rad is far below visibility
_ANGLE_GRID_STEPS = 2 ** 32

MAGIC = b"VHPT"
VERSION = 1
MAX_ELEMENTS = 2 ** 31


class FormatError(ValueError):
    """A binary artifact does not match its declared format."""


@dataclasses.dataclass(frozen=True)
class PendulumSpec:
    """Geometry of the rendered pendulum."""

    size: int = 16
    pivot: tuple[float, float] = (7.5, 7.5)
    rod_length: float = 6.0
    bob_radius: float = 2.0
    rod_width: float = 1.0

    def __post_init__(self):
        if self.size < 4:
            raise ValueError("image size too small")
        if self.rod_length <= 0 or self.bob_radius <= 0 or self.rod_width <= 0:
            raise ValueError("geometry values must be positive")


DEFAULT_SPEC = PendulumSpec()


def canonical_angle(theta):
    """Wrap theta onto [0, 2*pi) and snap to the rendering grid."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise ValueError("angle must be finite")
    k = round((theta % TWO_PI) / TWO_PI * _ANGLE_GRID_STEPS) % _ANGLE_GRID_STEPS
    return k / _ANGLE_GRID_STEPS * TWO_PI


def render(theta, spec=DEFAULT_SPEC):
    """Render one pendulum image as a (size, size) float64 array in [0, 1].

    The bob centre sits at (cx + L*sin(theta), cy + L*cos(theta)) in pixel
    coordinates (x = column, y = row), so theta = 0 hangs straight down the
    image and theta grows counter-clockwise in standard orientation.
    """
    t = canonical_angle(theta)
    cx, cy = spec.pivot
    bx = cx + spec.rod_length * math.sin(t)
    by = cy + spec.rod_length * math.cos(t)

    ii, jj = np.meshgrid(np.arange(spec.size, dtype=np.float64),
                         np.arange(spec.size, dtype=np.float64), indexing="ij")
    px, py = jj, ii

    # distance from each pixel centre to the rod segment [pivot, bob centre]
    vx, vy = bx - cx, by - cy
    seg_len_sq = vx * vx + vy * vy
    u = np.clip(((px - cx) * vx + (py - cy) * vy) / seg_len_sq, 0.0, 1.0)
    dx = px - (cx + u * vx)
    dy = py - (cy + u * vy)
    d_rod = np.sqrt(dx * dx + dy * dy)
    rod = np.clip(0.5 * spec.rod_width + 0.5 - d_rod, 0.0, 1.0)

    d_bob = np.sqrt((px - bx) ** 2 + (py - by) ** 2)
    bob = np.clip(spec.bob_radius + 0.5 - d_bob, 0.0, 1.0)

    return np.maximum(rod, bob)


def generate(n, seed, spec=DEFAULT_SPEC):
    """n uniformly distributed pendulum images with their angle labels.

    Returns (images, angles): images as float32 rows of length size*size for
    compact storage, angles as float64 radians.  The labels exist only for
    evaluation; training never reads them.
    """
    if n < 1:
        raise ValueError("need at least one image")
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, TWO_PI, size=n)
    images = np.empty((n, spec.size * spec.size), dtype=np.float32)
    for i, theta in enumerate(angles):
        images[i] = render(theta, spec).ravel().astype(np.float32)
    return images, angles


def atomic_write_bytes(path, payload):
    """Write bytes to a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, array):
    """Serialise an array as magic, version, rank, dims (u32 LE), f32 payload."""
    array = np.asarray(array)
    if array.ndim < 1:
        array = array.reshape(1)
    if array.size > MAX_ELEMENTS:
        raise FormatError(f"tensor has {array.size} elements, limit is {MAX_ELEMENTS}")
    header = MAGIC + struct.pack("<BI", VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = array.astype("<f4", copy=False).tobytes(order="C")
    atomic_write_bytes(path, header + payload)


def load_tensor(path):
    """Read a tensor file back as float32, validating every header field."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9:
        raise FormatError("file too short for a tensor header")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise FormatError(f"unknown tensor format version {version}")
    if rank < 1 or rank > 32:
        raise FormatError(f"implausible rank {rank}")
    offset = 9
    if len(blob) < offset + 4 * rank:
        raise FormatError("truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    count = 1
    for d in dims:
        count *= int(d)
    if count > MAX_ELEMENTS:
        raise FormatError(f"dims product {count} exceeds limit {MAX_ELEMENTS}")
    expected = count * 4
    if len(blob) - offset != expected:
        raise FormatError(
            f"payload is {len(blob) - offset} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return data.reshape(dims).copy()


def save_angles(path, angles):
    """Sibling CSV of angle labels: index,angle_radians."""
    rows = ["index,angle_radians"]
    rows.extend(f"{i},{float(a)!r}" for i, a in enumerate(angles))
    atomic_write_bytes(path, ("\n".join(rows) + "\n").encode("ascii"))


def load_angles(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["index", "angle_radians"]:
            raise FormatError(f"bad angle CSV header {header}")
        angles = []
        for i, row in enumerate(reader):
            if len(row) != 2 or int(row[0]) != i:
                raise FormatError(f"bad angle CSV row {row}")
            angles.append(float(row[1]))
    return np.asarray(angles, dtype=np.float64)
