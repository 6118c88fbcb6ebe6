"""Procedural pose-labeled images: a shaded cuboid head proxy with a nose
marker, rendered under intrinsic yaw-pitch-roll rotation and orthographic
projection, plus dataset file I/O (binary PPM + csv manifest) and the
axis-overlay renderer for qualitative figures.

Conventions (used consistently by generation, rendering, and evaluation):
x right, y down, z into the screen; yaw rotates about the vertical axis,
pitch about the lateral axis, roll about the frontal axis, and the full
rotation applied to model coordinates is R = R_roll @ R_pitch @ R_yaw.
The head geometry is left-right symmetric and the light direction has no
x component, so poses (yaw, pitch, roll) and (-yaw, pitch, -roll) render
as exact horizontal mirror images over a symmetric background.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .model import PoseTriple
from .tensor import LwposrError


class DatasetError(LwposrError):
    """Malformed dataset directory, manifest, or out-of-range label."""


MAX_ANGLE = 99.0
_MANIFEST_NAME = "manifest.csv"
_IMAGE_DIR = "images"
_MANIFEST_VERSION = 1


def rotation_matrix(yaw_deg, pitch_deg, roll_deg):
    """R = R_roll(z) @ R_pitch(x) @ R_yaw(y), angles in degrees."""
    y, p, r = np.radians([yaw_deg, pitch_deg, roll_deg])
    cy, sy = np.cos(y), np.sin(y)
    cp, sp = np.cos(p), np.sin(p)
    cr, sr = np.cos(r), np.sin(r)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rz @ rx @ ry


def _box_faces(center, half, colors):
    """Six quads of an axis-aligned box; outward normals, fixed order."""
    cx, cy, cz = center
    hx, hy, hz = half

    def corner(sx, sy, sz):
        return np.array([cx + sx * hx, cy + sy * hy, cz + sz * hz])

    # (vertex signs, color key); quads wound consistently per face
    defs = [
        (((-1, -1, -1), (1, -1, -1), (1, 1, -1), (-1, 1, -1)), "front"),   # -z
        (((1, -1, 1), (-1, -1, 1), (-1, 1, 1), (1, 1, 1)), "back"),        # +z
        (((-1, -1, 1), (-1, -1, -1), (-1, 1, -1), (-1, 1, 1)), "left"),    # -x
        (((1, -1, -1), (1, -1, 1), (1, 1, 1), (1, 1, -1)), "right"),       # +x
        (((-1, -1, 1), (1, -1, 1), (1, -1, -1), (-1, -1, -1)), "top"),     # -y
        (((-1, 1, -1), (1, 1, -1), (1, 1, 1), (-1, 1, 1)), "bottom"),      # +y
    ]
    normals = {
        "front": (0, 0, -1),
        "back": (0, 0, 1),
        "left": (-1, 0, 0),
        "right": (1, 0, 0),
        "top": (0, -1, 0),
        "bottom": (0, 1, 0),
    }
    faces = []
    for signs, key in defs:
        verts = np.stack([corner(*s) for s in signs])
        faces.append((verts, np.array(normals[key], dtype=float), colors[key]))
    return faces


# head proxy: a tall box plus a nose box on the front face, offset downward
# (x-symmetric so the mirror-pose property holds; y-asymmetric so pitch sign
# is visible; side faces share one color for the same reason)
_HEAD_COLORS = {
    "front": (0.95, 0.78, 0.66),
    "back": (0.35, 0.32, 0.30),
    "left": (0.84, 0.66, 0.56),
    "right": (0.84, 0.66, 0.56),
    "top": (0.76, 0.60, 0.50),
    "bottom": (0.52, 0.42, 0.38),
}
_NOSE_COLORS = {k: (0.88, 0.24, 0.20) for k in _HEAD_COLORS}


def _head_faces():
    faces = _box_faces((0.0, 0.0, 0.0), (0.32, 0.42, 0.30), _HEAD_COLORS)
    faces += _box_faces((0.0, 0.18, -0.36), (0.07, 0.07, 0.085), _NOSE_COLORS)
    return faces


_FACES = _head_faces()
_LIGHT = np.array([0.0, -0.45, -0.89])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_AMBIENT = 0.3
_HEAD_SCALE = 0.72


def render_head(pose, size, background):
    """Rasterize the head proxy at the given pose over a background.

    pose: PoseTriple; background: (size, size, 3) floats in [0, 1].
    Returns a float image (size, size, 3) in [0, 1].
    """
    rot = rotation_matrix(pose.yaw, pose.pitch, pose.roll)
    img = background.copy()
    depth = np.full((size, size), np.inf)
    cx = cy = (size - 1) / 2.0
    scale = _HEAD_SCALE * size
    cols = np.arange(size, dtype=np.float64)
    px = (cols - cx) / scale  # model-space x per column
    py = (cols - cy) / scale  # model-space y per row (same spacing)

    for verts, normal, color in _FACES:
        n = rot @ normal
        if n[2] >= 0.0:  # facing away from the viewer
            continue
        pv = verts @ rot.T  # rotated vertices
        vx, vy, vz = pv[:, 0], pv[:, 1], pv[:, 2]
        lo_c = max(0, int(np.floor((vx.min()) * scale + cx)))
        hi_c = min(size - 1, int(np.ceil(vx.max() * scale + cx)))
        lo_r = max(0, int(np.floor(vy.min() * scale + cy)))
        hi_r = min(size - 1, int(np.ceil(vy.max() * scale + cy)))
        if lo_c > hi_c or lo_r > hi_r:
            continue
        gx = px[lo_c : hi_c + 1][None, :]
        gy = py[lo_r : hi_r + 1][:, None]
        inside_pos = None
        inside_neg = None
        for i in range(4):
            x1, y1 = vx[i], vy[i]
            x2, y2 = vx[(i + 1) % 4], vy[(i + 1) % 4]
            edge = (x2 - x1) * (gy - y1) - (y2 - y1) * (gx - x1)
            pos = edge >= 0.0
            neg = edge <= 0.0
            inside_pos = pos if inside_pos is None else (inside_pos & pos)
            inside_neg = neg if inside_neg is None else (inside_neg & neg)
        inside = inside_pos | inside_neg
        if not inside.any():
            continue
        # plane depth: n . p = n . v0  =>  z = (d - nx x - ny y) / nz
        d = float(n @ pv[0])
        z = (d - n[0] * gx - n[1] * gy) / n[2]
        window = depth[lo_r : hi_r + 1, lo_c : hi_c + 1]
        closer = inside & (z < window)
        if not closer.any():
            continue
        intensity = _AMBIENT + (1.0 - _AMBIENT) * max(0.0, float(n @ _LIGHT))
        shaded = np.clip(np.array(color) * intensity, 0.0, 1.0)
        window[closer] = z[closer]
        region = img[lo_r : hi_r + 1, lo_c : hi_c + 1]
        region[closer] = shaded
    return img


def _background(size, rng):
    """Random linear color gradient plus low-amplitude noise."""
    c0 = rng.uniform(0.1, 0.5, 3)
    c1 = rng.uniform(0.1, 0.5, 3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    coords = np.arange(size) / max(size - 1, 1)
    t = np.cos(theta) * coords[None, :] + np.sin(theta) * coords[:, None]
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    bg = c0 + (c1 - c0) * t[..., None]
    bg = bg + rng.uniform(-0.05, 0.05, (size, size, 3))
    return np.clip(bg, 0.0, 1.0)


def quantize(img):
    """Float image in [0, 1] -> uint8 (lossless round trip thereafter)."""
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, S, S) float64 in [0, 1], on the uint8 grid
    label: PoseTriple


class SyntheticDataset:
    """In-memory pose dataset: images (N, 3, S, S) and labels (N, 3)."""

    def __init__(self, images, labels, size, seed=None):
        if images.shape[0] != labels.shape[0]:
            raise DatasetError("image/label counts differ")
        self.images = images
        self.labels = labels
        self.size = size
        self.seed = seed

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i):
        return SyntheticSample(self.images[i], PoseTriple.from_array(self.labels[i]))


def generate_sample(index, size, seed):
    """Render one sample; fully determined by (seed, index)."""
    rng = np.random.default_rng([seed, index])
    yaw, pitch, roll = rng.uniform(-MAX_ANGLE, MAX_ANGLE, 3)
    pose = PoseTriple(float(yaw), float(pitch), float(roll))
    bg = _background(size, rng)
    img = render_head(pose, size, bg)
    img = quantize(img).astype(np.float64) / 255.0
    return SyntheticSample(np.ascontiguousarray(img.transpose(2, 0, 1)), pose)


def generate_dataset(n, size, seed):
    """n pose-labeled renders with angles uniform in [-99, 99] degrees."""
    if n < 1:
        raise DatasetError(f"dataset size must be >= 1, got {n}")
    if size % 8 != 0:
        raise DatasetError(f"image size must be divisible by 8, got {size}")
    images = np.empty((n, 3, size, size))
    labels = np.empty((n, 3))
    for i in range(n):
        sample = generate_sample(i, size, seed)
        images[i] = sample.image
        labels[i] = sample.label.as_array()
    return SyntheticDataset(images, labels, size, seed)


# -- PPM I/O -------------------------------------------------------------


def write_ppm(path, img_u8):
    """Binary 8-bit P6 image; img_u8: (H, W, 3) uint8."""
    h, w, c = img_u8.shape
    if c != 3 or img_u8.dtype != np.uint8:
        raise DatasetError("write_ppm expects (H, W, 3) uint8")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img_u8.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise DatasetError(f"{path}: not a binary 8-bit PPM")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise DatasetError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 is supported")
    raw = parts[3][: w * h * 3]
    if len(raw) != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


# -- dataset directory I/O -------------------------------------------------


def save_dataset(dataset, out_dir):
    """manifest.csv plus images/NNNNNN.ppm; byte-deterministic."""
    img_dir = os.path.join(out_dir, _IMAGE_DIR)
    os.makedirs(img_dir, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        name = f"{i:06d}.ppm"
        chw = dataset.images[i]
        write_ppm(os.path.join(img_dir, name), quantize(chw.transpose(1, 2, 0)))
        y, p, r = dataset.labels[i]
        rows.append((name, repr(float(y)), repr(float(p)), repr(float(r))))
    with open(os.path.join(out_dir, _MANIFEST_NAME), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["version", "count", "size", "seed"])
        writer.writerow(
            [_MANIFEST_VERSION, len(dataset), dataset.size, dataset.seed]
        )
        writer.writerow(["file", "yaw", "pitch", "roll"])
        writer.writerows(rows)


def load_dataset(in_dir):
    manifest = os.path.join(in_dir, _MANIFEST_NAME)
    try:
        with open(manifest, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise DatasetError(f"cannot read manifest: {exc}") from exc
    if len(rows) < 3 or rows[0] != ["version", "count", "size", "seed"]:
        raise DatasetError("malformed manifest header")
    try:
        version, count, size = int(rows[1][0]), int(rows[1][1]), int(rows[1][2])
        seed = None if rows[1][3] == "None" else int(rows[1][3])
    except (ValueError, IndexError) as exc:
        raise DatasetError("malformed manifest metadata") from exc
    if version != _MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {version}")
    if rows[2] != ["file", "yaw", "pitch", "roll"]:
        raise DatasetError("malformed manifest column header")
    entries = rows[3:]
    if len(entries) != count:
        raise DatasetError(
            f"manifest declares {count} samples but lists {len(entries)}"
        )
    names = [e[0] for e in entries]
    if len(set(names)) != len(names):
        raise DatasetError("duplicate image file names in manifest")
    images = np.empty((count, 3, size, size))
    labels = np.empty((count, 3))
    for i, entry in enumerate(entries):
        name, ys, ps, rs = entry
        label = np.array([float(ys), float(ps), float(rs)])
        if np.any(np.abs(label) > MAX_ANGLE):
            raise DatasetError(
                f"label out of range [-{MAX_ANGLE}, {MAX_ANGLE}] for {name}"
            )
        path = os.path.join(in_dir, _IMAGE_DIR, name)
        if not os.path.exists(path):
            raise DatasetError(f"missing image file {name}")
        img = read_ppm(path)
        if img.shape != (size, size, 3):
            raise DatasetError(f"{name}: expected {size}x{size} pixels")
        images[i] = img.astype(np.float64).transpose(2, 0, 1) / 255.0
        labels[i] = label
    return SyntheticDataset(images, labels, size, seed)


# -- qualitative overlays ----------------------------------------------------


_AXIS_COLORS = ((255, 0, 0), (0, 255, 0), (0, 0, 255))  # x red, y green, z blue


def _draw_line(img, r0, c0, r1, c1, color):
    """Integer Bresenham segment, clipped at the borders."""
    h, w, _ = img.shape
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        if 0 <= r < h and 0 <= c < w:
            img[r, c] = color
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr
    return img


def render_pose_axes(image_u8, pose, origin, length):
    """Overlay the rotated unit axes on a copy of the image.

    origin: (row, col) pixel inside the image; length in pixels.  The three
    axes are drawn x-red, y-green, z-blue after rotation by the pose and
    orthographic projection (so a 90-degree yaw collapses x to a point and
    lays z horizontal).
    """
    h, w, _ = image_u8.shape
    r0, c0 = int(origin[0]), int(origin[1])
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise DatasetError(f"axes origin {origin} outside the image")
    rot = rotation_matrix(pose.yaw, pose.pitch, pose.roll)
    out = image_u8.copy()
    for axis in range(3):
        v = rot[:, axis]
        c1 = c0 + int(round(length * v[0]))
        r1 = r0 + int(round(length * v[1]))
        _draw_line(out, r0, c0, r1, c1, _AXIS_COLORS[axis])
    return out
