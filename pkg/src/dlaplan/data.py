"""Synthetic floor plans with pixel-exact labels, plus PPM/PGM dataset I/O.

Each plan holds a few non-overlapping rooms (rectangles, circles, or
rectangles with one corner cut by an inclined wall). A room footprint is
split into a wall ring ``wall_thickness`` pixels wide and an interior.
Door/window segments replace short runs of wall pixels. Rendering uses
fixed colours: white background, near-black walls, grey door/window ticks
and a light tint per room class, so the dark pixels of the image are exactly
the wall and door/window label pixels.
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from ._config import get_dtype
from .blocks import BOUNDARY_CLASSES, ROOM_CLASSES
from .io_utils import atomic_write_bytes, atomic_write_text

SHAPES = ("rectangle", "circle", "inclined_quad")
WALL, DOOR = 1, 2
MARGIN = 2

BACKGROUND_RGB = (255, 255, 255)
WALL_RGB = (25, 25, 25)
DOOR_RGB = (128, 128, 128)
ROOM_RGB = {
    1: (240, 214, 176),  # closet
    2: (176, 222, 240),  # bathroom
    3: (244, 240, 170),  # living room
    4: (214, 190, 244),  # bedroom
    5: (190, 240, 196),  # hall
    6: (244, 196, 214),  # balcony
}
# every channel of a wall/door pixel is below this; every other pixel is above
DARK_THRESHOLD = 160


class SpecError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class GenerationError(RuntimeError):
    """Rooms could not be placed on the canvas within the retry budget."""


class ParseError(ValueError):
    def __init__(self, message, offset=None):
        where = f" (at byte offset {offset})" if offset is not None else ""
        super().__init__(message + where)
        self.offset = offset


@dataclass
class FloorPlanSpec:
    height: int = 64
    width: int = 64
    room_count: tuple = (2, 4)
    shapes: tuple = SHAPES
    wall_thickness: int = 2
    room_size: tuple = (12, 40)  # footprint side (rect/quad) or outer diameter (circle)
    door_length: tuple = (4, 8)
    doors_per_room: tuple = (1, 2)
    room_classes: tuple = (1, 2, 3, 4, 5, 6)
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        for name in ("room_count", "shapes", "room_size", "door_length", "doors_per_room", "room_classes"):
            v = getattr(self, name)
            if isinstance(v, (list, tuple)):
                setattr(self, name, tuple(v))
        self.validate()

    def validate(self):
        for name in ("height", "width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 16 or v % 16:
                raise SpecError(name, f"must be a positive multiple of 16, got {v!r}")
        for name in ("room_count", "room_size", "door_length", "doors_per_room"):
            v = getattr(self, name)
            if (len(v) != 2 or not all(isinstance(t, int) for t in v) or v[0] > v[1]
                    or v[0] < (1 if name != "doors_per_room" else 0)):
                raise SpecError(name, f"must be an integer range (lo, hi) with lo <= hi, got {v!r}")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise SpecError("shapes", f"must be a non-empty subset of {SHAPES}, got {self.shapes!r}")
        if not isinstance(self.wall_thickness, int) or self.wall_thickness < 1:
            raise SpecError("wall_thickness", f"must be a positive integer, got {self.wall_thickness!r}")
        if self.room_size[0] < 2 * self.wall_thickness + 3:
            raise SpecError("room_size", "rooms must be wider than two wall thicknesses plus 2")
        if self.room_size[1] > min(self.height, self.width) - 2 * MARGIN:
            raise SpecError("room_size", "largest room does not fit inside the canvas margin")
        if not self.room_classes or any(c not in ROOM_RGB for c in self.room_classes):
            raise SpecError("room_classes", f"must be a non-empty subset of 1..6, got {self.room_classes!r}")
        if not isinstance(self.seed, int):
            raise SpecError("seed", f"must be an integer, got {self.seed!r}")
        if not isinstance(self.max_retries, int) or self.max_retries < 1:
            raise SpecError("max_retries", f"must be a positive integer, got {self.max_retries!r}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise SpecError(k, "unknown field")
        try:
            return cls(**d)
        except TypeError as exc:  # e.g. a string where a range is expected
            raise SpecError("spec", str(exc)) from None


@dataclass(eq=False)
class FloorPlanSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    boundary_labels: np.ndarray  # (H, W) uint8 over BOUNDARY_CLASSES
    room_labels: np.ndarray  # (H, W) uint8 over ROOM_CLASSES
    rooms: list = field(default_factory=list)

    def same_pixels(self, other):
        return (np.array_equal(self.image, other.image)
                and np.array_equal(self.boundary_labels, other.boundary_labels)
                and np.array_equal(self.room_labels, other.room_labels))

    def rgb_bytes(self):
        return np.rint(self.image * 255).astype(np.uint8)


# -- geometry -------------------------------------------------------------------

def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return yy + 0.5, xx + 0.5


def _erode(mask, t):
    return ndimage.binary_erosion(mask, structure=np.ones((2 * t + 1, 2 * t + 1), bool))


def _partition(h, w, count, rng):
    """Guillotine-split the margin-inset canvas into ``count`` cells (y0, x0, y1, x1)."""
    cells = [(MARGIN, MARGIN, h - MARGIN, w - MARGIN)]
    while len(cells) < count:
        areas = [(c[2] - c[0]) * (c[3] - c[1]) for c in cells]
        y0, x0, y1, x1 = cells.pop(int(np.argmax(areas)))
        frac = float(rng.uniform(0.35, 0.65))
        if y1 - y0 > x1 - x0:
            cut = y0 + int(round(frac * (y1 - y0)))
            cells += [(y0, x0, cut, x1), (cut, x0, y1, x1)]
        else:
            cut = x0 + int(round(frac * (x1 - x0)))
            cells += [(y0, x0, y1, cut), (y0, cut, y1, x1)]
    return cells


def _side(rng, lo, hi, span):
    """Room side length: at least 60% of the available span, within [lo, hi]."""
    top = min(hi, span)
    low = min(max(lo, int(math.ceil(0.6 * span))), top)
    return int(rng.integers(low, top + 1))


def _rect_room(spec, rng, cell):
    cy0, cx0, cy1, cx1 = cell
    lo, hi = spec.room_size
    rw, rh = _side(rng, lo, hi, cx1 - cx0), _side(rng, lo, hi, cy1 - cy0)
    x0 = int(rng.integers(cx0, cx1 - rw + 1))
    y0 = int(rng.integers(cy0, cy1 - rh + 1))
    foot = np.zeros((spec.height, spec.width), bool)
    foot[y0:y0 + rh, x0:x0 + rw] = True
    return foot, _erode(foot, spec.wall_thickness), {"x0": x0, "y0": y0, "w": rw, "h": rh}


def _circle_room(spec, rng, cell):
    cy0, cx0, cy1, cx1 = cell
    t = spec.wall_thickness
    lo, hi = spec.room_size
    outer = _side(rng, lo, hi, min(cy1 - cy0, cx1 - cx0)) // 2
    r = outer - t
    cy = int(rng.integers(cy0 + outer, cy1 - outer + 1))
    cx = int(rng.integers(cx0 + outer, cx1 - outer + 1))
    yy, xx = _grid(spec.height, spec.width)
    d = np.hypot(yy - cy, xx - cx)
    return d <= outer, d <= r, {"cx": cx, "cy": cy, "r": r}


def _quad_room(spec, rng, cell):
    foot, _, geo = _rect_room(spec, rng, cell)
    rw, rh, x0, y0 = geo["w"], geo["h"], geo["x0"], geo["y0"]
    angle = float(rng.uniform(15.0, 75.0))
    slope = math.tan(math.radians(angle))
    leg_x = float(rng.uniform(0.3, 0.6)) * rw
    leg_y = leg_x * slope
    if leg_y > 0.6 * rh:
        leg_y = 0.6 * rh
        leg_x = leg_y / slope
    corner = int(rng.integers(4))
    yy, xx = _grid(spec.height, spec.width)
    # distances measured inward from the chosen corner
    u = (xx - x0) if corner in (0, 2) else (x0 + rw - xx)
    v = (yy - y0) if corner in (0, 1) else (y0 + rh - yy)
    foot &= ~(u / leg_x + v / leg_y < 1.0)
    geo.update(angle=angle, corner=corner, leg_x=leg_x, leg_y=leg_y)
    return foot, _erode(foot, spec.wall_thickness), geo


_BUILDERS = {"rectangle": _rect_room, "circle": _circle_room, "inclined_quad": _quad_room}


def _place_doors(spec, rng, wall, doors_mask):
    ys, xs = np.nonzero(wall)
    for _ in range(int(rng.integers(spec.doors_per_room[0], spec.doors_per_room[1] + 1))):
        i = int(rng.integers(len(ys)))
        half = int(rng.integers(spec.door_length[0], spec.door_length[1] + 1)) // 2
        y, x = ys[i], xs[i]
        win = np.zeros_like(wall)
        win[max(0, y - half):y + half + 1, max(0, x - half):x + half + 1] = True
        doors_mask |= win & wall


def render(boundary_labels, room_labels):
    """RGB uint8 image (3, H, W) for a pair of label maps."""
    h, w = boundary_labels.shape
    rgb = np.empty((h, w, 3), np.uint8)
    rgb[:] = BACKGROUND_RGB
    for cls, colour in ROOM_RGB.items():
        rgb[room_labels == cls] = colour
    rgb[boundary_labels == WALL] = WALL_RGB
    rgb[boundary_labels == DOOR] = DOOR_RGB
    return rgb.transpose(2, 0, 1).copy()


def _layout(spec, rng, count):
    """Try partitions until every cell fits a room; ``None`` if this partition fails."""
    lo = spec.room_size[0]
    cells = _partition(spec.height, spec.width, count, rng)
    # shrink by one pixel per side: a moat keeps neighbouring rooms' walls apart
    cells = [(y0 + 1, x0 + 1, y1 - 1, x1 - 1) for y0, x0, y1, x1 in cells]
    if any(min(y1 - y0, x1 - x0) < lo for y0, x0, y1, x1 in cells):
        return None
    return cells


def generate_floorplan(spec: FloorPlanSpec, rng=None) -> FloorPlanSample:
    """Draw one plan; a pure function of ``spec`` and the generator state."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    count = int(rng.integers(spec.room_count[0], spec.room_count[1] + 1))
    for _ in range(spec.max_retries):
        cells = _layout(spec, rng, count)
        if cells is not None:
            break
    else:
        raise GenerationError(
            f"could not fit {count} rooms of side >= {spec.room_size[0]} on a {h}x{w} canvas "
            f"after {spec.max_retries} attempts")
    boundary = np.zeros((h, w), np.uint8)
    room = np.zeros((h, w), np.uint8)
    doors = np.zeros((h, w), bool)
    rooms = []
    for cell in cells:
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        foot, interior, geo = _BUILDERS[shape](spec, rng, cell)
        cls = int(spec.room_classes[int(rng.integers(len(spec.room_classes)))])
        wall = foot & ~interior
        boundary[wall] = WALL
        room[interior] = cls
        _place_doors(spec, rng, wall, doors)
        rooms.append({"shape": shape, "room_class": cls, "interior_pixels": int(interior.sum()), **geo})
    boundary[doors] = DOOR
    rgb = render(boundary, room)
    image = (rgb / 255.0).astype(get_dtype())
    return FloorPlanSample(image, boundary, room, rooms)


def sample_rng(seed, index):
    """Independent per-sample stream derived from ``(seed, index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_samples(spec: FloorPlanSpec, count, seed, start=0):
    return [generate_floorplan(spec, sample_rng(seed, start + i)) for i in range(count)]


def one_hot(labels, num_classes):
    """(H, W) or (N, H, W) integer labels -> (C, H, W) or (N, C, H, W) one-hot floats."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)].flat[0]
        raise ValueError(f"label {bad} out of range for {num_classes} classes")
    out = np.eye(num_classes, dtype=get_dtype())[labels]
    return np.moveaxis(out, -1, -3)


# -- PPM / PGM ------------------------------------------------------------------

_WS = b" \t\r\n"


def _read_header(buf, magic):
    """Parse ``magic width height maxval`` + one whitespace byte; returns (w, h, maxval, offset)."""
    if buf[:2] != magic:
        raise ParseError(f"expected magic {magic.decode()} but found {buf[:2]!r}", 0)
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(buf) and (buf[pos] in _WS or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                end = buf.find(b"\n", pos)
                if end < 0:
                    raise ParseError("unterminated header comment", pos)
                pos = end
            pos += 1
        m = re.match(rb"\d+", buf[pos:pos + 20])
        if not m:
            raise ParseError("expected a decimal header field", pos)
        values.append(int(m.group()))
        pos += m.end()
    if pos >= len(buf) or buf[pos] not in _WS:
        raise ParseError("header must end with a single whitespace byte", pos)
    w, h, maxval = values
    if w < 1 or h < 1:
        raise ParseError(f"image size {w}x{h} must be positive", 2)
    if maxval != 255:
        raise ParseError(f"only 8-bit images (maxval 255) are supported, got {maxval}", pos)
    return w, h, maxval, pos + 1


def ppm_bytes(rgb):
    """P6 encoding of a (3, H, W) uint8 image."""
    _, h, w = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb.transpose(1, 2, 0)).tobytes()


def pgm_bytes(gray):
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def parse_ppm(buf):
    w, h, _, off = _read_header(buf, b"P6")
    need = w * h * 3
    if len(buf) - off < need:
        raise ParseError(f"pixel data truncated: need {need} bytes, have {len(buf) - off}", len(buf))
    if len(buf) - off > need:
        raise ParseError("trailing bytes after pixel data", off + need)
    return np.frombuffer(buf, np.uint8, need, off).reshape(h, w, 3).transpose(2, 0, 1).copy()


def parse_pgm(buf):
    w, h, _, off = _read_header(buf, b"P5")
    need = w * h
    if len(buf) - off < need:
        raise ParseError(f"pixel data truncated: need {need} bytes, have {len(buf) - off}", len(buf))
    if len(buf) - off > need:
        raise ParseError("trailing bytes after pixel data", off + need)
    return np.frombuffer(buf, np.uint8, need, off).reshape(h, w).copy()


def read_ppm(path):
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


def read_pgm(path):
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def write_ppm(path, rgb):
    atomic_write_bytes(path, ppm_bytes(rgb))


def write_pgm(path, gray):
    atomic_write_bytes(path, pgm_bytes(gray))


def _check_labels(path, labels, num_classes):
    if labels.max(initial=0) >= num_classes:
        bad = int(labels[labels >= num_classes].flat[0])
        raise ParseError(f"{path}: class index {bad} is out of range for {num_classes} classes")


def save_sample(sample: FloorPlanSample, prefix):
    """Write ``prefix.ppm``, ``prefix.boundary.pgm`` and ``prefix.room.pgm``."""
    prefix = os.fspath(prefix)
    write_ppm(prefix + ".ppm", sample.rgb_bytes())
    write_pgm(prefix + ".boundary.pgm", sample.boundary_labels)
    write_pgm(prefix + ".room.pgm", sample.room_labels)


def load_sample(prefix, n_boundary=len(BOUNDARY_CLASSES), n_room=len(ROOM_CLASSES)) -> FloorPlanSample:
    prefix = os.fspath(prefix)
    rgb = read_ppm(prefix + ".ppm")
    boundary = read_pgm(prefix + ".boundary.pgm")
    room = read_pgm(prefix + ".room.pgm")
    _check_labels(prefix + ".boundary.pgm", boundary, n_boundary)
    _check_labels(prefix + ".room.pgm", room, n_room)
    if boundary.shape != rgb.shape[1:] or room.shape != rgb.shape[1:]:
        raise ParseError(f"{prefix}: image {rgb.shape[1:]} and label maps "
                         f"{boundary.shape}/{room.shape} differ in size")
    return FloorPlanSample((rgb / 255.0).astype(get_dtype()), boundary, room)


# -- datasets -------------------------------------------------------------------

@dataclass(eq=False)
class Dataset:
    images: np.ndarray  # (N, 3, H, W)
    boundary: np.ndarray  # (N, H, W) uint8
    room: np.ndarray  # (N, H, W) uint8
    boundary_classes: tuple = BOUNDARY_CLASSES
    room_classes: tuple = ROOM_CLASSES

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            raise ValueError("dataset needs at least one sample")
        return cls(np.stack([s.image for s in samples]),
                   np.stack([s.boundary_labels for s in samples]),
                   np.stack([s.room_labels for s in samples]))

    def __len__(self):
        return len(self.images)

    @property
    def n_boundary(self):
        return len(self.boundary_classes)

    @property
    def n_room(self):
        return len(self.room_classes)

    def batch(self, idx):
        """Images plus one-hot boundary and room targets for sample indices ``idx``."""
        return (self.images[idx], one_hot(self.boundary[idx], self.n_boundary),
                one_hot(self.room[idx], self.n_room))

    def subset(self, idx):
        return Dataset(self.images[idx], self.boundary[idx], self.room[idx],
                       self.boundary_classes, self.room_classes)


def sample_name(i):
    return f"{i:05d}"


def save_dataset(directory, samples, spec: FloorPlanSpec, seed):
    os.makedirs(directory, exist_ok=True)
    for i, s in enumerate(samples):
        save_sample(s, os.path.join(directory, sample_name(i)))
    manifest = {
        "count": len(samples),
        "seed": int(seed),
        "spec": spec.to_dict(),
        "classes": {"boundary": list(BOUNDARY_CLASSES), "room": list(ROOM_CLASSES)},
    }
    atomic_write_text(os.path.join(directory, "manifest.json"), json.dumps(manifest, indent=2) + "\n")


def read_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_dataset(directory) -> Dataset:
    manifest = read_manifest(directory)
    bnames = tuple(manifest["classes"]["boundary"])
    rnames = tuple(manifest["classes"]["room"])
    samples = [load_sample(os.path.join(directory, sample_name(i)), len(bnames), len(rnames))
               for i in range(int(manifest["count"]))]
    ds = Dataset.from_samples(samples)
    ds.boundary_classes, ds.room_classes = bnames, rnames
    return ds
