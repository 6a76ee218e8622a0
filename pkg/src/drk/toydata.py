"""Synthetic referring-segmentation scenes of coloured shapes.

Each scene holds one referred shape plus 1-4 distractors, all disjoint. The
attribute vector (shape, colour, size bucket, quadrant; 15 dims, one-hot per
field) stands in for a text embedding and singles out exactly one shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor
from .errors import FormatError, GenerationError, ValidationError
from .tensor import Rng

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.9, 0.9, 0.1),
    "magenta": (0.8, 0.1, 0.8),
    "cyan": (0.1, 0.8, 0.8),
}
COLOR_NAMES = tuple(COLORS)
SIZES = ("small", "large")
QUADRANTS = ("TL", "TR", "BL", "BR")
ATTR_DIM = len(SHAPES) + len(COLORS) + len(SIZES) + len(QUADRANTS)

# half-extent of a shape as a fraction of the image side, per size bucket
SIZE_RANGES = {"small": (0.08, 0.10), "large": (0.15, 0.19)}
BACKGROUND = 0.1
NOISE_STD = 0.02
MAX_RETRIES = 100


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 1000
    size: int = 64
    min_distractors: int = 1
    max_distractors: int = 4
    seed: int = 0
    fg_bounds: tuple[float, float] = (0.01, 0.25)

    def validate(self):
        if self.n_samples < 1:
            raise ValidationError("n_samples must be at least 1")
        if self.size < 16:
            raise ValidationError("image size must be at least 16")
        if not 0 <= self.min_distractors <= self.max_distractors:
            raise ValidationError("distractor bounds must satisfy 0 <= min <= max")
        lo, hi = self.fg_bounds
        if not 0 < lo < hi < 1:
            raise ValidationError("foreground bounds must satisfy 0 < lower < upper < 1")


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    size: str
    quadrant: str
    cy: float
    cx: float
    radius: float

    @property
    def attributes(self) -> tuple[str, str, str, str]:
        return (self.kind, self.color, self.size, self.quadrant)

    def raster(self, h: int, w: int) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy, dx, r = yy - self.cy, xx - self.cx, self.radius
        if self.kind == "circle":
            return dy * dy + dx * dx <= r * r
        if self.kind == "square":
            return (np.abs(dy) <= r) & (np.abs(dx) <= r)
        # upright isosceles triangle inside the [-r, r] box
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)

    def bbox(self) -> tuple[float, float, float, float]:
        r = self.radius
        return (self.cy - r, self.cx - r, self.cy + r, self.cx + r)


@dataclass
class ToySample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    attr: np.ndarray  # [ATTR_DIM] float32
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    sample_id: str
    scene: list[Shape] | None = field(default=None, compare=False)
    referent: int | None = field(default=None, compare=False)

    def same_data(self, other: "ToySample") -> bool:
        return (
            self.sample_id == other.sample_id
            and np.array_equal(self.image, other.image)
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.attr, other.attr)
            and np.array_equal(self.mask, other.mask)
        )


def encode_attributes(kind: str, color: str, size: str, quadrant: str) -> np.ndarray:
    vec = np.zeros(ATTR_DIM, dtype=np.float32)
    vec[SHAPES.index(kind)] = 1
    vec[len(SHAPES) + COLOR_NAMES.index(color)] = 1
    vec[len(SHAPES) + len(COLORS) + SIZES.index(size)] = 1
    vec[len(SHAPES) + len(COLORS) + len(SIZES) + QUADRANTS.index(quadrant)] = 1
    return vec


def decode_attributes(vec) -> tuple[str, str, str, str]:
    vec = np.asarray(vec)
    a = len(SHAPES)
    b = a + len(COLORS)
    c = b + len(SIZES)
    return (
        SHAPES[int(np.argmax(vec[:a]))],
        COLOR_NAMES[int(np.argmax(vec[a:b]))],
        SIZES[int(np.argmax(vec[b:c]))],
        QUADRANTS[int(np.argmax(vec[c:]))],
    )


def _random_tuple(gen: np.random.Generator):
    return (
        SHAPES[gen.integers(len(SHAPES))],
        COLOR_NAMES[gen.integers(len(COLORS))],
        SIZES[gen.integers(len(SIZES))],
        QUADRANTS[gen.integers(len(QUADRANTS))],
    )


def _place(gen, attrs, side):
    kind, color, size, quadrant = attrs
    lo, hi = SIZE_RANGES[size]
    r = gen.uniform(lo, hi) * side
    half = side / 2
    bottom = quadrant[0] == "B"
    right = quadrant[1] == "R"
    # centre strictly inside its quadrant and the shape fully inside the image
    y_lo, y_hi = (half, side - 1 - r) if bottom else (r, half - 1e-6)
    x_lo, x_hi = (half, side - 1 - r) if right else (r, half - 1e-6)
    cy = gen.uniform(max(y_lo, r), min(y_hi, side - 1 - r))
    cx = gen.uniform(max(x_lo, r), min(x_hi, side - 1 - r))
    return Shape(kind, color, size, quadrant, float(cy), float(cx), float(r))


def _overlaps(a: Shape, b: Shape, margin=2.0) -> bool:
    ay0, ax0, ay1, ax1 = a.bbox()
    by0, bx0, by1, bx1 = b.bbox()
    return not (ay1 + margin < by0 or by1 + margin < ay0 or ax1 + margin < bx0 or bx1 + margin < ax0)


def _scene(gen, spec: DatasetSpec):
    side = spec.size
    n_distract = int(gen.integers(spec.min_distractors, spec.max_distractors + 1))
    for _ in range(MAX_RETRIES):
        tuples = [_random_tuple(gen)]
        while len(tuples) < n_distract + 1:
            t = _random_tuple(gen)
            if t not in tuples:
                tuples.append(t)
        shapes = []
        for t in tuples:
            for _ in range(MAX_RETRIES):
                s = _place(gen, t, side)
                if not any(_overlaps(s, o) for o in shapes):
                    shapes.append(s)
                    break
            else:
                break
        if len(shapes) != len(tuples):
            continue
        mask = shapes[0].raster(side, side)
        frac = mask.mean()
        if spec.fg_bounds[0] <= frac <= spec.fg_bounds[1]:
            return shapes
    raise GenerationError(
        f"could not place {n_distract + 1} disjoint shapes in a {side}x{side} image "
        f"after {MAX_RETRIES} attempts"
    )


def render(shapes, side: int, gen: np.random.Generator) -> np.ndarray:
    img = np.full((3, side, side), BACKGROUND) + NOISE_STD * gen.standard_normal((3, side, side))
    for s in shapes:
        m = s.raster(side, side)
        for ch, value in enumerate(COLORS[s.color]):
            img[ch][m] = value
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(spec: DatasetSpec) -> list[ToySample]:
    spec.validate()
    gen = Rng(spec.seed).gen
    samples = []
    for i in range(spec.n_samples):
        shapes = _scene(gen, spec)
        # shuffle draw order so the referent is not always painted first
        order = gen.permutation(len(shapes))
        scene = [shapes[j] for j in order]
        referent = int(np.nonzero(order == 0)[0][0])
        image = render(scene, spec.size, gen)
        ref = scene[referent]
        samples.append(
            ToySample(
                image=image,
                attr=encode_attributes(*ref.attributes),
                mask=ref.raster(spec.size, spec.size).astype(np.uint8),
                sample_id=f"s{i:05d}",
                scene=scene,
                referent=referent,
            )
        )
    return samples


def resolve_referent(attr, scene) -> int:
    """Index of the single scene shape whose attributes match ``attr``."""
    target = decode_attributes(attr)
    hits = [i for i, s in enumerate(scene) if s.attributes == target]
    if len(hits) != 1:
        raise ValidationError(f"attribute vector matches {len(hits)} shapes, expected exactly one")
    return hits[0]


# ---------------------------------------------------------------------------
# on-disk layout


def write_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    data = (np.asarray(mask, dtype=np.uint8) * 255).tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data)


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"{path}: unsupported PGM geometry or maxval")
    raster = buf[pos:]
    if len(raster) != w * h:
        raise FormatError(f"{path}: expected {w * h} mask bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    if not np.all((arr == 0) | (arr == 255)):
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return (arr // 255).astype(np.uint8)


def save(samples, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        tensor.save(d / f"{s.sample_id}.img.dten", s.image)
        tensor.save(d / f"{s.sample_id}.attr.dten", s.attr)
        write_pgm(d / f"{s.sample_id}.mask.pgm", s.mask)
    (d / "index.txt").write_text("".join(f"{s.sample_id}\n" for s in samples))


def load(directory) -> list[ToySample]:
    d = Path(directory)
    index = d / "index.txt"
    if not index.is_file():
        raise FormatError(f"{index}: missing dataset index")
    ids = [line.strip() for line in index.read_text().splitlines() if line.strip()]
    samples = []
    for sid in ids:
        image = tensor.load(d / f"{sid}.img.dten")
        attr = tensor.load(d / f"{sid}.attr.dten")
        mask = read_pgm(d / f"{sid}.mask.pgm")
        if image.ndim != 3 or image.shape[0] != 3 or image.shape[1:] != mask.shape:
            raise FormatError(f"{d / (sid + '.img.dten')}: image shape {image.shape} does not match mask {mask.shape}")
        if attr.shape != (ATTR_DIM,):
            raise FormatError(f"{d / (sid + '.attr.dten')}: expected {ATTR_DIM} attributes, got {attr.shape}")
        samples.append(ToySample(image, attr, mask, sid))
    return samples


def foreground_fraction(sample: ToySample) -> float:
    return float(sample.mask.mean())
