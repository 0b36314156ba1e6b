"""Procedural training layouts and the canonical evaluation structures."""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .core import make_rng
from .exceptions import InvalidInputError, InvalidSpecError
from .validation import check_mask

STRUCTURE_KINDS = ("cross25", "cross50", "cross100", "square", "target50", "target100")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the Fourier-spectrum pattern generator.

    Frequencies are in cycles per image. ``amplitude_law`` is ``"uniform"``
    (amplitudes ~ U(0, 1)) or ``"gaussian"`` (amplitudes ~ |N(0, 1)|).
    """

    size: int = 64
    passband_low: float = 2.0
    passband_high: float = 8.0
    amplitude_law: str = "uniform"
    fill_target: float = 0.5
    min_feature_px: int = 3
    cleanup_iterations: int = 1

    def __post_init__(self):
        if self.size < 2:
            raise InvalidSpecError("size must be at least 2")
        if not 0 <= self.passband_low < self.passband_high <= self.size / 2:
            raise InvalidSpecError(
                "need 0 <= passband_low < passband_high <= size/2, got "
                f"[{self.passband_low}, {self.passband_high}] for size {self.size}")
        if self.amplitude_law not in ("uniform", "gaussian"):
            raise InvalidSpecError(f"unknown amplitude_law {self.amplitude_law!r}")
        if not 0 < self.fill_target < 1:
            raise InvalidSpecError("fill_target must lie in (0, 1)")
        if self.min_feature_px < 1:
            raise InvalidSpecError("min_feature_px must be >= 1")
        if self.cleanup_iterations < 0:
            raise InvalidSpecError("cleanup_iterations must be >= 0")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidSpecError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


def disk(radius):
    """Boolean disk structuring element of the given integer radius."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def _reflect_morph(mask, footprint, op):
    r = footprint.shape[0] // 2
    padded = np.pad(mask.astype(bool), r, mode="reflect" if min(mask.shape) > r else "edge")
    out = op(padded, structure=footprint)
    return out[r:r + mask.shape[0], r:r + mask.shape[1]]


def morph_open_close(mask, radius, iterations=1):
    """Apply ``iterations`` rounds of opening followed by closing with a disk.

    Borders are handled by reflection so features touching the canvas edge
    are not eroded away.
    """
    out = np.asarray(mask, dtype=bool)
    if radius < 1:
        return out.astype(np.uint8)
    fp = disk(radius)
    for _ in range(iterations):
        out = _reflect_morph(out, fp, ndimage.binary_opening)
        out = _reflect_morph(out, fp, ndimage.binary_closing)
    return out.astype(np.uint8)


def _annulus(size, low, high):
    f = np.fft.fftfreq(size) * size
    fy, fx = np.meshgrid(f, f, indexing="ij")
    radius = np.hypot(fx, fy)
    return (radius >= low) & (radius <= high)


def synth_fourier_pattern(spec, seed):
    """Random binary layout from band-limited Fourier noise.

    A complex spectrum with random amplitudes and uniform phases is filled
    inside the annulus ``[passband_low, passband_high]`` and symmetrised to be
    Hermitian; its inverse FFT is thresholded at the quantile giving
    ``fill_target`` foreground, then cleaned with morphological open/close
    using a disk of radius ``ceil(min_feature_px / 2)``.
    """
    n = spec.size
    band = _annulus(n, spec.passband_low, spec.passband_high)
    band[0, 0] = False  # DC shifts the level, carries no shape
    if not band.any():
        raise InvalidSpecError(
            f"passband [{spec.passband_low}, {spec.passband_high}] selects no "
            f"frequencies at size {n}")
    rng = make_rng(seed, "fourier", 0)
    if spec.amplitude_law == "uniform":
        amp = rng.uniform(0.0, 1.0, size=(n, n))
    else:
        amp = np.abs(rng.standard_normal(size=(n, n)))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n, n))
    spectrum = np.where(band, amp * np.exp(1j * phase), 0.0)
    # X[k] and conj(X[-k]) averaged -> Hermitian, so the inverse is real
    mirrored = np.conj(np.roll(spectrum[::-1, ::-1], 1, axis=(0, 1)))
    spectrum = 0.5 * (spectrum + mirrored)
    field = np.fft.ifft2(spectrum)
    field = field.real
    level = np.quantile(field, 1.0 - spec.fill_target)
    mask = (field >= level).astype(np.uint8)
    if spec.cleanup_iterations:
        radius = math.ceil(spec.min_feature_px / 2)
        mask = morph_open_close(mask, radius, spec.cleanup_iterations)
    return mask


@dataclass(frozen=True)
class StructureKind:
    """Geometry of one evaluation structure.

    ``arm_width`` defaults to the width encoded in the kind name (25/50/100).
    Set ``region_px``/``arm_width`` explicitly to build scaled-down analogs.
    """

    kind: str
    canvas_px: int = 256
    region_px: int = 200
    arm_width: int = None
    square_side: int = 100
    target_arm_length: int = 120
    ring_thickness: int = None

    def __post_init__(self):
        if self.kind not in STRUCTURE_KINDS:
            raise InvalidInputError(
                f"unknown structure kind {self.kind!r}; expected one of {STRUCTURE_KINDS}")
        if self.canvas_px < self.region_px:
            raise InvalidInputError("canvas_px must be >= region_px")

    @property
    def width(self):
        if self.arm_width is not None:
            return int(self.arm_width)
        digits = "".join(ch for ch in self.kind if ch.isdigit())
        return int(digits) if digits else 0


def _centered(canvas, h, w):
    out = np.zeros((canvas, canvas), dtype=np.uint8)
    top = (canvas - h) // 2
    left = (canvas - w) // 2
    out[top:top + h, left:left + w] = 1
    return out


def _cross(canvas, length, width):
    return _centered(canvas, width, length) | _centered(canvas, length, width)


def make_eval_structure(kind, canvas_px=256, **overrides):
    """Rasterise one of the six evaluation structures, centred on the canvas.

    ``kind`` may be a :class:`StructureKind` or a kind name; keyword
    overrides are forwarded to :class:`StructureKind`.
    """
    if not isinstance(kind, StructureKind):
        kind = StructureKind(kind=str(kind).lower(), canvas_px=canvas_px, **overrides)
    c, region = kind.canvas_px, kind.region_px
    if kind.kind.startswith("cross"):
        return _cross(c, region, kind.width)
    if kind.kind == "square":
        return _centered(c, kind.square_side, kind.square_side)
    # target: centred cross inside a concentric square ring
    w = kind.width
    ring = kind.ring_thickness if kind.ring_thickness is not None else w
    outer = _centered(c, region, region)
    inner_side = region - 2 * ring
    if inner_side > 0:
        outer &= 1 - _centered(c, inner_side, inner_side)
    return outer | _cross(c, kind.target_arm_length, w)


def rot90_cw(mask, k=1):
    """Rotate clockwise by ``k`` quarter turns."""
    return np.rot90(mask, k=-k).copy()


def augment_rotations(pair):
    """Return ``[identity, rot90, rot180, rot270]`` (clockwise) of a layout/outcome pair."""
    layout, outcome = (np.asarray(a) for a in pair)
    for name, arr in (("layout", layout), ("outcome", outcome)):
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise InvalidInputError(f"{name} must be square, got shape {arr.shape}")
    if layout.shape != outcome.shape:
        raise InvalidInputError("layout and outcome must have identical shapes")
    return [(rot90_cw(layout, k), rot90_cw(outcome, k)) for k in range(4)]


def augment_dataset(pairs):
    out = []
    for pair in pairs:
        out.extend(augment_rotations(pair))
    return out


def foreground_fraction(mask):
    return float(check_mask(mask).mean())
