"""Raster types, seed derivation, PNG codecs and dataset manifests."""

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import InvalidInputError, UnsupportedFormatError
from .validation import check_gray, check_mask

MANIFEST_FORMAT_VERSION = 1
_U64 = (1 << 64) - 1


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------

def child_seed(seed, label, index=0):
    """Derive a stable 64-bit child seed from ``(seed, label, index)``.

    Uses BLAKE2b over a fixed-width little-endian encoding, so the result
    does not depend on platform, Python hash randomisation or numpy version.
    """
    seed = int(seed)
    index = int(index)
    if not 0 <= seed <= _U64:
        raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if not 0 <= index <= _U64:
        raise InvalidInputError(f"index must be a 64-bit unsigned integer, got {index}")
    payload = struct.pack("<Q", seed) + label.encode("utf-8") + b"\x00" + struct.pack("<Q", index)
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return struct.unpack("<Q", digest)[0]


def make_rng(seed, label=None, index=0):
    """numpy Generator for ``seed``, or for its child stream when ``label`` is given."""
    if label is not None:
        seed = child_seed(seed, label, index)
    return np.random.Generator(np.random.PCG64(int(seed)))


# --------------------------------------------------------------------------
# raster operations
# --------------------------------------------------------------------------

def binarize(image, threshold=0.5):
    """Threshold a gray image; a pixel is foreground iff ``value >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError(f"threshold must lie in (0, 1), got {threshold}")
    arr = check_gray(image)
    return (arr >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class Histogram:
    """Discrete distribution over uniform intensity bins on [0, 1]."""

    bin_edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        mass = np.asarray(self.mass, dtype=np.float64)
        if edges.ndim != 1 or mass.ndim != 1 or len(edges) != len(mass) + 1:
            raise InvalidInputError("histogram needs len(bin_edges) == len(mass) + 1")
        if np.any(np.diff(edges) <= 0):
            raise InvalidInputError("bin_edges must be strictly increasing")
        if np.any(mass < 0) or not np.all(np.isfinite(mass)):
            raise InvalidInputError("histogram mass must be finite and non-negative")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "mass", mass)

    @property
    def bin_count(self):
        return len(self.mass)

    @property
    def centers(self):
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def same_binning(self, other):
        return self.bin_edges.shape == other.bin_edges.shape and np.array_equal(
            self.bin_edges, other.bin_edges)


# --------------------------------------------------------------------------
# PNG codecs
# --------------------------------------------------------------------------

def encode_mask(mask):
    """Encode a mask as 8-bit grayscale PNG bytes (0 -> 0, 1 -> 255)."""
    mask = check_mask(mask)
    buf = io.BytesIO()
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _decode_l(data):
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:  # PIL raises a zoo of types on corrupt data
        raise UnsupportedFormatError(f"cannot decode PNG: {exc}") from exc
    if img.format != "PNG":
        raise UnsupportedFormatError(f"expected PNG, got {img.format}")
    if img.mode == "1":
        img = img.convert("L")
    if img.mode != "L":
        raise UnsupportedFormatError(
            f"only 8-bit grayscale PNG is supported, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.uint8)


def decode_mask(data):
    """Decode PNG bytes to a mask; pixels >= 128 become 1."""
    return (_decode_l(data) >= 128).astype(np.uint8)


def encode_gray(image):
    """Encode a gray image as 8-bit PNG, storing round(value * 255)."""
    image = check_gray(image)
    buf = io.BytesIO()
    Image.fromarray(np.rint(image * 255.0).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_gray(data):
    return _decode_l(data).astype(np.float64) / 255.0


def save_mask(path, mask):
    Path(path).write_bytes(encode_mask(mask))


def load_mask(path):
    return decode_mask(Path(path).read_bytes())


def save_gray(path, image):
    Path(path).write_bytes(encode_gray(image))


def load_gray(path):
    return decode_gray(Path(path).read_bytes())


# --------------------------------------------------------------------------
# dataset manifests
# --------------------------------------------------------------------------

@dataclass
class ManifestPair:
    layout_path: str
    fabricated_paths: list
    structure_id: str
    seed: int = 0


@dataclass
class DatasetManifest:
    """JSON manifest listing layout/fabricated-outcome pairs.

    Paths are stored relative to the manifest's directory (``root``), which
    is not serialised.
    """

    pairs: list = field(default_factory=list)
    resolution_nm_per_px: float = 1.0
    format_version: int = MANIFEST_FORMAT_VERSION
    root: Path = field(default=Path("."), compare=False, repr=False)

    @classmethod
    def from_dict(cls, data, root="."):
        pairs = [ManifestPair(**p) for p in data.get("pairs", [])]
        return cls(pairs=pairs,
                   resolution_nm_per_px=data.get("resolution_nm_per_px", 1.0),
                   format_version=data.get("format_version", MANIFEST_FORMAT_VERSION),
                   root=Path(root))

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls.from_dict(data, root=path.parent)

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "resolution_nm_per_px": self.resolution_nm_per_px,
            "pairs": [asdict(p) for p in self.pairs],
        }

    def save(self, path):
        path = Path(path)
        self.root = path.parent
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def resolve(self, rel):
        return Path(self.root) / rel

    def load_arrays(self):
        """Return ``(X, Y)`` as float32 arrays of shape (N, H, W).

        A pair with several fabricated outcomes contributes one row per
        outcome.
        """
        problems = validate_manifest(self)
        if problems:
            raise InvalidInputError("invalid manifest: " + "; ".join(problems))
        xs, ys = [], []
        for pair in self.pairs:
            layout = load_mask(self.resolve(pair.layout_path))
            for fab in pair.fabricated_paths:
                xs.append(layout)
                ys.append(load_mask(self.resolve(fab)))
        return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float32)


def write_pair_dataset(out_dir, pairs, manifest_name="manifest.json"):
    """Save ``(structure_id, seed, layout, fabricated_list)`` tuples as PNGs plus a manifest.

    Files are named ``<structure_id>.png`` and ``<structure_id>_fab<k>.png``.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for structure_id, seed, layout, fabricated in pairs:
        layout_name = f"{structure_id}.png"
        save_mask(out_dir / layout_name, layout)
        fab_names = []
        for k, fab in enumerate(fabricated):
            name = f"{structure_id}_fab{k:03d}.png"
            save_mask(out_dir / name, fab)
            fab_names.append(name)
        entries.append(ManifestPair(layout_name, fab_names, structure_id, int(seed)))
    manifest = DatasetManifest(entries)
    path = out_dir / manifest_name
    manifest.save(path)
    return path


def validate_manifest(manifest, require_fabricated=True):
    """List every invariant violation in ``manifest``; empty means valid.

    Layout-only manifests (evaluation structures) pass with
    ``require_fabricated=False``.
    """
    problems = []
    if manifest.format_version != MANIFEST_FORMAT_VERSION:
        problems.append(f"unsupported format_version {manifest.format_version}")
    if not manifest.resolution_nm_per_px or manifest.resolution_nm_per_px <= 0:
        problems.append("resolution_nm_per_px must be positive")
    if not manifest.pairs:
        problems.append("pairs must be non-empty")
        return problems
    for i, pair in enumerate(manifest.pairs):
        if require_fabricated and not pair.fabricated_paths:
            problems.append(f"pair {i}: fabricated_paths must contain at least one path")
        shapes = {}
        for rel in [pair.layout_path, *pair.fabricated_paths]:
            path = manifest.resolve(rel)
            if not os.path.isfile(path):
                problems.append(f"pair {i}: missing file {rel}")
                continue
            try:
                shapes[rel] = load_mask(path).shape
            except Exception as exc:
                problems.append(f"pair {i}: unreadable file {rel} ({exc})")
        if pair.layout_path in shapes:
            ref = shapes[pair.layout_path]
            for rel, shape in shapes.items():
                if shape != ref:
                    problems.append(
                        f"pair {i}: dimension mismatch, layout {ref[1]}x{ref[0]} "
                        f"vs {rel} {shape[1]}x{shape[0]}")
    return problems
