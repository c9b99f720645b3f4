"""Dataset manifests, image decode/encode, cropping, resizing, normalization.

Manifests are JSON Lines, one entry per line:

    {"path": "...", "width": W, "height": H, "label": "real|synthetic",
     "wounds": [{"cx": .., "cy": .., "w": .., "h": ..}]}

Image files are PNG (8-bit RGB or grayscale) or binary PPM/PGM; the
PPM/PGM path is codec-free and handy for fixtures. All operations here
are pure and safe to parallelize across images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .errors import ConfigError, DataError

Array = np.ndarray

LABELS = ("real", "synthetic")


@dataclass
class WoundBox:
    """Axis-aligned wound box: center (cx, cy) and extents (w, h) in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def clamped(self, width: int, height: int) -> "WoundBox":
        x0 = min(max(self.cx - self.w / 2.0, 0.0), float(width))
        x1 = min(max(self.cx + self.w / 2.0, 0.0), float(width))
        y0 = min(max(self.cy - self.h / 2.0, 0.0), float(height))
        y1 = min(max(self.cy + self.h / 2.0, 0.0), float(height))
        return WoundBox(cx=(x0 + x1) / 2.0, cy=(y0 + y1) / 2.0, w=x1 - x0, h=y1 - y0)


@dataclass
class ManifestEntry:
    path: str
    width: int
    height: int
    label: str
    wounds: list[WoundBox] = field(default_factory=list)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def by_label(self, label: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label == label]


@dataclass
class ManifestReport:
    entry_count: int
    wound_histogram: dict[int, int]
    area_fraction_min: float | None
    area_fraction_max: float | None
    missing_files: list[str]

    def lines(self) -> list[str]:
        out = [f"entries: {self.entry_count}"]
        hist = " ".join(f"{k}:{v}" for k, v in sorted(self.wound_histogram.items()))
        out.append(f"wound-count histogram: {hist if hist else '(none)'}")
        if self.area_fraction_min is None:
            out.append("wound area fraction: no wounds annotated")
        else:
            out.append(f"wound area fraction: min {self.area_fraction_min:.6g} "
                       f"max {self.area_fraction_max:.6g}")
        if self.missing_files:
            out.append(f"missing image files: {len(self.missing_files)}")
            out.extend(f"  {p}" for p in self.missing_files)
        return out


_ENTRY_KEYS = {"path", "width", "height", "label", "wounds"}
_BOX_KEYS = {"cx", "cy", "w", "h"}


def _parse_entry(obj: dict, line_no: int) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise DataError(f"manifest line {line_no}: expected an object")
    unknown = set(obj) - _ENTRY_KEYS
    if unknown:
        raise DataError(f"manifest line {line_no}: unknown keys {sorted(unknown)}")
    missing = _ENTRY_KEYS - set(obj)
    if missing:
        raise DataError(f"manifest line {line_no}: missing keys {sorted(missing)}")
    if obj["label"] not in LABELS:
        raise DataError(f"manifest line {line_no}: label must be one of {LABELS}, "
                        f"got {obj['label']!r}")
    width, height = int(obj["width"]), int(obj["height"])
    if width < 1 or height < 1:
        raise DataError(f"manifest line {line_no}: non-positive image size")
    wounds = []
    for j, box in enumerate(obj["wounds"]):
        if not isinstance(box, dict) or set(box) != _BOX_KEYS:
            raise DataError(f"manifest line {line_no}: wound {j} must have keys {sorted(_BOX_KEYS)}")
        if box["w"] < 0 or box["h"] < 0:
            raise DataError(f"manifest line {line_no}: wound {j} has negative extent")
        wounds.append(WoundBox(float(box["cx"]), float(box["cy"]),
                               float(box["w"]), float(box["h"])).clamped(width, height))
    return ManifestEntry(path=str(obj["path"]), width=width, height=height,
                         label=str(obj["label"]), wounds=wounds)


def load_manifest(path) -> tuple[DatasetManifest, ManifestReport]:
    """Parse a JSON Lines manifest plus a validation report.

    The report carries the wound-count histogram and the min/max wound
    area fraction over entries that have at least one wound. Entries
    whose image file is missing are listed in the report (not fatal).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest file not found: {path}")
    entries: list[ManifestEntry] = []
    seen_paths: set[str] = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise DataError(f"manifest line {line_no}: invalid JSON ({err.msg})") from err
        entry = _parse_entry(obj, line_no)
        if entry.path in seen_paths:
            raise DataError(f"manifest line {line_no}: duplicate path {entry.path!r}")
        seen_paths.add(entry.path)
        entries.append(entry)
    manifest = DatasetManifest(entries=entries, root=path.parent)

    histogram: dict[int, int] = {}
    fractions: list[float] = []
    missing: list[str] = []
    for entry in entries:
        histogram[len(entry.wounds)] = histogram.get(len(entry.wounds), 0) + 1
        if entry.wounds:
            fractions.append(wound_area_fraction(entry.wounds, entry.width, entry.height))
        if not manifest.resolve(entry).exists():
            missing.append(entry.path)
    report = ManifestReport(
        entry_count=len(entries),
        wound_histogram=histogram,
        area_fraction_min=min(fractions) if fractions else None,
        area_fraction_max=max(fractions) if fractions else None,
        missing_files=missing,
    )
    return manifest, report


def save_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({
                "path": e.path, "width": e.width, "height": e.height, "label": e.label,
                "wounds": [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h} for b in e.wounds],
            }) + "\n")


# ---------------------------------------------------------------------------
# image buffers and codecs
# ---------------------------------------------------------------------------

@dataclass
class ImageBuffer:
    """8-bit pixel buffer, grayscale (1 channel) or RGB (3 channels)."""

    width: int
    height: int
    channels: int
    pixels: Array  # uint8, [H, W, C]

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise DataError(f"channels must be 1 or 3, got {self.channels}")
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise DataError(f"pixel buffer shape {self.pixels.shape} does not match "
                            f"{self.height}x{self.width}x{self.channels}")

    @classmethod
    def from_array(cls, pixels: Array) -> "ImageBuffer":
        pixels = np.asarray(pixels)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        h, w, c = pixels.shape
        return cls(width=w, height=h, channels=c, pixels=pixels.astype(np.uint8))


def _read_pnm(path: Path) -> ImageBuffer:
    raw = path.read_bytes()
    if raw[:2] not in (b"P5", b"P6"):
        raise DataError(f"{path}: only binary P5/P6 PNM supported")
    channels = 1 if raw[:2] == b"P5" else 3
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        try:
            fields.append(int(raw[start:pos]))
        except ValueError as err:
            raise DataError(f"{path}: malformed PNM header") from err
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PNM supported (maxval 255), got {maxval}")
    expected = width * height * channels
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=pos)
    if data.size != expected:
        raise DataError(f"{path}: truncated PNM payload")
    return ImageBuffer(width=width, height=height, channels=channels,
                       pixels=data.reshape(height, width, channels).copy())


def _write_pnm(path: Path, img: ImageBuffer) -> None:
    magic = b"P5" if img.channels == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (img.width, img.height))
        fh.write(img.pixels.tobytes())


def read_image(path) -> ImageBuffer:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        return _read_pnm(path)
    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "F"):
            raise DataError(f"{path}: only 8-bit images supported, got mode {im.mode}")
        if im.mode in ("L",):
            arr = np.asarray(im, dtype=np.uint8)[:, :, None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageBuffer.from_array(arr)


def write_image(path, img: ImageBuffer) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        _write_pnm(path, img)
        return
    arr = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    Image.fromarray(arr).save(path, format="PNG")


def encode_png(img: ImageBuffer) -> bytes:
    import io

    arr = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# geometry and normalization
# ---------------------------------------------------------------------------

def crop_centered(img: ImageBuffer, cx: int, cy: int, size: int) -> ImageBuffer:
    """size x size crop centered at (cx, cy), shifted inward at borders.

    The window is clamped, never padded, so crops stay photographic.
    """
    size = int(size)
    if size < 1:
        raise ConfigError(f"crop size must be >= 1, got {size}")
    if size > img.width or size > img.height:
        raise ConfigError(f"crop size {size} exceeds image {img.width}x{img.height}")
    x0 = min(max(int(cx) - size // 2, 0), img.width - size)
    y0 = min(max(int(cy) - size // 2, 0), img.height - size)
    window = img.pixels[y0:y0 + size, x0:x0 + size, :]
    return ImageBuffer(width=size, height=size, channels=img.channels,
                       pixels=window.copy())


def _bilinear_resize(pixels: Array, out_h: int, out_w: int) -> Array:
    """Pixel-center aligned bilinear resize of a float [H, W, C] array."""
    in_h, in_w = pixels.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return pixels.copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = pixels[y0][:, x0] * (1 - wx) + pixels[y0][:, x1] * wx
    bottom = pixels[y1][:, x0] * (1 - wx) + pixels[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def to_model_tensor(img: ImageBuffer, target: int) -> Tensor:
    """Bilinear resize to target x target, then map pixel p -> p/127.5 - 1."""
    target = int(target)
    if target < 1:
        raise ConfigError(f"target size must be >= 1, got {target}")
    resized = _bilinear_resize(img.pixels.astype(np.float64), target, target)
    model = resized / 127.5 - 1.0
    return Tensor(np.ascontiguousarray(model.transpose(2, 0, 1)).astype(np.float32))


def from_model_array(arr: Array) -> ImageBuffer:
    """Inverse of the model-unit mapping: [-1, 1] floats back to 8-bit pixels."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ConfigError(f"expected [C, H, W] array, got shape {arr.shape}")
    pixels = np.clip((arr + 1.0) * 127.5, 0.0, 255.0)
    pixels = np.rint(pixels).astype(np.uint8).transpose(1, 2, 0)
    return ImageBuffer.from_array(pixels)


def wound_area_fraction(wounds, width: int, height: int) -> float:
    """Union area of the (clamped) wound boxes over the image area.

    Overlaps count once, so the result never exceeds 1.0; invariant to
    box ordering and duplicates.
    """
    if width < 1 or height < 1:
        raise ConfigError("image extent must be positive")
    rects = []
    for b in wounds:
        c = b.clamped(width, height) if isinstance(b, WoundBox) else \
            WoundBox(**b).clamped(width, height)
        if c.w > 0 and c.h > 0:
            rects.append((c.cx - c.w / 2.0, c.cy - c.h / 2.0,
                          c.cx + c.w / 2.0, c.cy + c.h / 2.0))
    if not rects:
        return 0.0
    xs = sorted({r[0] for r in rects} | {r[2] for r in rects})
    union = 0.0
    for x_left, x_right in zip(xs[:-1], xs[1:]):
        strip_w = x_right - x_left
        if strip_w <= 0:
            continue
        spans = sorted((r[1], r[3]) for r in rects if r[0] <= x_left and r[2] >= x_right)
        covered = 0.0
        cur_lo = cur_hi = None
        for lo, hi in spans:
            if cur_lo is None:
                cur_lo, cur_hi = lo, hi
            elif lo <= cur_hi:
                cur_hi = max(cur_hi, hi)
            else:
                covered += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
        if cur_lo is not None:
            covered += cur_hi - cur_lo
        union += strip_w * covered
    return union / (width * height)


def manifest_to_model_array(manifest: DatasetManifest, size: int) -> Array:
    """Stack every manifest image as model-unit tensors: [N, C, size, size]."""
    if not manifest.entries:
        raise ConfigError("manifest has no entries")
    arrays = []
    for entry in manifest.entries:
        img = read_image(manifest.resolve(entry))
        arrays.append(to_model_tensor(img, size).data)
    channels = {a.shape[0] for a in arrays}
    if len(channels) != 1:
        raise DataError(f"mixed channel counts in manifest: {sorted(channels)}")
    return np.stack(arrays)
