"""Radiance RGBE files, synthetic environments, augmentation and batch sampling."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import geometry

LOG_FLOOR = 1e-8


class HDRFormatError(ValueError):
    """Malformed Radiance file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{os.fspath(path)}: " if path is not None else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


@dataclass
class EnvironmentImage:
    """Equirectangular linear-radiance raster; ``mask`` marks observed pixels."""

    pixels: np.ndarray
    mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be H x W x 3, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("pixels contain non-finite values")
        if np.any(self.pixels < 0):
            raise ValueError("radiance must be non-negative")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.pixels.shape[:2]:
                raise ValueError(f"mask shape {self.mask.shape} does not match image {self.pixels.shape[:2]}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_mask(self, mask) -> "EnvironmentImage":
        return EnvironmentImage(self.pixels, mask, dict(self.meta))


@dataclass
class TrainingBatch:
    directions: np.ndarray  # (P, 3)
    log_colors: np.ndarray  # (P, 3)
    image_index: np.ndarray  # (P,)

    @property
    def size(self) -> int:
        return self.directions.shape[0]


# -- RGBE codec ---------------------------------------------------------------


def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    e = rgbe[..., 3].astype(np.int32)
    scale = np.where(e == 0, 0.0, np.ldexp(1.0, e - 136))
    return rgbe[..., :3].astype(np.float64) * scale[..., None]


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if np.any(rgb < 0):
        raise ValueError("radiance must be non-negative")
    v = rgb.max(axis=-1)
    mant, expo = np.frexp(v)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    ok = v > 1e-38
    scale = np.zeros_like(v)
    scale[ok] = mant[ok] * 256.0 / v[ok]
    out[..., :3] = np.clip(np.floor(rgb * scale[..., None]), 0, 255).astype(np.uint8)
    out[..., 3] = np.where(ok, np.clip(expo + 128, 0, 255), 0).astype(np.uint8)
    return out


def _encode_rle_channel(values: np.ndarray) -> bytes:
    out = bytearray()
    n = len(values)
    i = 0
    while i < n:
        run = 1
        while i + run < n and run < 127 and values[i + run] == values[i]:
            run += 1
        if run >= 4:
            out += bytes([128 + run, values[i]])
            i += run
            continue
        start = i
        while i < n and i - start < 128:
            if i + 3 < n and values[i] == values[i + 1] == values[i + 2] == values[i + 3]:
                break
            i += 1
        if i == start:
            i += 1
        out += bytes([i - start]) + values[start:i].tobytes()
    return bytes(out)


def encode_hdr(pixels: np.ndarray, rle: bool = True) -> bytes:
    pixels = np.asarray(pixels)
    H, W = pixels.shape[:2]
    rgbe = float_to_rgbe(pixels)
    parts = [b"#?RADIANCE\n", b"FORMAT=32-bit_rle_rgbe\n\n", f"-Y {H} +X {W}\n".encode("ascii")]
    use_rle = rle and 8 <= W < 32768
    for row in rgbe:
        if not use_rle:
            parts.append(row.tobytes())
            continue
        parts.append(bytes([2, 2, W >> 8, W & 0xFF]))
        for c in range(4):
            parts.append(_encode_rle_channel(np.ascontiguousarray(row[:, c])))
    return b"".join(parts)


def decode_hdr(buf: bytes, path=None) -> np.ndarray:
    """Decode a Radiance byte string into an H x W x 3 float32 array."""
    pos = 0

    def readline() -> str:
        nonlocal pos
        end = buf.find(b"\n", pos)
        if end < 0:
            raise HDRFormatError("unterminated header line", pos, path)
        line = buf[pos:end].decode("latin-1")
        pos = end + 1
        return line

    first = readline()
    if not first.startswith("#?"):
        raise HDRFormatError("missing '#?RADIANCE' signature", 0, path)
    while True:
        start = pos
        line = readline()
        if line == "":
            break
        if line.startswith("FORMAT=") and line.strip() != "FORMAT=32-bit_rle_rgbe":
            raise HDRFormatError(f"unsupported pixel format {line[7:]!r}", start, path)
    start = pos
    res = readline()
    m = re.fullmatch(r"-Y (\d+) \+X (\d+)", res.strip())
    if not m:
        raise HDRFormatError(f"unsupported resolution line {res!r}", start, path)
    H, W = int(m.group(1)), int(m.group(2))

    rgbe = np.zeros((H, W, 4), dtype=np.uint8)
    data = np.frombuffer(buf, dtype=np.uint8)
    n = len(data)
    for y in range(H):
        if pos + 4 > n:
            raise HDRFormatError(f"truncated scanline {y}", pos, path)
        head = data[pos : pos + 4]
        is_rle = 8 <= W < 32768 and head[0] == 2 and head[1] == 2 and not (head[2] & 0x80)
        if not is_rle:
            if pos + 4 * W > n:
                raise HDRFormatError(f"truncated flat scanline {y}", pos, path)
            rgbe[y] = data[pos : pos + 4 * W].reshape(W, 4)
            pos += 4 * W
            continue
        if (int(head[2]) << 8 | int(head[3])) != W:
            raise HDRFormatError(f"scanline {y} width mismatch", pos, path)
        pos += 4
        for c in range(4):
            x = 0
            while x < W:
                if pos >= n:
                    raise HDRFormatError(f"truncated run-length data in scanline {y}", pos, path)
                count = int(data[pos])
                if count > 128:
                    count -= 128
                    if x + count > W or pos + 1 >= n:
                        raise HDRFormatError(f"bad run in scanline {y}", pos, path)
                    rgbe[y, x : x + count, c] = data[pos + 1]
                    pos += 2
                else:
                    if count == 0 or x + count > W or pos + 1 + count > n:
                        raise HDRFormatError(f"bad literal block in scanline {y}", pos, path)
                    rgbe[y, x : x + count, c] = data[pos + 1 : pos + 1 + count]
                    pos += 1 + count
                x += count
    return rgbe_to_float(rgbe).astype(np.float32)


def load_hdr(path) -> EnvironmentImage:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise OSError(f"cannot read {os.fspath(path)!r}: {exc.strerror}") from exc
    return EnvironmentImage(decode_hdr(buf, path), meta={"source": os.fspath(path)})


def save_hdr(image, path, rle: bool = True) -> None:
    pixels = image.pixels if isinstance(image, EnvironmentImage) else np.asarray(image)
    data = encode_hdr(pixels, rle=rle)
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as exc:
        raise OSError(f"cannot write {os.fspath(path)!r}: {exc.strerror}") from exc


def save_png(ldr: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(ldr) * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(arr).save(path)
    except OSError as exc:
        raise OSError(f"cannot write {os.fspath(path)!r}: {exc}") from exc


def save_png_tonemapped(image, path, exposure: float = 1.0) -> None:
    from .evaluation import tone_map

    pixels = image.pixels if isinstance(image, EnvironmentImage) else np.asarray(image)
    save_png(tone_map(pixels, np.log(exposure)), path)


def load_mask_png(path) -> np.ndarray:
    """Single-channel PNG mask; zero pixels are hidden, everything else observed."""
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise OSError(f"cannot read mask {os.fspath(path)!r}: {exc}") from exc
    return np.asarray(img.convert("L")) > 0


# -- synthetic environments ---------------------------------------------------


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def generate_synthetic_env(seed: int, H: int = 32, W: int = 64) -> EnvironmentImage:
    """Sky-over-ground environment with one HDR sun above the horizon."""
    if H < 8 or W < 8:
        raise ValueError(f"synthetic environments need H, W >= 8, got {H}x{W}")
    rng = np.random.default_rng(seed)
    sun_theta = rng.uniform(0.0, 2.0 * np.pi)
    sun_elev = rng.uniform(np.radians(8.0), np.radians(65.0))
    sun_peak = _log_uniform(rng, 1e2, 1e4)
    exposure = _log_uniform(rng, 0.1, 10.0)
    zenith = np.array([0.18, 0.35, 0.95]) * rng.uniform(0.5, 1.0)
    horizon = np.array([1.0, 0.97, 0.92]) * rng.uniform(0.8, 1.3)
    green = rng.uniform(0.0, 1.0)
    ground = (green * np.array([0.12, 0.25, 0.08]) + (1 - green) * np.array([0.32, 0.22, 0.12])) * rng.uniform(0.5, 1.5)
    haze = rng.uniform(0.5, 3.0)
    glow = rng.uniform(0.5, 4.0)

    d = geometry.equirect_directions(H, W)
    elev = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    sun_dir = geometry.spherical_to_direction(np.pi / 2 - sun_elev, sun_theta)
    angle = np.arccos(np.clip(d @ sun_dir, -1.0, 1.0))

    t = np.clip(np.sin(np.maximum(elev, 0.0)), 0.0, 1.0) ** (1.0 / haze)
    sky = horizon * (1 - t[..., None]) + zenith * t[..., None]
    sky = sky + glow * np.exp(-(angle**2) / (2 * 0.35**2))[..., None] * np.array([1.0, 0.9, 0.7])
    fade = np.clip(1.0 + 0.6 * np.sin(np.minimum(elev, 0.0)), 0.2, 1.0)
    below = ground * fade[..., None]
    pixels = np.where((elev >= 0)[..., None], sky, below)

    # the disc always covers the pixel centre nearest the sun
    radius = 1.1 * np.sqrt(2.0) * max(np.pi / (2 * H), np.pi / W)
    disc = angle <= radius
    pixels[disc] = sun_peak * np.array([1.0, 0.95, 0.85])
    pixels = pixels * exposure
    meta = {"seed": seed, "sun_direction": sun_dir, "sun_peak": sun_peak, "exposure": exposure}
    return EnvironmentImage(pixels.astype(np.float32), meta=meta)


# -- augmentation -------------------------------------------------------------


def hflip(image: EnvironmentImage) -> EnvironmentImage:
    mask = None if image.mask is None else image.mask[:, ::-1]
    return EnvironmentImage(image.pixels[:, ::-1].copy(), None if mask is None else mask.copy(), dict(image.meta))


def az_rotate(image: EnvironmentImage, k: int) -> EnvironmentImage:
    """Circular shift by ``k`` columns: content at azimuth t moves to t + 2 pi k / W.

    Equivalent to ``rotate_environment(image, az_rotation_matrix(k, W))``.
    """
    mask = None if image.mask is None else np.roll(image.mask, k, axis=1)
    return EnvironmentImage(np.roll(image.pixels, k, axis=1), mask, dict(image.meta))


def az_rotation_matrix(k: float, W: int) -> np.ndarray:
    return geometry.rotation_y(-2.0 * np.pi * k / W)


def augment(image: EnvironmentImage, kind: str, k: int = 0) -> EnvironmentImage:
    if kind == "hflip":
        return hflip(image)
    if kind == "az_rotate":
        return az_rotate(image, k)
    raise ValueError(f"unknown augmentation {kind!r}")


# -- lookup and sampling ------------------------------------------------------


def bilinear_lookup(pixels: np.ndarray, directions: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Bilinear radiance at continuous directions; azimuth wraps, rows clamp.

    With ``mask`` (H x W, True = observed) hidden corners get zero weight and
    the remaining weights are renormalised, so hidden pixels never leak into
    the result.  A direction whose four corners are all hidden returns zeros.
    """
    H, W = pixels.shape[:2]
    r, c = geometry.direction_to_pixel(directions, H, W)
    r = np.clip(r, 0.0, H - 1.0)
    r0 = np.floor(r).astype(np.int64)
    r1 = np.minimum(r0 + 1, H - 1)
    fr = r - r0
    c0f = np.floor(c)
    fc = c - c0f
    c0 = np.mod(c0f.astype(np.int64), W)
    c1 = np.mod(c0 + 1, W)
    corners = [(r0, c0, (1 - fr) * (1 - fc)), (r0, c1, (1 - fr) * fc), (r1, c0, fr * (1 - fc)), (r1, c1, fr * fc)]
    if mask is not None:
        corners = [(rr, cc, w * mask[rr, cc]) for rr, cc, w in corners]
    total = sum(w for _, _, w in corners)
    out = sum(pixels[rr, cc] * w[..., None] for rr, cc, w in corners)
    if mask is None:
        return out
    return np.where(total[..., None] > 0, out / np.maximum(total, 1e-300)[..., None], 0.0)


def nearest_mask(mask: np.ndarray, directions: np.ndarray) -> np.ndarray:
    H, W = mask.shape
    r, c = geometry.direction_to_pixel(directions, H, W)
    r = np.clip(np.round(r).astype(np.int64), 0, H - 1)
    c = np.mod(np.round(c).astype(np.int64), W)
    return mask[r, c]


def rotate_environment(image: EnvironmentImage, R: np.ndarray) -> EnvironmentImage:
    """Resample so that the new image seen along ``R d`` equals the old one along ``d``."""
    d = geometry.equirect_directions(image.height, image.width)
    src = d @ np.asarray(R)  # row-vector form of R^T d
    pixels = bilinear_lookup(image.pixels.astype(np.float64), src)
    mask = None if image.mask is None else nearest_mask(image.mask, src)
    return EnvironmentImage(np.maximum(pixels, 0.0).astype(np.float32), mask, dict(image.meta))


def sample_observed_directions(image: EnvironmentImage, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform directions restricted by rejection to observed pixels."""
    if image.mask is None:
        return geometry.sample_directions(count, rng)
    if not image.mask.any():
        raise ValueError("image mask hides every pixel; nothing to sample")
    out = np.empty((count, 3))
    filled = 0
    for _ in range(10_000):
        d = geometry.sample_directions(max(2 * (count - filled), 16), rng)
        keep = d[nearest_mask(image.mask, d)][: count - filled]
        out[filled : filled + len(keep)] = keep
        filled += len(keep)
        if filled == count:
            return out
    raise RuntimeError("rejection sampling against the mask did not terminate")


def log_radiance(pixels: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(pixels, LOG_FLOOR))


def sample_training_batch(images, P: int, rng) -> TrainingBatch:
    """``P`` direction/log-colour pairs spread uniformly over ``images``."""
    if len(images) == 0:
        raise ValueError("need at least one image")
    if P < 1:
        raise ValueError(f"batch size must be >= 1, got {P}")
    for i, img in enumerate(images):
        if img.mask is not None and not img.mask.any():
            raise ValueError(f"image {i} is fully masked")
    rng = np.random.default_rng(rng)
    index = rng.integers(0, len(images), size=P)
    directions = np.empty((P, 3))
    colors = np.empty((P, 3))
    for i in np.unique(index):
        sel = np.nonzero(index == i)[0]
        d = sample_observed_directions(images[i], len(sel), rng)
        directions[sel] = d
        colors[sel] = bilinear_lookup(images[i].pixels.astype(np.float64), d, images[i].mask)
    return TrainingBatch(directions, log_radiance(colors), index)
