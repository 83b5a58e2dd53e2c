"""Dataset plumbing: grayscale image/mask IO (PGM and PNG), tab-separated
manifests, resize-then-crop augmentation and a synthetic small-target
generator that stands in for real infrared data at desk scale."""

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage


@dataclass
class Sample:
    image: np.ndarray  # float64 in [0,1]
    mask: np.ndarray   # bool
    id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(
                f"sample {self.id!r}: image {self.image.shape} and mask "
                f"{self.mask.shape} dimensions differ")


@dataclass
class Manifest:
    split: str
    entries: list  # (id, image_path, mask_path), paths absolute
    root: str


# ---------------------------------------------------------------------------
# image IO
# ---------------------------------------------------------------------------

def write_pgm(path, arr: np.ndarray):
    """Binary P5; uint8 uses maxval 255, uint16 maxval 65535 (big-endian)."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        maxval, payload = 255, arr.tobytes()
    elif arr.dtype == np.uint16:
        maxval, payload = 65535, arr.astype(">u2").tobytes()
    else:
        raise ValueError(f"write_pgm: expected uint8 or uint16, got {arr.dtype}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(payload)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic = tokens[0]
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P2":
        values = np.array(data[pos:].split(), dtype=np.uint16 if maxval > 255 else np.uint8)
        return values.reshape(h, w)
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        if maxval > 255:
            return np.frombuffer(data, dtype=">u2", count=h * w, offset=pos).astype(np.uint16).reshape(h, w)
        return np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)
    raise ValueError(f"{path}: unsupported PGM magic {magic!r}")


def _read_raster(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".pgm", ".pnm"):
        return read_pgm(path)
    if ext == ".png":
        img = Image.open(path)
        arr = np.asarray(img)
        if arr.ndim == 3:
            raise ValueError(f"{path}: expected grayscale, got {arr.shape}")
        return arr.astype(np.uint16) if arr.dtype.itemsize > 1 else arr.astype(np.uint8)
    raise ValueError(f"{path}: unsupported image format {ext!r}")


def _write_raster(path, arr: np.ndarray):
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".pgm", ".pnm"):
        write_pgm(path, arr)
    elif ext == ".png":
        mode = "I;16" if arr.dtype == np.uint16 else "L"
        Image.fromarray(arr, mode=mode).save(path)
    else:
        raise ValueError(f"{path}: unsupported image format {ext!r}")


def load_image(path) -> np.ndarray:
    """Grayscale raster as float64 in [0,1] (normalized by the bit depth)."""
    arr = _read_raster(path)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


def load_mask(path) -> np.ndarray:
    return _read_raster(path) > 0


def save_sample(sample: Sample, image_path, mask_path, bits: int = 8):
    if bits == 8:
        image = np.round(sample.image * 255.0).astype(np.uint8)
    elif bits == 16:
        image = np.round(sample.image * 65535.0).astype(np.uint16)
    else:
        raise ValueError(f"bit depth must be 8 or 16, got {bits}")
    _write_raster(image_path, image)
    _write_raster(mask_path, np.where(sample.mask, 255, 0).astype(np.uint8))


# ---------------------------------------------------------------------------
# manifests: one `id<TAB>image<TAB>mask` line per entry, paths relative
# to the manifest file
# ---------------------------------------------------------------------------

def write_manifest(path, entries):
    with open(path, "w") as fh:
        for sample_id, image_rel, mask_rel in entries:
            fh.write(f"{sample_id}\t{image_rel}\t{mask_rel}\n")


def load_manifest(path, split: str | None = None) -> Manifest:
    root = os.path.dirname(os.path.abspath(path))
    if split is None:
        split = os.path.splitext(os.path.basename(path))[0]
    entries = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: malformed manifest line {line!r}")
            sample_id, image_rel, mask_rel = parts
            entries.append((sample_id, os.path.join(root, image_rel),
                            os.path.join(root, mask_rel)))
    return Manifest(split, entries, root)


def load_sample(entry) -> Sample:
    sample_id, image_path, mask_path = entry
    return Sample(load_image(image_path), load_mask(mask_path), sample_id)


def load_split(data_dir, split: str) -> list:
    manifest = load_manifest(os.path.join(data_dir, f"{split}.tsv"), split)
    return [load_sample(e) for e in manifest.entries]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bottom = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    ys = np.clip(np.rint((np.arange(out_h) + 0.5) * (h / out_h) - 0.5), 0, h - 1).astype(int)
    xs = np.clip(np.rint((np.arange(out_w) + 0.5) * (w / out_w) - 0.5), 0, w - 1).astype(int)
    return mask[np.ix_(ys, xs)]


def augment(sample: Sample, resize_to: int, crop_to: int, rng: np.random.Generator,
            keep_target_tries: int = 0) -> Sample:
    """Bilinear-resize the image (nearest for the mask) to resize_to, then
    take an aligned random crop_to crop. When keep_target_tries > 0 and the
    original mask is non-empty, crops losing every target pixel are re-drawn
    up to that many times, then accepted."""
    if crop_to > resize_to:
        raise ValueError(f"crop size {crop_to} exceeds resize size {resize_to}")
    image = resize_bilinear(sample.image, resize_to, resize_to)
    mask = resize_nearest(sample.mask, resize_to, resize_to)
    span = resize_to - crop_to + 1
    tries = max(1, keep_target_tries + 1) if sample.mask.any() else 1
    for _ in range(tries):
        oy = int(rng.integers(0, span))
        ox = int(rng.integers(0, span))
        mask_crop = mask[oy:oy + crop_to, ox:ox + crop_to]
        if mask_crop.any() or not sample.mask.any():
            break
    return Sample(image[oy:oy + crop_to, ox:ox + crop_to].copy(), mask_crop.copy(), sample.id)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

BACKGROUND_KINDS = ("flat", "gradient", "cloud")


@dataclass
class SynthConfig:
    count: int = 200
    size: int = 64
    targets: tuple = (1, 3)           # inclusive range per image
    amplitude: tuple = (0.3, 0.6)
    sigma: tuple = (0.8, 1.8)         # px; >= 0.75 keeps the argmax inside the mask
    background: str = "cloud"
    clutter: float = 0.03
    seed: int = 0
    margin: float | None = None       # border keep-out; default 3*sigma + 1

    def __post_init__(self):
        if self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")
        if self.background not in BACKGROUND_KINDS:
            raise ValueError(f"background must be one of {BACKGROUND_KINDS}")
        if self.sigma[0] < 0.75:
            raise ValueError("sigma lower bound must be >= 0.75 px so the target "
                             "argmax pixel stays above half amplitude")
        if self.clutter > self.amplitude[0] / 2:
            raise ValueError("clutter must not exceed half the smallest amplitude")


def _background(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    level = rng.uniform(0.1, 0.35)
    if kind == "flat":
        return np.full((size, size), level)
    if kind == "gradient":
        angle = rng.uniform(0, 2 * math.pi)
        ii, jj = np.mgrid[0:size, 0:size]
        ramp = (math.cos(angle) * ii + math.sin(angle) * jj) / size
        return level + rng.uniform(0.05, 0.15) * (ramp - ramp.min())
    smooth = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 8.0)
    smooth = (smooth - smooth.min()) / max(float(np.ptp(smooth)), 1e-12)
    return level + rng.uniform(0.05, 0.2) * smooth


def render_sample(cfg: SynthConfig, index: int, rng: np.random.Generator) -> Sample:
    """One image: Gaussian blobs (clipped at 3 sigma) on the background plus
    noise; the mask marks pixels whose target contribution exceeds half the
    target's amplitude."""
    size = cfg.size
    image = _background(cfg.background, size, rng)
    mask = np.zeros((size, size), dtype=bool)
    n_targets = int(rng.integers(cfg.targets[0], cfg.targets[1] + 1))
    ii, jj = np.mgrid[0:size, 0:size]
    for _ in range(n_targets):
        sigma = rng.uniform(*cfg.sigma)
        amp = rng.uniform(*cfg.amplitude)
        margin = cfg.margin if cfg.margin is not None else 3.0 * sigma + 1.0
        cy = rng.uniform(margin, size - 1 - margin)
        cx = rng.uniform(margin, size - 1 - margin)
        r2 = (ii - cy) ** 2 + (jj - cx) ** 2
        blob = amp * np.exp(-r2 / (2.0 * sigma * sigma))
        blob[r2 > (3.0 * sigma) ** 2] = 0.0
        image = image + blob
        mask |= blob > amp / 2.0
    if cfg.clutter > 0:
        image = image + rng.normal(scale=cfg.clutter, size=(size, size))
    return Sample(np.clip(image, 0.0, 1.0), mask, f"synth_{index:05d}")


def split_counts(total: int, spec) -> tuple:
    """Counts per split from explicit counts or from ratios over `total`."""
    values = tuple(spec)
    if all(isinstance(v, (int, np.integer)) or float(v) > 1 for v in values):
        counts = tuple(int(v) for v in values)
        if sum(counts) != total:
            raise ValueError(f"split counts {counts} do not sum to {total}")
        return counts
    n_train = round(total * float(values[0]))
    n_val = round(total * float(values[1]))
    return (n_train, n_val, total - n_train - n_val)


def synth_dataset(cfg: SynthConfig, out_dir, split=(0.5, 0.2, 0.3)) -> dict:
    """Write images/, masks/ and {train,val,test}.tsv under out_dir.

    Deterministic under cfg.seed: identical bytes across runs.
    """
    if cfg.count == 0:
        raise ValueError("empty dataset requested")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    entries = []
    for index in range(cfg.count):
        rng = np.random.default_rng((cfg.seed, index))  # parallel-safe per-index stream
        sample = render_sample(cfg, index, rng)
        image_rel = os.path.join("images", f"{sample.id}.pgm")
        mask_rel = os.path.join("masks", f"{sample.id}.pgm")
        save_sample(sample, os.path.join(out_dir, image_rel), os.path.join(out_dir, mask_rel))
        entries.append((sample.id, image_rel, mask_rel))
    n_train, n_val, n_test = split_counts(cfg.count, split)
    parts = {
        "train": entries[:n_train],
        "val": entries[n_train:n_train + n_val],
        "test": entries[n_train + n_val:n_train + n_val + n_test],
    }
    for name, part in parts.items():
        write_manifest(os.path.join(out_dir, f"{name}.tsv"), part)
    return {name: len(part) for name, part in parts.items()}
