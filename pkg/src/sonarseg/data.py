"""Synthetic side-scan waterfalls, tiling/stitching, augmentation and dataset I/O."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

IGNORE = 255
CLASS_NAMES = ("sand_ripples", "rocks", "maerl", "fine_sediment")
DEFAULT_CLASS_MIX = (0.506, 0.139, 0.1206, 0.2344)
TILE = 256
STRIDE = 128

# overlay colours, indexed by class id; ignore is black
PALETTE = {
    0: (230, 200, 40),   # sand ripples: yellow
    1: (130, 80, 30),    # rocks: brown
    2: (220, 0, 220),    # maerl: magenta
    3: (128, 128, 128),  # fine sediment: gray
    IGNORE: (0, 0, 0),
}


@dataclass
class Waterfall:
    intensity: np.ndarray  # float32 (H, W) in [0, 1]
    meta: dict = field(default_factory=dict)


def _smooth_field(rng, shape, cell):
    """Low-frequency, unit-variance noise: coarse white noise upsampled to `shape`."""
    h, w = shape
    coarse = rng.standard_normal((h // cell + 3, w // cell + 3))
    coarse = ndimage.gaussian_filter(coarse, 0.8, mode="wrap")
    up = ndimage.zoom(coarse, cell, order=1, mode="nearest", grid_mode=True)[:h, :w]
    return (up - up.mean()) / (up.std() + 1e-12)


def _check_mix(class_mix):
    mix = np.asarray(class_mix, dtype=float)
    if mix.shape != (len(CLASS_NAMES),) or (mix < 0).any() or not math.isclose(mix.sum(), 1.0, abs_tol=1e-6):
        raise ValueError(f"class_mix must be {len(CLASS_NAMES)} non-negative values summing to 1, got {class_mix}")
    return mix


def _partition(rng, shape, mix, cell):
    """Argmax of per-class smooth fields, with offsets tuned until class areas match `mix`."""
    fields = np.stack([_smooth_field(rng, shape, cell) for _ in mix])
    step = max(1, int(math.sqrt(fields[0].size / 65536)))
    sample = fields[:, ::step, ::step]
    offset = np.where(mix > 0, 0.0, -np.inf)
    live = mix > 0
    for _ in range(500):
        labels = np.argmax(sample + offset[:, None, None], axis=0)
        err = mix - np.bincount(labels.ravel(), minlength=len(mix)) / labels.size
        if np.abs(err).max() < 1e-3:
            break
        offset[live] += 1.5 * err[live]
    return np.argmax(fields + offset[:, None, None], axis=0).astype(np.uint8)


def _textures(rng, shape):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)

    theta = rng.uniform(0, np.pi)
    wavelength = rng.uniform(8, 14)
    phase = 2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / wavelength
    phase += 1.5 * _smooth_field(rng, shape, 64)  # gently bent crests
    ripples = 0.5 + 0.28 * np.sin(phase) + 0.05 * rng.standard_normal(shape)

    blobs = ndimage.gaussian_filter(rng.standard_normal(shape), 3.0)
    blobs /= blobs.std() + 1e-12
    bright = blobs > 0.6
    shadow = np.roll(bright, 4, axis=1) & ~bright  # acoustic shadow trails across-track
    rocks = 0.45 + 0.12 * blobs
    rocks[bright] = 0.85
    rocks[shadow] = 0.08

    maerl = 0.55 + 0.22 * rng.standard_normal(shape)

    fine = 0.3 + 0.03 * ndimage.gaussian_filter(rng.standard_normal(shape), 4.0) * 4

    return np.stack([ripples, rocks, maerl, fine]).astype(np.float32)


def generate_synthetic_waterfall(height, width, seed=0, class_mix=DEFAULT_CLASS_MIX):
    """Procedural waterfall with 4 seabed textures; returns (Waterfall, mask)."""
    if height < TILE or width < TILE:
        raise ValueError(f"waterfall must be at least {TILE}x{TILE}, got {height}x{width}")
    mix = _check_mix(class_mix)
    rng = np.random.default_rng(seed)
    shape = (height, width)
    mask = _partition(rng, shape, mix, cell=96)
    tex = _textures(rng, shape)
    img = np.take_along_axis(tex, mask[None].astype(np.intp), axis=0)[0]
    speckle = rng.gamma(8.0, 1.0 / 8.0, size=shape).astype(np.float32)
    img = np.clip(img * speckle, 0.0, 1.0).astype(np.float32)
    meta = {"seed": seed, "class_mix": [float(m) for m in mix], "height": height, "width": width}
    return Waterfall(img, meta), mask


def class_fractions(mask, num_classes=len(CLASS_NAMES)):
    valid = mask[mask != IGNORE]
    return np.bincount(valid.ravel(), minlength=num_classes)[:num_classes] / max(valid.size, 1)


# --- tiling -----------------------------------------------------------------

def tile_origins(length, tile=TILE, stride=STRIDE):
    if length < tile:
        raise ValueError(f"extent {length} is smaller than the tile size {tile}")
    if not 0 < stride <= tile:
        raise ValueError(f"stride must be in (0, tile={tile}], got {stride}")
    n = math.ceil((length - tile) / stride) + 1
    return [min(i * stride, length - tile) for i in range(n)]


@dataclass(frozen=True)
class TileLayout:
    height: int
    width: int
    tile_size: int = TILE
    stride: int = STRIDE

    @property
    def rows(self):
        return tile_origins(self.height, self.tile_size, self.stride)

    @property
    def cols(self):
        return tile_origins(self.width, self.tile_size, self.stride)

    @property
    def origins(self):
        return [(r, c) for r in self.rows for c in self.cols]


def tile_waterfall(image, mask=None, tile=TILE, stride=STRIDE):
    """Cut (image, mask) into overlapping tiles; edge tiles are clamped to the border.

    Returns a list of (image_tile, mask_tile, (row, col)); mask_tile is None without a mask.
    """
    if isinstance(image, Waterfall):
        image = image.intensity
    h, w = image.shape
    if mask is not None and mask.shape != image.shape:
        raise ValueError("image and mask shapes differ")
    layout = TileLayout(h, w, tile, stride)
    out = []
    for r, c in layout.origins:
        sl = np.s_[r:r + tile, c:c + tile]
        out.append((image[sl], None if mask is None else mask[sl], (r, c)))
    return out


def stitch_masks(tiles, out_shape):
    """Majority vote over overlapping mask tiles.

    Ties go to the label of the tile whose centre is nearest the pixel; equal
    distances resolve to the lexicographically first tile origin.
    """
    h, w = out_shape
    tiles = sorted(tiles, key=lambda t: tuple(t[1]))
    labels = sorted({int(v) for m, _ in tiles for v in np.unique(m)})
    index = {lab: i for i, lab in enumerate(labels)}
    lut = np.zeros(256, dtype=np.intp)
    for lab, i in index.items():
        lut[lab] = i

    votes = np.zeros((len(labels), h, w), dtype=np.int32)
    best = np.full((len(labels), h, w), np.inf)  # nearest-centre distance per label
    covered = np.zeros((h, w), dtype=bool)
    for m, (r, c) in tiles:
        th, tw = m.shape
        if r < 0 or c < 0 or r + th > h or c + tw > w:
            raise ValueError(f"tile at {(r, c)} falls outside {out_shape}")
        yy, xx = np.mgrid[r:r + th, c:c + tw]
        dist = (yy + 0.5 - (r + th / 2)) ** 2 + (xx + 0.5 - (c + tw / 2)) ** 2
        idx = lut[m]
        ii, jj = np.mgrid[0:th, 0:tw]
        np.add.at(votes, (idx, ii + r, jj + c), 1)
        cur = best[idx, ii + r, jj + c]
        closer = dist < cur  # strict: earlier origin wins equal distances
        best[idx[closer], (ii + r)[closer], (jj + c)[closer]] = dist[closer]
        covered[r:r + th, c:c + tw] = True
    if not covered.all():
        raise ValueError(f"{(~covered).sum()} pixels are not covered by any tile")

    top = votes.max(axis=0)
    tied = votes == top[None]
    key = np.where(tied, best, np.inf)
    winner = np.argmin(key, axis=0)
    return np.asarray(labels, dtype=np.uint8)[winner]


# --- augmentation -----------------------------------------------------------

def _resize(a, size, resample):
    mode_img = Image.fromarray(a.astype(np.float32), mode="F") if resample != Image.NEAREST else Image.fromarray(a)
    return np.asarray(mode_img.resize((size[1], size[0]), resample=resample))


def augment(image, mask, seed, p=0.5):
    """Random geometric + photometric augmentation of a (tile, mask) pair.

    Geometry is shared by image and mask; photometric ops touch the image only.
    Every op fires independently with probability `p`.
    """
    rng = np.random.default_rng(seed)
    img = np.asarray(image, dtype=np.float32)
    msk = np.asarray(mask, dtype=np.uint8)
    out_shape = img.shape

    if rng.random() < p:
        angle = rng.uniform(-30, 30)
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
        msk = ndimage.rotate(msk, angle, reshape=False, order=0, mode="constant", cval=IGNORE)
    if rng.random() < p:
        scale = rng.uniform(0.5, 1.0)
        ch = max(1, int(round(out_shape[0] * math.sqrt(scale))))
        cw = max(1, int(round(out_shape[1] * math.sqrt(scale))))
        r = rng.integers(0, out_shape[0] - ch + 1)
        c = rng.integers(0, out_shape[1] - cw + 1)
        img = _resize(img[r:r + ch, c:c + cw], out_shape, Image.BILINEAR)
        msk = _resize(msk[r:r + ch, c:c + cw], out_shape, Image.NEAREST)
    if rng.random() < p:
        img, msk = img[:, ::-1], msk[:, ::-1]
    if rng.random() < p:
        img, msk = img[::-1], msk[::-1]
    if rng.random() < p:
        which = rng.integers(0, 3)  # 0 contrast, 1 sharpen, 2 both
        if which in (0, 2):
            factor = rng.uniform(0.75, 1.25)
            img = (img - img.mean()) * factor + img.mean()
        if which in (1, 2):
            amount = rng.uniform(0.2, 1.0)
            img = img + amount * (img - ndimage.gaussian_filter(img, 1.0))
    if rng.random() < p:
        img = ndimage.gaussian_filter(img, rng.uniform(0.1, 1.5))

    img = np.clip(np.ascontiguousarray(img), 0.0, 1.0).astype(np.float32)
    return img, np.ascontiguousarray(msk)


# --- dataset manifests --------------------------------------------------------

@dataclass
class TileRecord:
    image: str
    mask: str
    source_id: int
    origin: tuple[int, int]
    split: str = "train"

    def to_dict(self):
        return {"image": self.image, "mask": self.mask, "source_id": self.source_id,
                "origin": list(self.origin), "split": self.split}

    @classmethod
    def from_dict(cls, d):
        return cls(d["image"], d["mask"], int(d["source_id"]), tuple(d["origin"]), d.get("split", "train"))


@dataclass
class DatasetManifest:
    tiles: list[TileRecord]
    class_frequency: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def split(self, name):
        return [t for t in self.tiles if t.split == name]

    def counts(self):
        out = {"train": 0, "val": 0, "test": 0}
        for t in self.tiles:
            out[t.split] = out.get(t.split, 0) + 1
        return out

    def to_dict(self):
        return {"tiles": [t.to_dict() for t in self.tiles], "class_frequency": self.class_frequency,
                "counts": self.counts(), "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        return cls([TileRecord.from_dict(t) for t in d["tiles"]], d.get("class_frequency", []), d.get("meta", {}))


def split_dataset(manifest, ratios=(0.8, 0.2), test_fraction=0.05, seed=0):
    """Tile-level train/val split plus a test set drawn from held-out source waterfalls.

    Enough whole sources are held out to reach roughly `test_fraction` of the
    train size (at least one), so test tiles never share a waterfall with train/val.
    """
    if len(ratios) != 2 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be two non-negative values summing to 1, got {ratios}")
    sources = sorted({t.source_id for t in manifest.tiles})
    if len(sources) < 2:
        raise ValueError("need tiles from at least 2 source waterfalls to hold out a disjoint test set")
    rng = np.random.default_rng(seed)

    by_source = {s: [t for t in manifest.tiles if t.source_id == s] for s in sources}
    order = list(rng.permutation(sources))
    test_sources = []
    n_test = 0
    target = test_fraction * len(manifest.tiles) * ratios[0]
    while order and len(order) > 1 and (not test_sources or n_test < target):
        s = order.pop()
        test_sources.append(s)
        n_test += len(by_source[s])

    pool = [t for t in manifest.tiles if t.source_id not in test_sources]
    perm = rng.permutation(len(pool))
    n_train = int(round(ratios[0] * len(pool)))
    tiles = []
    for rank, i in enumerate(perm):
        t = pool[i]
        tiles.append(TileRecord(t.image, t.mask, t.source_id, t.origin, "train" if rank < n_train else "val"))
    for s in test_sources:
        tiles += [TileRecord(t.image, t.mask, t.source_id, t.origin, "test") for t in by_source[s]]
    if n_train == len(pool):
        warnings.warn("validation split is empty", stacklevel=2)
    tiles.sort(key=lambda t: (t.source_id, t.origin))
    return DatasetManifest(tiles, list(manifest.class_frequency), dict(manifest.meta))


# --- PNG I/O ------------------------------------------------------------------

def to_uint8(image):
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image):
    Image.fromarray(to_uint8(image), mode="L").save(path)


def load_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def _palette_bytes():
    pal = [0] * 768
    for lab, rgb in PALETTE.items():
        pal[3 * lab:3 * lab + 3] = rgb
    return pal


def save_mask(path, mask):
    im = Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="P")
    im.putpalette(_palette_bytes())
    im.save(path)


def load_mask(path):
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise ValueError(f"{path}: mask must be a palette or grayscale PNG, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def colorize(mask):
    lut = np.zeros((256, 3), dtype=np.uint8)
    for lab, rgb in PALETTE.items():
        lut[lab] = rgb
    return lut[mask]


def overlay(image, mask, alpha=0.45):
    gray = np.repeat(to_uint8(image)[..., None], 3, axis=-1).astype(np.float32)
    color = colorize(mask).astype(np.float32)
    out = (1 - alpha) * gray + alpha * color
    return out.round().astype(np.uint8)


def write_dataset(root, count=4, height=512, width=512, seed=0, class_mix=DEFAULT_CLASS_MIX,
                  ratios=(0.8, 0.2), test_fraction=0.05):
    """Generate `count` waterfalls, tile them and write images/, masks/ and manifest.json."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    hist = np.zeros(len(CLASS_NAMES))
    for src in range(count):
        wf, mask = generate_synthetic_waterfall(height, width, seed=seed * 100003 + src, class_mix=class_mix)
        hist += np.bincount(mask.ravel(), minlength=len(CLASS_NAMES))[:len(CLASS_NAMES)]
        for img, msk, (r, c) in tile_waterfall(wf, mask):
            stem = f"wf{src:03d}_r{r:05d}_c{c:05d}.png"
            save_image(root / "images" / stem, img)
            save_mask(root / "masks" / stem, msk)
            records.append(TileRecord(f"images/{stem}", f"masks/{stem}", src, (r, c)))
    meta = {"seed": seed, "count": count, "height": height, "width": width,
            "class_mix": [float(m) for m in class_mix], "tile": TILE, "stride": STRIDE}
    manifest = DatasetManifest(records, (hist / hist.sum()).tolist(), meta)
    if count >= 2:
        manifest = split_dataset(manifest, ratios, test_fraction, seed=seed)
    else:
        warnings.warn("single waterfall: no disjoint test split, all tiles in train/val", stacklevel=2)
        pool = DatasetManifest(records, manifest.class_frequency, meta)
        rng = np.random.default_rng(seed)
        n_train = int(round(ratios[0] * len(records)))
        for rank, i in enumerate(rng.permutation(len(records))):
            pool.tiles[i].split = "train" if rank < n_train else "val"
        manifest = pool
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2))
    return manifest


def read_manifest(root):
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    return DatasetManifest.from_dict(json.loads(path.read_text()))


def load_split(root, split):
    """Load one split as (images float32 (N,H,W), masks uint8 (N,H,W))."""
    root = Path(root)
    recs = read_manifest(root).split(split)
    if not recs:
        return np.zeros((0, TILE, TILE), np.float32), np.zeros((0, TILE, TILE), np.uint8)
    images = np.stack([load_image(root / r.image) for r in recs])
    masks = np.stack([load_mask(root / r.mask) for r in recs])
    return images, masks
