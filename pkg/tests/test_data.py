import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sonarseg.data import (
    DEFAULT_CLASS_MIX, IGNORE, PALETTE, DatasetManifest, TileLayout, TileRecord, augment,
    class_fractions, colorize, generate_synthetic_waterfall, load_image, load_mask, load_split,
    overlay, read_manifest, save_image, save_mask, split_dataset, stitch_masks, tile_origins,
    tile_waterfall, write_dataset,
)


@pytest.fixture(scope="module")
def waterfall():
    return generate_synthetic_waterfall(512, 512, seed=11)


def test_generator_shapes_and_ranges(waterfall):
    wf, mask = waterfall
    assert wf.intensity.shape == (512, 512) and wf.intensity.dtype == np.float32
    assert 0.0 <= wf.intensity.min() and wf.intensity.max() <= 1.0
    assert mask.dtype == np.uint8 and set(np.unique(mask)) <= {0, 1, 2, 3}
    assert wf.meta["seed"] == 11


def test_generator_fractions_1024():
    _, mask = generate_synthetic_waterfall(1024, 1024, seed=2)
    assert np.abs(class_fractions(mask) - np.asarray(DEFAULT_CLASS_MIX)).max() <= 0.05


def test_generator_deterministic():
    a, ma = generate_synthetic_waterfall(256, 320, seed=5)
    b, mb = generate_synthetic_waterfall(256, 320, seed=5)
    c, _ = generate_synthetic_waterfall(256, 320, seed=6)
    assert np.array_equal(a.intensity, b.intensity) and np.array_equal(ma, mb)
    assert not np.array_equal(a.intensity, c.intensity)


def test_generator_degenerate_mix():
    _, mask = generate_synthetic_waterfall(256, 256, seed=0, class_mix=(0, 0, 1, 0))
    assert np.all(mask == 2)


@pytest.mark.parametrize("mix", [(0.5, 0.5, 0.5, 0.5), (1, 0, 0), (-0.1, 0.5, 0.3, 0.3)])
def test_generator_rejects_bad_mix(mix):
    with pytest.raises(ValueError):
        generate_synthetic_waterfall(256, 256, class_mix=mix)


def test_generator_rejects_small():
    with pytest.raises(ValueError):
        generate_synthetic_waterfall(200, 512)


def test_classes_look_different(waterfall):
    wf, mask = waterfall
    means = [wf.intensity[mask == k].mean() for k in range(4) if (mask == k).any()]
    assert len(means) == 4
    assert np.ptp(means) > 0.05


@pytest.mark.parametrize("shape,n,last", [((512, 512), 9, (256, 256)), ((256, 256), 1, (0, 0)),
                                          ((600, 256), 4, (344, 0))])
def test_tile_counts(shape, n, last):
    tiles = tile_waterfall(np.zeros(shape, np.float32))
    assert len(tiles) == n
    assert tiles[-1][2] == last
    assert all(t[0].shape == (256, 256) for t in tiles)


def test_tile_layout():
    lay = TileLayout(600, 256)
    assert lay.rows == [0, 128, 256, 344] and lay.cols == [0]


def test_tiles_rejects_small_and_mismatch():
    with pytest.raises(ValueError):
        tile_origins(100)
    with pytest.raises(ValueError):
        tile_origins(512, tile=64, stride=65)
    with pytest.raises(ValueError):
        tile_waterfall(np.zeros((256, 256)), np.zeros((256, 300), np.uint8))


@settings(max_examples=60, deadline=None)
@given(length=st.integers(4, 400), tile=st.integers(1, 64), stride=st.integers(1, 64))
def test_tile_origins_cover(length, tile, stride):
    tile, stride = min(tile, length), min(stride, tile, length)
    o = tile_origins(length, tile, stride)
    assert o[0] == 0 and o[-1] == length - tile
    assert all(0 < b - a <= stride for a, b in zip(o, o[1:]))
    covered = np.zeros(length, bool)
    for s in o:
        covered[s:s + tile] = True
    assert covered.all()


def test_stitch_identity(waterfall):
    _, mask = waterfall
    tiles = [(m, o) for _, m, o in tile_waterfall(mask.astype(np.float32), mask)]
    assert np.array_equal(stitch_masks(tiles, mask.shape), mask)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(16, 60), w=st.integers(16, 60), seed=st.integers(0, 10_000))
def test_stitch_identity_property(h, w, seed):
    mask = np.random.default_rng(seed).integers(0, 4, (h, w)).astype(np.uint8)
    mask[0, 0] = IGNORE
    tiles = [(m, o) for _, m, o in tile_waterfall(mask.astype(np.float32), mask, tile=16, stride=7)]
    assert np.array_equal(stitch_masks(tiles, mask.shape), mask)


def test_stitch_single_tile():
    m = np.random.default_rng(0).integers(0, 4, (256, 256)).astype(np.uint8)
    assert np.array_equal(stitch_masks([(m, (0, 0))], (256, 256)), m)


def test_stitch_majority():
    a, b = np.zeros((4, 4), np.uint8), np.ones((4, 4), np.uint8)
    out = stitch_masks([(a, (0, 0)), (b, (0, 0)), (b, (0, 0))], (4, 4))
    assert np.all(out == 1)


def test_stitch_tie_nearest_centre():
    # one vote each in the overlap: the nearer tile centre wins
    a, b = np.zeros((256, 256), np.uint8), np.ones((256, 256), np.uint8)
    out = stitch_masks([(b, (0, 128)), (a, (0, 0))], (256, 384))
    assert np.all(out[:, :192] == 0) and np.all(out[:, 192:] == 1)


def test_stitch_tie_equal_distance_first_origin():
    # 2x2 tiles at (0,0) and (0,2) in a 2x4 image overlap nowhere; use 3-wide tiles at
    # (0,0) and (0,2): column 2 sits at distance 1.0 from both centres
    a, b = np.zeros((1, 3), np.uint8), np.ones((1, 3), np.uint8)
    out = stitch_masks([(b, (0, 2)), (a, (0, 0))], (1, 5))
    assert out.tolist() == [[0, 0, 0, 1, 1]]


def test_stitch_uncovered_and_outside():
    m = np.zeros((4, 4), np.uint8)
    with pytest.raises(ValueError):
        stitch_masks([(m, (0, 0))], (4, 8))
    with pytest.raises(ValueError):
        stitch_masks([(m, (2, 0))], (4, 4))


def test_augment_deterministic(waterfall):
    wf, mask = waterfall
    img, msk = wf.intensity[:256, :256], mask[:256, :256]
    a = augment(img, msk, seed=9)
    b = augment(img, msk, seed=9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_augment_p0_identity(waterfall):
    wf, mask = waterfall
    img, msk = wf.intensity[:256, :256], mask[:256, :256]
    a, b = augment(img, msk, seed=3, p=0.0)
    assert np.array_equal(a, img) and np.array_equal(b, msk)


def test_augment_keeps_label_alphabet(waterfall):
    wf, mask = waterfall
    img, msk = wf.intensity[:256, :256], mask[:256, :256]
    allowed = set(np.unique(msk).tolist()) | {IGNORE}
    changed = 0
    for s in range(100):
        a, b = augment(img, msk, seed=s)
        assert a.shape == img.shape and b.shape == msk.shape
        assert a.dtype == np.float32 and 0 <= a.min() and a.max() <= 1
        assert set(np.unique(b).tolist()) <= allowed
        changed += not np.array_equal(b, msk)
    assert changed > 50


def _manifest(n_sources=10, per=100):
    return DatasetManifest([TileRecord(f"i{s}_{k}", f"m{s}_{k}", s, (k, 0))
                            for s in range(n_sources) for k in range(per)])


def test_split_counts_and_disjoint():
    out = split_dataset(_manifest(), ratios=(0.8, 0.2), test_fraction=0.05, seed=0)
    c = out.counts()
    assert sum(c.values()) == 1000
    assert c["test"] == 100  # one whole source reaches 5% of the train share
    assert c["train"] == 720 and c["val"] == 180
    test_src = {t.source_id for t in out.split("test")}
    assert test_src.isdisjoint({t.source_id for t in out.tiles if t.split != "test"})


def test_split_deterministic():
    a = split_dataset(_manifest(), seed=4).to_dict()
    b = split_dataset(_manifest(), seed=4).to_dict()
    assert a == b


def test_split_single_source():
    with pytest.raises(ValueError):
        split_dataset(_manifest(1, 50))


def test_split_bad_ratios():
    with pytest.raises(ValueError):
        split_dataset(_manifest(), ratios=(0.7, 0.2))


def test_split_empty_val_warns():
    with pytest.warns(UserWarning):
        out = split_dataset(_manifest(3, 10), ratios=(1.0, 0.0))
    assert out.counts()["val"] == 0


def test_png_roundtrip(tmp_path, waterfall):
    wf, mask = waterfall
    save_image(tmp_path / "i.png", wf.intensity)
    assert np.abs(load_image(tmp_path / "i.png") - wf.intensity).max() <= 0.5 / 255 + 1e-7
    m = mask.copy()
    m[:3] = IGNORE
    save_mask(tmp_path / "m.png", m)
    assert np.array_equal(load_mask(tmp_path / "m.png"), m)


def test_load_mask_rejects_rgb(tmp_path):
    from PIL import Image
    Image.new("RGB", (4, 4)).save(tmp_path / "x.png")
    with pytest.raises(ValueError):
        load_mask(tmp_path / "x.png")


def test_colorize_and_overlay():
    m = np.array([[0, 1], [2, 255]], np.uint8)
    c = colorize(m)
    assert tuple(c[0, 0]) == PALETTE[0] and tuple(c[1, 1]) == (0, 0, 0)
    ov = overlay(np.ones((2, 2)), m, alpha=0.0)
    assert np.all(ov == 255)


def test_write_and_load_dataset(tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        man = write_dataset(tmp_path, count=2, height=256, width=384, seed=1)
    assert len(man.tiles) == 4
    again = read_manifest(tmp_path)
    assert again.to_dict() == json.loads(json.dumps(man.to_dict()))
    assert abs(sum(again.class_frequency) - 1) < 1e-9
    for split in ("train", "val", "test"):
        imgs, msks = load_split(tmp_path, split)
        assert len(imgs) == len(msks) == man.counts()[split]
    assert man.counts()["test"] == 2


def test_read_manifest_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path)
