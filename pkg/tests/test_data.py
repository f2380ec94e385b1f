import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from tcgan.data import (
    DataError,
    SynthSpec,
    UnpairedDataset,
    apply_shadow,
    augment,
    base_scene,
    load_manifest,
    next_batch,
    resize,
    sample_shadow_mask,
    synthesize_corpus,
)
from tcgan.tensors import from_uint8


def _imgs(n, size=16, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return [torch.rand(3, size, size, generator=gen) * 2 - 1 for _ in range(n)]


def test_augment_identity_when_sizes_match():
    img = _imgs(1, 24)[0]
    out = augment(img, np.random.default_rng(0), 32, 32)
    assert torch.equal(out, resize(img, 32))
    assert torch.equal(augment(img, np.random.default_rng(0), 24, 24), img)


def test_augment_paper_sizes():
    out = augment(_imgs(1, 64)[0], np.random.default_rng(0), 286, 256)
    assert out.shape == (3, 256, 256)
    assert out.min() >= -1 and out.max() <= 1


def test_augment_deterministic_and_validated():
    img = _imgs(1, 64)[0]
    a = augment(img, np.random.default_rng(3), 72, 64)
    b = augment(img, np.random.default_rng(3), 72, 64)
    assert torch.equal(a, b)
    with pytest.raises(ValueError, match="exceeds"):
        augment(img, np.random.default_rng(0), 64, 72)


def test_augment_crop_offsets_cover_range():
    img = torch.arange(10 * 10, dtype=torch.float32).view(1, 10, 10).expand(3, 10, 10) / 100 - 0.5
    rng = np.random.default_rng(0)
    corners = {augment(img, rng, 10, 8)[0, 0, 0].item() for _ in range(400)}
    assert len(corners) == 9  # 3 x 3 possible offsets


def test_dataset_validation(tmp_path):
    with pytest.raises(DataError):
        UnpairedDataset([], [tmp_path / "a.png"])
    with pytest.raises(DataError):
        UnpairedDataset([tmp_path / "a.png"], [])
    with pytest.raises(DataError, match="both domains"):
        UnpairedDataset([tmp_path / "a.png"], [tmp_path / "a.png", tmp_path / "b.png"])


def test_dataset_from_root(tmp_path):
    for sub, n in (("shadow", 3), ("nonshadow", 2)):
        (tmp_path / sub).mkdir()
        for i in range(n):
            Image.fromarray(np.full((16, 16, 3), 10 * i, dtype=np.uint8)).save(tmp_path / sub / f"{i}.png")
    (tmp_path / "shadow" / "notes.txt").write_text("ignored")
    ds = UnpairedDataset.from_root(tmp_path)
    assert len(ds) == 3 and len(ds.nonshadow_paths) == 2
    assert ds.shadow(1).shape == (3, 16, 16)


def test_next_batch_two_nonshadow_images_are_both_used():
    ds = UnpairedDataset.from_tensors(_imgs(3), _imgs(2, seed=1))
    rng = np.random.default_rng(0)
    for _ in range(50):
        b = next_batch(ds, rng, load_size=16, crop_size=16)
        assert {b.y1_index[0], b.y2_index[0]} == {0, 1}


def test_next_batch_needs_two_nonshadow_images():
    ds = UnpairedDataset.from_tensors(_imgs(3), _imgs(1))
    with pytest.raises(DataError, match="two distinct"):
        next_batch(ds, np.random.default_rng(0), load_size=16, crop_size=16)


def test_next_batch_frequencies():
    ds = UnpairedDataset.from_tensors(_imgs(4, 8), _imgs(10, 8, seed=1))
    rng = np.random.default_rng(1)
    counts = np.zeros(10)
    for _ in range(10_000):
        b = next_batch(ds, rng, load_size=8, crop_size=8)
        assert b.y1_index[0] != b.y2_index[0]
        counts[b.y1_index[0]] += 1
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 0.1) <= 0.015)


def test_next_batch_shapes_and_determinism():
    ds = UnpairedDataset.from_tensors(_imgs(5, 24), _imgs(6, 24, seed=1))
    a = next_batch(ds, np.random.default_rng(9), batch_size=3, load_size=24, crop_size=16)
    b = next_batch(ds, np.random.default_rng(9), batch_size=3, load_size=24, crop_size=16)
    assert a.x.shape == a.y1.shape == a.y2.shape == (3, 3, 16, 16)
    assert torch.equal(a.x, b.x) and torch.equal(a.y2, b.y2)
    assert all(i != j for i, j in zip(a.y1_index, a.y2_index))


# --------------------------------------------------------------------------
# synthetic corpus


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(attenuation_lo=0.8, attenuation_hi=0.5)
    with pytest.raises(ValueError):
        SynthSpec(attenuation_lo=0.0)
    with pytest.raises(ValueError):
        SynthSpec(image_size=60)


def test_full_attenuation_leaves_base_unchanged():
    base = base_scene(np.random.default_rng(0), 32)
    m = np.random.default_rng(1).uniform(0, 1, (32, 32))
    assert np.array_equal(apply_shadow(base, m, 1.0), base)


def test_hard_region_scales_by_attenuation():
    base = base_scene(np.random.default_rng(0), 32)
    m = np.zeros((32, 32))
    m[8:20, 4:30] = 1.0
    out = apply_shadow(base, m, 0.55)
    assert np.allclose(out[8:20, 4:30], 0.55 * base[8:20, 4:30], rtol=0, atol=1e-15)
    assert np.array_equal(out[:8], base[:8])


def test_mask_coverage_within_band():
    spec = SynthSpec(coverage_lo=0.10, coverage_hi=0.30)
    rng = np.random.default_rng(0)
    cover = [sample_shadow_mask(rng, spec)[0].mean() for _ in range(1000)]
    assert spec.coverage_lo <= np.mean(cover) <= spec.coverage_hi
    assert min(cover) > 0


def test_corpus_determinism_and_disjointness():
    spec = SynthSpec(n_shadow=6, n_nonshadow=5, image_size=32, seed=4)
    a, b = synthesize_corpus(spec), synthesize_corpus(spec)
    for ta, tb in zip(a.triplets, b.triplets):
        assert np.array_equal(ta.shadow, tb.shadow) and np.array_equal(ta.mask, tb.mask)
    assert all(np.array_equal(x, y) for x, y in zip(a.nonshadow, b.nonshadow))
    gts = {t.gt.tobytes() for t in a.triplets}
    assert not gts & {n.tobytes() for n in a.nonshadow}
    other = synthesize_corpus(SynthSpec(n_shadow=6, n_nonshadow=5, image_size=32, seed=5))
    assert not np.array_equal(a.triplets[0].shadow, other.triplets[0].shadow)


def test_corpus_ground_truth_relation():
    c = synthesize_corpus(SynthSpec(n_shadow=8, n_nonshadow=0, image_size=32, seed=2))
    for t in c.triplets:
        assert set(np.unique(t.mask)) <= {0.0, 1.0}
        # outside the mask the shadow left every 8-bit value untouched
        outside = t.mask == 0
        assert np.array_equal(t.shadow[outside], t.gt[outside])
        assert (t.shadow.astype(int) <= t.gt.astype(int)).all()
        assert 0.4 <= t.attenuation <= 0.7
        inside = t.soft_mask > 0.999
        ratio = t.shadow[inside].astype(float) / np.maximum(t.gt[inside], 1)
        bright = t.gt[inside] > 100
        assert np.allclose(ratio[bright], t.attenuation, atol=0.02)


def test_corpus_write_layout(tmp_path):
    c = synthesize_corpus(SynthSpec(n_shadow=3, n_nonshadow=2, image_size=16, seed=0))
    root = c.write(tmp_path / "corpus")
    rows = load_manifest(root)
    assert [sorted(r) for r in rows] == [["attenuation", "gt", "mask", "shadow"]] * 3
    assert len(list((root / "nonshadow").glob("*.png"))) == 2
    ds = UnpairedDataset.from_root(root)
    assert torch.equal(ds.shadow(0), from_uint8(c.triplets[0].shadow))
    mask = np.asarray(Image.open(root / rows[0]["mask"]))
    assert set(np.unique(mask)) <= {0, 255}
    assert json.loads((root / "manifest.jsonl").read_text().splitlines()[1])["shadow"] == "shadow/s00001.png"
    with pytest.raises(DataError):
        load_manifest(tmp_path)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_synth_pixels_in_range(seed):
    c = synthesize_corpus(SynthSpec(n_shadow=1, n_nonshadow=1, image_size=16, seed=seed))
    t = from_uint8(c.triplets[0].shadow)
    assert t.min() >= -1 and t.max() <= 1
