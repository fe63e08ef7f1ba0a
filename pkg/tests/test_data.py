import filecmp

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from jgseg.core import SeededRng
from jgseg.data import (DatasetManifest, DomainShift, apply_shift, ellipse_mask, generate_dataset, item_seed, load_batch,
                        make_recipe, polygon_mask, read_png, render_item, shift_image, split, to_model, to_uint8,
                        write_png)
from jgseg.errors import InvalidArgument, PreconditionError


def test_generation_is_byte_deterministic(tmp_path):
    a = generate_dataset(make_recipe("BLOBS-A", 16), 12, tmp_path / "a")
    b = generate_dataset(make_recipe("BLOBS-A", 16), 12, tmp_path / "b")
    assert a.to_json() == b.to_json()
    for it in a.items:
        assert filecmp.cmp(a.root / it["image"], b.root / it["image"], shallow=False)
        assert filecmp.cmp(a.root / it["mask"], b.root / it["mask"], shallow=False)
    assert DatasetManifest.load(tmp_path / "a").items == a.items


def test_recipe_seed_changes_content():
    r0, r1 = make_recipe("BLOBS-A", 16, seed=0), make_recipe("BLOBS-A", 16, seed=1)
    assert not np.array_equal(render_item(r0, item_seed(0, 0))[0], render_item(r1, item_seed(1, 0))[0])


def test_blobs_foreground_fraction():
    recipe = make_recipe("BLOBS-A", 32)
    fracs = np.array([(render_item(recipe, item_seed(0, i))[1] == 1).mean() for i in range(1000)])
    assert fracs.min() > 0.0
    assert 0.02 <= fracs.mean() <= 0.5


def test_facetoy_classes_present():
    recipe = make_recipe("FACETOY", 32)
    for i in range(50):
        img, mask, _ = render_item(recipe, item_seed(0, i))
        assert img.shape == (32, 32, 3) and img.dtype == np.uint8
        assert set(np.unique(mask)) == {0, 1, 2, 3}


def test_unknown_recipe_and_bad_count(tmp_path):
    with pytest.raises(InvalidArgument):
        make_recipe("NOPE", 16)
    with pytest.raises(InvalidArgument):
        generate_dataset(make_recipe("BLOBS-A", 16), 0, tmp_path)
    with pytest.raises(PreconditionError):
        DatasetManifest.load(tmp_path / "missing")


@given(st.floats(2, 14), st.floats(2, 14), st.floats(1, 6), st.floats(1, 6), st.floats(0, 3.14))
@settings(max_examples=40, deadline=None)
def test_ellipse_mask_matches_point_test(cx, cy, a, b, theta):
    m = ellipse_mask(16, cx, cy, a, b, theta)
    for y in range(16):
        for x in range(16):
            dx, dy = x + 0.5 - cx, y + 0.5 - cy
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            assert m[y, x] == ((u / a) ** 2 + (v / b) ** 2 <= 1.0)


def test_polygon_mask_square():
    m = polygon_mask(8, [(2, 2), (6, 2), (6, 6), (2, 6)])
    expect = np.zeros((8, 8), bool)
    expect[2:6, 2:6] = True
    assert np.array_equal(m, expect)


# -- splits --------------------------------------------------------------------------

def test_split_disjoint_and_seeded(micro_data):
    s = micro_data.splits
    ids = [i for name in s for i in s[name]]
    assert len(ids) == len(set(ids)) == 4 + 60 + 8 + 16
    again = split(micro_data, 4, 60, 8, 16, seed=0, write=False)
    assert again.splits == s
    other = split(micro_data, 4, 60, 8, 16, seed=1, write=False)
    assert other.splits != s
    bigger = split(micro_data, 6, 80, 8, 16, seed=0, write=False)
    assert bigger.splits["test"] == s["test"] and bigger.splits["val"] == s["val"]


def test_split_guards(micro_data):
    with pytest.raises(InvalidArgument):
        split(micro_data, 10, 60, 8, 16, write=False)
    split(micro_data, 10, 60, 8, 16, enforce_scarcity=False, write=False)
    with pytest.raises(InvalidArgument):
        split(micro_data, 4, 200, 8, 16, write=False)
    with pytest.raises(InvalidArgument):
        split(micro_data, -1, 60, 8, 16, write=False)


def test_split_write_flag(micro_data, tmp_path):
    on_disk = DatasetManifest.load(micro_data.root)
    split(micro_data, 2, 60, 8, 16, seed=5, write=False)
    assert DatasetManifest.load(micro_data.root).splits == on_disk.splits


# -- shifts --------------------------------------------------------------------------

def test_contrast_invert_is_involution():
    x = np.random.default_rng(0).uniform(-1, 1, (1, 8, 8))
    s = DomainShift("contrast_invert")
    assert np.allclose(shift_image(shift_image(x, s), s), x)


def test_intensity_shift_exact_delta():
    x = np.random.default_rng(0).uniform(-1, 0.5, (3, 8, 8))
    y = shift_image(x, DomainShift.parse("intensity_shift(0.3)"), clamp=False)
    assert np.allclose(y - x, 0.3)


def test_blur_preserves_constant_and_smooths():
    const = np.full((1, 8, 8), 0.4)
    assert np.allclose(shift_image(const, DomainShift.parse("blur(1.0)")), const)
    x = np.random.default_rng(1).uniform(-1, 1, (1, 16, 16))
    assert shift_image(x, DomainShift.parse("blur(1.0)")).std() < x.std()


def test_shift_parse_and_unknown():
    assert DomainShift.parse("blur(2)").params == {"sigma": 2.0}
    assert DomainShift.parse({"kind": "texture_swap"}).kind == "texture_swap"
    with pytest.raises(InvalidArgument):
        DomainShift.parse("warp")
    with pytest.raises(InvalidArgument):
        DomainShift.parse("contrast_invert(1)")


def test_apply_shift_keeps_masks(micro_data, tmp_path):
    out = apply_shift(micro_data, ["contrast_invert", "texture_swap"], tmp_path / "ood")
    assert out.splits == micro_data.splits
    assert [s["kind"] for s in out.recipe["shift"]] == ["contrast_invert", "texture_swap"]
    for it in micro_data.items[:20]:
        assert filecmp.cmp(micro_data.root / it["mask"], out.root / it["mask"], shallow=False)
    a, _ = micro_data.arrays()
    b, _ = out.arrays()
    assert not torch.equal(a, b)


# -- loading --------------------------------------------------------------------------

def test_load_batch_shapes_and_rng(micro_data):
    x, y = load_batch(micro_data, "labeled", 6, SeededRng(0, "data"))
    assert x.shape == (6, 1, 16, 16) and y.shape == (6, 16, 16)
    assert x.dtype == torch.float32 and y.dtype == torch.int64
    labeled = set(micro_data.splits["labeled"])
    imgs, _ = micro_data.arrays()
    assert all(any(torch.equal(xi, imgs[j]) for j in labeled) for xi in x)
    x2, _ = load_batch(micro_data, "labeled", 6, SeededRng(0, "data"))
    assert torch.equal(x, x2)
    assert load_batch(micro_data, "test", 0)[0].shape[0] == 0
    with pytest.raises(InvalidArgument):
        load_batch(micro_data, "nope", 2)


def test_pixel_scaling_endpoints():
    u = np.array([[0, 255], [128, 1]], dtype=np.uint8)
    x = to_model(u)
    assert x.shape == (1, 2, 2)
    assert x[0, 0, 0] == -1.0 and x[0, 0, 1] == 1.0
    assert np.array_equal(to_uint8(x), u)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_png_quantization_error(tmp_path_factory, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, (3, 6, 6)).astype(np.float32)
    path = tmp_path_factory.mktemp("png") / "x.png"
    write_png(path, to_uint8(x))
    back = to_model(read_png(path))
    # [-1, 1] spans 255 steps of 2/255; rounding error is at most half a step
    assert np.abs(back - x).max() <= 1.0 / 255 + 1e-6
