import numpy as np
import pytest

from tataa.errors import AddressError
from tataa.memory import (
    Allocator,
    Layout,
    Manifest,
    MemoryImage,
    TensorPlacement,
    item_key,
    layout_words,
    pack,
    unpack,
    vector_words,
)


def test_rowblk_is_colblk_of_transpose(rng):
    a = rng.integers(-127, 128, (40, 70)).astype(np.int8)
    np.testing.assert_array_equal(pack(Layout.ROW, a), pack(Layout.COL, a.T))


def test_rowblk_slices_are_columns(rng):
    a = rng.integers(-127, 128, (32, 64)).astype(np.int8)
    raw = pack(Layout.ROW, a).view(np.int8).reshape(64, 32)
    np.testing.assert_array_equal(raw[5], a[:, 5])


@pytest.mark.parametrize("layout", [Layout.ROW, Layout.COL])
def test_int8_layouts_unpack(layout, rng):
    a = rng.integers(-127, 128, (33, 65)).astype(np.int8)
    data = pack(layout, a)
    assert data.size == layout_words(layout, a.shape, 128) * 32
    np.testing.assert_array_equal(unpack(layout, data, a.shape), a)


def test_vblk_columns_are_lane_vectors(rng):
    a = rng.integers(0, 1 << 16, (200, 3)).astype(np.uint16)
    data = pack(Layout.VEC, a, lanes=128)
    vw = vector_words(128)
    assert data.size == layout_words(Layout.VEC, a.shape, 128) * 32 == 2 * 3 * vw * 32
    words = data.view("<u2").reshape(-1, vw * 16)
    np.testing.assert_array_equal(words[1, :128], a[:128, 1])  # block 0, column 1
    np.testing.assert_array_equal(words[3, :72], a[128:, 0])  # block 1, column 0
    np.testing.assert_array_equal(unpack(Layout.VEC, data, a.shape, 128), a)


def test_bcast_one_value_per_word():
    v = np.array([1, 2, 3], dtype=np.uint16)
    data = pack(Layout.BCAST, v)
    assert data.size == 3 * 32
    np.testing.assert_array_equal(unpack(Layout.BCAST, data, (3,)), v)


def test_memory_bounds_and_copy(tmp_path):
    img = MemoryImage(4)
    img.write(3, np.arange(32, dtype=np.uint8))
    with pytest.raises(AddressError):
        img.write(4, [1])
    with pytest.raises(AddressError):
        img.read(3, 33)
    dup = img.copy()
    assert dup == img
    dup.write(0, [9])
    assert dup != img
    img.save(tmp_path / "m.bin")
    assert MemoryImage.load(tmp_path / "m.bin") == img


def test_manifest_round_trip(tmp_path, rng):
    m = Manifest(lanes=128, memory_words=64, batch=2, outputs=["y"], bindings={"y": "y:vblk"})
    m.add(TensorPlacement(item_key("y:vblk", 1), 16, [4, 2], "bf16", Layout.VEC.value))
    m.add(TensorPlacement("w:colblk", 0, [32, 32], "int8", Layout.COL.value, 0.5))
    img = MemoryImage(64)
    y = rng.integers(0, 1 << 16, (4, 2)).astype(np.uint16)
    m.write_tensor(img, "y:vblk#1", y)
    assert m.placement("y", 1).offset == 16
    assert m.placement("w:colblk").scale == 0.5
    np.testing.assert_array_equal(m.read_tensor(img, m.placement("y", 1).name), y)
    m.save(tmp_path / "manifest.json")
    assert Manifest.load(tmp_path / "manifest.json") == m


def test_allocator_bumps():
    a = Allocator(10)
    assert a.take(5) == 10
    assert a.take(1) == 15
    assert a.next == 16
