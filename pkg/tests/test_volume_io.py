# tests/test_volume_io.py

import numpy as np
import pytest
import tifffile

from fiberseg.errors import (
    IndexOutOfRange, InconsistentSliceShape, IoError, NoSlicesFound, NonContiguousSlices,
)
from fiberseg.volume_io import (
    StackWriter, Volume, VolumeFormat, crop, normalize, open_raw, open_stack, open_volume, pad,
    read_sidecar, read_slice, read_volume, storage_dtype, write_volume,
)


def write_stack(directory, slices, start=0):
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(slices):
        tifffile.imwrite(directory / f"slice_{start + i:04d}.tif", s)


def test_open_stack_is_lazy_and_ordered(tmp_path):
    slices = [np.full((5, 7), i, dtype=np.uint16) for i in range(4)]
    write_stack(tmp_path / 'stack', slices, start=10)

    src = open_stack(tmp_path / 'stack')
    assert src.shape == (4, 5, 7)
    assert src.first_index == 10
    assert src.dtype == np.uint16
    assert src.read_raw(2)[0, 0] == 2


def test_read_slice_normalizes_by_type_maximum(tmp_path):
    write_stack(tmp_path / 'stack', [np.array([[0, 65535]], dtype=np.uint16)])
    out = read_slice(open_stack(tmp_path / 'stack'), 0)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, [[0.0, 1.0]])


def test_normalize_float_is_copied():
    raw = np.array([[0.25, 0.5]], dtype=np.float64)
    out = normalize(raw)
    assert out.dtype == np.float32
    out[0, 0] = 1.0
    assert raw[0, 0] == 0.25


def test_empty_directory_raises(tmp_path):
    (tmp_path / 'empty').mkdir()
    with pytest.raises(NoSlicesFound):
        open_stack(tmp_path / 'empty')


def test_missing_directory_raises(tmp_path):
    with pytest.raises(NoSlicesFound):
        open_stack(tmp_path / 'nope')


def test_gap_in_indices_raises(tmp_path):
    directory = tmp_path / 'stack'
    directory.mkdir()
    for i in (0, 1, 3):
        tifffile.imwrite(directory / f"slice_{i:04d}.tif", np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(NonContiguousSlices):
        open_stack(directory)


def test_inconsistent_shapes_raise(tmp_path):
    directory = tmp_path / 'stack'
    directory.mkdir()
    tifffile.imwrite(directory / "slice_0000.tif", np.zeros((4, 4), dtype=np.uint8))
    tifffile.imwrite(directory / "slice_0001.tif", np.zeros((4, 5), dtype=np.uint8))
    with pytest.raises(InconsistentSliceShape):
        open_stack(directory)


def test_index_out_of_range(tmp_path):
    write_stack(tmp_path / 'stack', [np.zeros((3, 3), dtype=np.uint8)] * 2)
    src = open_stack(tmp_path / 'stack')
    with pytest.raises(IndexOutOfRange):
        src.read_raw(2)
    with pytest.raises(IndexOutOfRange):
        src.read_raw(-1)


def test_pad_crop_identity(rng):
    field = rng.random((6, 9)).astype(np.float32)
    padded = pad(field, 16)
    assert padded.shape == (38, 41)
    assert padded[:16].sum() == 0
    np.testing.assert_array_equal(crop(padded, 16), field)


def test_pad_per_axis_3d(rng):
    field = rng.random((2, 3, 4))
    assert pad(field, (1, 2, 3)).shape == (4, 7, 10)


def test_storage_dtype_rules():
    assert storage_dtype(np.zeros(2, dtype=np.uint16)) == np.uint16
    assert storage_dtype(np.zeros(2, dtype=bool)) == np.uint8
    assert storage_dtype(np.zeros(2, dtype=np.int64)) == np.int32
    assert storage_dtype(np.zeros(2, dtype=np.float64)) == np.float32


def test_raw_round_trip_with_sidecar(tmp_path, rng):
    data = rng.integers(0, 1000, size=(3, 4, 5)).astype(np.uint16)
    path = tmp_path / 'vol.raw'
    write_volume(Volume(data, spacing=1.3, name='sample A'), path, VolumeFormat.RAW)

    header = read_sidecar(path)
    assert header['shape'] == (3, 4, 5)
    assert header['spacing_um'] == pytest.approx(1.3)
    assert header['name'] == 'sample A'

    src = open_raw(path)
    for z in range(3):
        np.testing.assert_array_equal(src.read_raw(z), data[z])


def test_raw_size_mismatch_raises(tmp_path):
    path = tmp_path / 'vol.raw'
    write_volume(np.zeros((2, 3, 3), dtype=np.uint8), path, VolumeFormat.RAW)
    path.write_bytes(b'\x00' * 5)
    with pytest.raises(IoError):
        open_raw(path)


def test_stack_round_trip_labels(tmp_path):
    labels = np.arange(2 * 3 * 4, dtype=np.int64).reshape(2, 3, 4)
    write_volume(labels, tmp_path / 'labels', VolumeFormat.STACK)
    vol = read_volume(tmp_path / 'labels')
    assert vol.dtype == np.int32
    np.testing.assert_array_equal(vol.data, labels)


def test_open_volume_dispatches(tmp_path):
    write_volume(np.zeros((2, 3, 3), dtype=np.uint8), tmp_path / 'a.raw', VolumeFormat.RAW)
    write_volume(np.zeros((2, 3, 3), dtype=np.uint8), tmp_path / 'b', VolumeFormat.STACK)
    assert open_volume(tmp_path / 'a.raw').shape == (2, 3, 3)
    assert open_volume(tmp_path / 'b').shape == (2, 3, 3)


def test_stack_writer_leaves_target_untouched_on_error(tmp_path):
    target = tmp_path / 'out'
    write_volume(np.ones((1, 2, 2), dtype=np.uint8), target, VolumeFormat.STACK)

    with pytest.raises(RuntimeError):
        with StackWriter(target, np.uint8) as writer:
            writer.write(np.zeros((2, 2), dtype=np.uint8))
            raise RuntimeError("прервано")

    assert read_volume(target).data.sum() == 4
    assert [p.name for p in tmp_path.iterdir()] == ['out']


def test_stack_writer_replaces_existing(tmp_path):
    target = tmp_path / 'out'
    write_volume(np.ones((3, 2, 2), dtype=np.uint8), target, VolumeFormat.STACK)
    with StackWriter(target, np.uint8) as writer:
        writer.write(np.zeros((2, 2), dtype=np.uint8))
    assert read_volume(target).shape == (1, 2, 2)
