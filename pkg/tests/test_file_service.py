import numpy as np
import pytest
from PIL import Image

from d2hnet.api.models import ManifestEntry
from d2hnet.services.file_service import D2T_KIND_FEATURE, D2T_KIND_IMAGE, FileService
from d2hnet.utils.errors import BadMagicError, ChecksumError, FormatError, TruncatedFileError, UnsupportedImageError


def test_png_round_trip_is_exact_for_byte_values(tmp_path, rng):
    x = (rng.integers(0, 256, size=(1, 3, 5, 4)) / 255.0).astype(np.float32)
    path = str(tmp_path / "img.png")
    FileService.write_png(path, x)
    np.testing.assert_array_equal(FileService.read_png(path), x)


def test_quantization_rounds_half_up_and_clamps():
    x = np.array([-0.2, 0.0, 0.001, 0.003, 1.0, 1.7])
    assert FileService.to_bytes(x).tolist() == [0, 0, 0, 1, 255, 255]


def test_grayscale_png_reads_one_channel(tmp_path):
    path = str(tmp_path / "g.png")
    Image.fromarray(np.full((3, 2), 51, dtype=np.uint8)).save(path)
    x = FileService.read_png(path)
    assert x.shape == (1, 1, 3, 2)
    assert FileService.read_rgb(path).shape == (1, 3, 3, 2)


def test_rgba_png_is_rejected(tmp_path):
    path = str(tmp_path / "a.png")
    Image.fromarray(np.zeros((2, 2, 4), dtype=np.uint8)).save(path)
    with pytest.raises(UnsupportedImageError):
        FileService.read_png(path)


def test_missing_png_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        FileService.read_png(str(tmp_path / "none.png"))


def test_d2t_round_trip(tmp_path, rng):
    x = rng.standard_normal((1, 2, 3, 4)).astype(np.float32)
    path = str(tmp_path / "f.d2t")
    FileService.write_d2t(path, x, D2T_KIND_FEATURE)
    back, kind = FileService.read_d2t(path)
    assert kind == D2T_KIND_FEATURE
    np.testing.assert_array_equal(back, x)


def test_d2t_image_kind_requires_unit_range(tmp_path):
    with pytest.raises(ValueError):
        FileService.write_d2t(str(tmp_path / "x.d2t"), np.full((1, 1, 2, 2), 1.5, np.float32), D2T_KIND_IMAGE)


def test_d2t_bad_magic_and_truncation(tmp_path, rng):
    path = tmp_path / "f.d2t"
    FileService.write_d2t(str(path), rng.random((1, 1, 4, 4)).astype(np.float32))
    data = path.read_bytes()
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError):
        FileService.read_d2t(str(path))
    path.write_bytes(data[:-3])
    with pytest.raises(TruncatedFileError):
        FileService.read_d2t(str(path))
    path.write_bytes(data[:2])
    with pytest.raises(TruncatedFileError):
        FileService.read_d2t(str(path))


def test_checkpoint_round_trip_with_metadata(tmp_path, rng):
    tensors = {"b": rng.standard_normal(3).astype(np.float32), "a": rng.standard_normal((2, 2)).astype(np.float32)}
    path = str(tmp_path / "m.d2ck")
    FileService.save_checkpoint(path, tensors, {"fingerprint": "0badf00d", "stage": "deblur"})
    ckpt = FileService.load_checkpoint(path)
    assert ckpt.meta == {"fingerprint": "0badf00d", "stage": "deblur"}
    assert set(ckpt.tensors) == {"a", "b"}
    np.testing.assert_array_equal(ckpt.tensors["a"], tensors["a"])


def test_checkpoint_bytes_do_not_depend_on_insertion_order(tmp_path, rng):
    a, b = rng.random(2).astype(np.float32), rng.random(3).astype(np.float32)
    FileService.save_checkpoint(str(tmp_path / "1.d2ck"), {"a": a, "b": b}, {"x": "1", "y": "2"})
    FileService.save_checkpoint(str(tmp_path / "2.d2ck"), {"b": b, "a": a}, {"y": "2", "x": "1"})
    assert (tmp_path / "1.d2ck").read_bytes() == (tmp_path / "2.d2ck").read_bytes()


def test_checkpoint_corruption_is_detected(tmp_path, rng):
    path = tmp_path / "m.d2ck"
    FileService.save_checkpoint(str(path), {"w": rng.random((4, 4)).astype(np.float32)})
    data = bytearray(path.read_bytes())
    data[-10] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        FileService.load_checkpoint(str(path))


def test_corrupt_length_field_is_a_checksum_error(tmp_path, rng):
    path = tmp_path / "m.d2ck"
    FileService.save_checkpoint(str(path), {"w": rng.random((4, 4)).astype(np.float32)})
    data = bytearray(path.read_bytes())
    # high byte of the first entry's name length
    data[15] ^= 0x7F
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        FileService.load_checkpoint(str(path))


def test_checkpoint_truncation_and_magic(tmp_path, rng):
    path = tmp_path / "m.d2ck"
    FileService.save_checkpoint(str(path), {"w": rng.random((4, 4)).astype(np.float32)})
    data = path.read_bytes()
    path.write_bytes(data[:-2])
    with pytest.raises(ChecksumError):
        FileService.load_checkpoint(str(path))
    path.write_bytes(data[:10])
    with pytest.raises(TruncatedFileError):
        FileService.load_checkpoint(str(path))
    path.write_bytes(data[:2])
    with pytest.raises(TruncatedFileError):
        FileService.load_checkpoint(str(path))
    path.write_bytes(b"D2T1" + data[4:])
    with pytest.raises(BadMagicError):
        FileService.load_checkpoint(str(path))


def test_reserved_metadata_prefix_is_refused(tmp_path):
    with pytest.raises(ValueError):
        FileService.save_checkpoint(str(tmp_path / "m.d2ck"), {"meta/x": np.zeros(1, np.float32)})


def test_format_errors_are_value_errors():
    assert issubclass(ChecksumError, FormatError)
    assert issubclass(FormatError, ValueError)


def test_manifest_round_trip(tmp_path):
    entries = [
        ManifestEntry(tuple_id="v0_000000", directory="tuples/v0_000000", source="v0", start=0,
                      long_indices=(0, 7), short_indices=(9, 9), interp_factor=2),
        ManifestEntry(tuple_id="v0_000000#sel00000", directory="tuples/v0_000000", source="v0", start=0,
                      long_indices=(0, 7), short_indices=(9, 9), interp_factor=2, crop=(4, 8, 16)),
    ]
    path = str(tmp_path / "manifest.tsv")
    assert FileService.write_manifest(path, entries) == 2
    back = FileService.read_manifest(path)
    assert [e.tuple_id for e in back] == [e.tuple_id for e in entries]
    assert back[1].crop == (4, 8, 16)
    assert back[0].directory == str(tmp_path / "tuples/v0_000000")


def test_malformed_manifest_line_names_the_line(tmp_path):
    path = tmp_path / "manifest.tsv"
    path.write_text("#header\nonly\tthree\tfields\n")
    with pytest.raises(ValueError, match=":2:"):
        FileService.read_manifest(str(path))


def test_loss_log_round_trip(tmp_path):
    path = str(tmp_path / "loss.log")
    FileService.write_loss_log(path, [0.5, 0.25, 1e-3])
    assert FileService.read_loss_log(path) == pytest.approx([0.5, 0.25, 1e-3])
