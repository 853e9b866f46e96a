import numpy as np
import pytest

from psagan.io import (FormatError, decode_checkpoint, encode_checkpoint, file_digest, load_checkpoint, quantize,
                       read_image, read_metric_csv, read_pgm, save_checkpoint, write_image, write_metric_csv,
                       write_pgm)


def test_pgm_round_trip_on_quantized_data(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 9)) / 255.0
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_header_comments_and_errors(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    assert np.array_equal(read_pgm(p), [[0.0, 1.0]])
    p.write_bytes(b"P2\n2 1\n255\n0 255")
    with pytest.raises(FormatError):
        read_pgm(p)
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(FormatError):
        read_pgm(p)
    p.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(FormatError):
        read_pgm(p)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (6, 5)) / 255.0
    write_image(tmp_path / "a.png", img)
    assert np.array_equal(read_image(tmp_path / "a.png"), img)


def test_quantize_clips():
    assert np.array_equal(quantize(np.array([-0.2, 0.5, 1.7])), [0, 128, 255])


def _state():
    rng = np.random.default_rng(2)
    return {"conv.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
            "conv.bias": rng.standard_normal(3).astype(np.float32),
            "gamma": np.zeros(1, dtype=np.float32), "empty": np.zeros((0,), dtype=np.float32)}


def test_checkpoint_round_trip_bit_exact(tmp_path):
    state = _state()
    save_checkpoint(tmp_path / "m.ckpt", state)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(state)
    for k in state:
        assert back[k].dtype == np.float32 and back[k].tobytes() == state[k].tobytes()
    assert encode_checkpoint(back) == encode_checkpoint(state)


def test_checkpoint_corruption_refused():
    blob = bytearray(encode_checkpoint(_state()))
    blob[20] ^= 0x01
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(blob))
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOPE" + bytes(30))
    with pytest.raises(FormatError):
        decode_checkpoint(encode_checkpoint(_state())[:-3])


def test_metric_csv(tmp_path):
    write_metric_csv(tmp_path / "m.csv", [("psnr", 31.25), ("ssim", 0.5)])
    assert read_metric_csv(tmp_path / "m.csv") == {"psnr": 31.25, "ssim": 0.5}
    (tmp_path / "x.csv").write_text("a,b\n")
    with pytest.raises(FormatError):
        read_metric_csv(tmp_path / "x.csv")


def test_file_digest_is_order_free(tmp_path):
    (tmp_path / "a").write_bytes(b"1")
    (tmp_path / "b").write_bytes(b"2")
    d1 = file_digest([tmp_path / "a", tmp_path / "b"])
    assert d1 == file_digest([tmp_path / "b", tmp_path / "a"])
    (tmp_path / "b").write_bytes(b"3")
    assert d1 != file_digest([tmp_path / "a", tmp_path / "b"])
