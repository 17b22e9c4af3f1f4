"""PGM/PPM codecs."""

import numpy as np
import pytest

from atacnet import netpbm


class TestRoundTrip:
    @pytest.mark.parametrize("plain", [False, True])
    @pytest.mark.parametrize("channels", [1, 3])
    def test_quantized_round_trip(self, tmp_path, plain, channels):
        img = np.random.default_rng(channels).uniform(size=(7, 5, channels))
        path = tmp_path / "img.pnm"
        netpbm.write_image(path, img, plain=plain)
        back = netpbm.read_image(path)
        np.testing.assert_array_equal(back, netpbm.quantize(img) / 255.0)
        netpbm.write_image(tmp_path / "again.pnm", back, plain=plain)
        assert (tmp_path / "again.pnm").read_bytes() == path.read_bytes()

    def test_all_byte_values(self):
        q = np.arange(256, dtype=np.uint8).reshape(16, 16)
        assert np.array_equal(netpbm.quantize(netpbm.decode(netpbm.encode(q))), q[:, :, None])


class TestDecode:
    def test_header_comments(self):
        img = netpbm.decode(b"P2\n# comment\n2 1\n# another\n4\n0 4\n")
        assert img.reshape(-1).tolist() == [0.0, 1.0]

    def test_sixteen_bit(self):
        img = netpbm.decode(b"P5\n1 1\n65535\n\xff\xff")
        assert img.item() == 1.0

    def test_bad_magic(self):
        with pytest.raises(netpbm.ImageFormatError, match="magic"):
            netpbm.decode(b"GIF89a")

    def test_truncated_pixels(self):
        with pytest.raises(netpbm.ImageFormatError, match="truncated"):
            netpbm.decode(b"P5\n4 4\n255\n\x00\x00")

    def test_sample_over_maxval(self):
        with pytest.raises(netpbm.ImageFormatError):
            netpbm.decode(b"P2\n1 1\n10\n11\n")
