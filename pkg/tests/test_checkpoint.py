import struct

import numpy as np
import pytest

from denseflow.nnkit import checkpoint as C
from denseflow.nnkit.net import NetConfig, VelocityNet
from denseflow.tensorio import SeededRng


def _net(**kw):
    return VelocityNet(NetConfig(**kw), seed=3, zero_final=False)


def _inputs():
    rng = SeededRng(1)
    return rng.normal((16, 16, 3)), [rng.uniform((16, 16, 3), -1, 1)]


def test_round_trip_bit_exact(tmp_path):
    net = _net()
    C.save_checkpoint(net, tmp_path / "m.e2pc", step=123, extra={"lr": 0.002})
    ck = C.load_checkpoint(tmp_path / "m.e2pc")
    assert ck.step == 123 and ck.extra == {"lr": 0.002} and ck.config == net.config
    back = ck.build()
    for k, v in net.params.items():
        assert back.params[k].tobytes() == v.tobytes() and back.params[k].dtype == v.dtype
    z, cond = _inputs()
    assert back(z, cond, 0.4).tobytes() == net(z, cond, 0.4).tobytes()


def test_header_layout():
    net = _net()
    buf = C.encode_checkpoint(net, step=7)
    assert buf[:4] == b"E2PC"
    assert struct.unpack_from("<I", buf, 4)[0] == C.VERSION
    assert buf[8:16] == net.config.digest()
    assert struct.unpack_from("<II", buf, 16) == (7, len(net.params))
    assert C.encode_checkpoint(net, step=7) == buf


@pytest.mark.parametrize("frac", [0.0, 0.01, 0.3, 0.7, 0.999])
def test_truncated_is_corrupt(frac):
    buf = C.encode_checkpoint(_net())
    with pytest.raises(C.CorruptCheckpointError):
        C.decode_checkpoint(buf[: int(len(buf) * frac)])


def test_trailing_bytes_and_bad_magic():
    buf = C.encode_checkpoint(_net())
    with pytest.raises(C.CorruptCheckpointError):
        C.decode_checkpoint(buf + b"x")
    with pytest.raises(C.CorruptCheckpointError):
        C.decode_checkpoint(b"XXXX" + buf[4:])


def test_version_mismatch():
    buf = bytearray(C.encode_checkpoint(_net()))
    struct.pack_into("<I", buf, 4, C.VERSION + 1)
    with pytest.raises(C.VersionMismatchError):
        C.decode_checkpoint(bytes(buf))


def test_hash_mismatch():
    buf = bytearray(C.encode_checkpoint(_net()))
    buf[8] ^= 0xFF
    with pytest.raises(C.HashMismatchError):
        C.decode_checkpoint(bytes(buf))


def test_shape_mismatch_into_other_net():
    ck = C.decode_checkpoint(C.encode_checkpoint(_net(widths=(8, 16))))
    with pytest.raises(C.HashMismatchError):
        C.load_into(_net(), ck)
    ck.config = NetConfig()
    with pytest.raises(C.ShapeMismatchError):
        C.load_into(_net(), ck)
    ck2 = C.decode_checkpoint(C.encode_checkpoint(_net()))
    del ck2.params["skip.w"]
    with pytest.raises(C.ShapeMismatchError):
        C.load_into(_net(), ck2)


def test_float64_net_refused_unless_exact():
    net = VelocityNet(NetConfig(widths=(4, 4), dtype="float64"), seed=2, zero_final=False)
    with pytest.raises(C.CheckpointError):
        C.encode_checkpoint(net)
    for k in net.params:
        net.params[k] = net.params[k].astype(np.float32).astype(np.float64)
    back = C.decode_checkpoint(C.encode_checkpoint(net)).build()
    assert all(np.array_equal(back.params[k], v) for k, v in net.params.items())
