import numpy as np
import pytest

from dpaseg.checkpoint import MAGIC, read_parameters, write_parameters
from dpaseg.errors import FormatError


def sample_params():
    rng = np.random.default_rng(0)
    return [("a.weight", rng.standard_normal((2, 3, 3, 3))), ("a.bias", np.zeros((1, 2, 1, 1)))]


def test_round_trip_is_exact(tmp_path):
    path = tmp_path / "m.ckpt"
    write_parameters(path, sample_params(), header="depth=3\n")
    header, params = read_parameters(path)
    assert header == "depth=3\n"
    for (n1, a1), (n2, a2) in zip(sample_params(), params):
        assert n1 == n2
        assert a1.tobytes() == a2.tobytes()
    again = tmp_path / "again.ckpt"
    write_parameters(again, params, header=header)
    assert path.read_bytes() == again.read_bytes()


def test_bad_magic_names_offset(tmp_path):
    path = tmp_path / "m.ckpt"
    write_parameters(path, sample_params())
    data = bytearray(path.read_bytes())
    data[:8] = b"NOTACKPT"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="offset 0"):
        read_parameters(path)


def test_truncation_and_trailing_bytes(tmp_path):
    path = tmp_path / "m.ckpt"
    write_parameters(path, sample_params())
    data = path.read_bytes()
    assert data.startswith(MAGIC)
    path.write_bytes(data[:-5])
    with pytest.raises(FormatError, match="truncated"):
        read_parameters(path)
    path.write_bytes(data + b"x")
    with pytest.raises(FormatError, match="trailing"):
        read_parameters(path)


def test_rank_is_enforced(tmp_path):
    with pytest.raises(FormatError):
        write_parameters(tmp_path / "m.ckpt", [("v", np.zeros(3))])
