import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from pmlm.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def test_roundtrip_and_layout(tmp_path):
    path = tmp_path / "c.bin"
    tensors = {"a": torch.arange(6, dtype=torch.float32).view(2, 3), "s": torch.tensor(2.5)}
    save_checkpoint(path, tensors, {"step": 7, "name": "x y"})
    header, back = load_checkpoint(path)
    assert header == {"step": "7", "name": "x y"}
    assert torch.equal(back["a"], tensors["a"]) and float(back["s"]) == 2.5
    raw = path.read_bytes()
    assert raw.startswith(b"PMLM-CHECKPOINT 1\nstep=7\nname=x y\nEND\n")
    body = raw[len(b"PMLM-CHECKPOINT 1\nstep=7\nname=x y\nEND\n") :]
    assert struct.unpack("<I", body[:4]) == (2,)
    assert struct.unpack("<I", body[4:8]) == (1,) and body[8:9] == b"a"
    assert struct.unpack("<3I", body[9:21]) == (2, 2, 3)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(-1e6, 1e6, width=32)))
def test_arbitrary_arrays_roundtrip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ck") / "c.bin"
    save_checkpoint(path, {"t": torch.from_numpy(arr.copy())}, {})
    _, back = load_checkpoint(path)
    assert np.array_equal(back["t"].numpy(), arr)


def test_errors(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"a": torch.ones(3)}, {})
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"OTHER 1\n")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)
    path.write_bytes(b"PMLM-CHECKPOINT 2\nEND\n")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError, match="one line"):
        save_checkpoint(path, {}, {"k": "a\nb"})
