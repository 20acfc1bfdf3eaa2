import json
import zipfile

import pytest
import torch

from lipsynth import checkpoint as ckpt
from lipsynth.errors import CheckpointIntegrityError, CheckpointVersionError


def test_roundtrip_exact(tmp_path):
    torch.manual_seed(0)
    net = torch.nn.Linear(4, 3)
    path = tmp_path / "c.ckpt"
    ckpt.save_checkpoint({"net": net.state_dict(), "step": 17}, path,
                         metadata={"stage": 1})
    entries, meta = ckpt.load_checkpoint(path)
    assert meta == {"stage": 1}
    assert entries["step"] == 17
    for k, v in net.state_dict().items():
        assert torch.equal(entries["net"][k], v)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointIntegrityError):
        ckpt.load_checkpoint(tmp_path / "nope.ckpt")


def test_truncated_file(tmp_path):
    path = tmp_path / "c.ckpt"
    ckpt.save_checkpoint({"x": torch.ones(10)}, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointIntegrityError):
        ckpt.load_checkpoint(path)


def test_corrupted_entry_checksum(tmp_path):
    path = tmp_path / "c.ckpt"
    ckpt.save_checkpoint({"x": torch.ones(10)}, path)
    with zipfile.ZipFile(path) as zf:
        index = json.loads(zf.read("index.json"))
        blob = zf.read("entries/x.pt")
    blob = blob[:-1] + bytes([blob[-1] ^ 0xFF])
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("index.json", json.dumps(index))
        zf.writestr("entries/x.pt", blob)
    with pytest.raises(CheckpointIntegrityError):
        ckpt.load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "c.ckpt"
    ckpt.save_checkpoint({"x": torch.ones(3)}, path)
    with zipfile.ZipFile(path) as zf:
        index = json.loads(zf.read("index.json"))
        blob = zf.read("entries/x.pt")
    index["version"] = 99
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("index.json", json.dumps(index))
        zf.writestr("entries/x.pt", blob)
    with pytest.raises(CheckpointVersionError):
        ckpt.load_checkpoint(path)


def test_missing_expected_entries(tmp_path):
    path = tmp_path / "c.ckpt"
    ckpt.save_checkpoint({"x": torch.ones(3)}, path)
    with pytest.raises(CheckpointIntegrityError):
        ckpt.load_checkpoint(path, expected_entries=["x", "y"])


def test_no_index(tmp_path):
    path = tmp_path / "c.ckpt"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("other.json", "{}")
    with pytest.raises(CheckpointIntegrityError):
        ckpt.load_checkpoint(path)
