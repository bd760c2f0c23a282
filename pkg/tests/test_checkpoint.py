import struct
import zlib

import numpy as np
import pytest

from lightcrl.checkpoint import (
    MAGIC,
    Checkpoint,
    checkpoint_from_params,
    dumps,
    load_checkpoint,
    loads,
    read_sections,
    save_checkpoint,
)
from lightcrl.data import SyntheticSpec, generate_synthetic
from lightcrl.errors import ContractError, CorruptionError, FormatError, ShapeError
from lightcrl.model import init_parameters
from lightcrl.train import TrainConfig, Trainer, split_train_val


def params(dtype=np.float64, fusion="concat", d_model=8):
    return init_parameters(5, 6, d_ctx=4, d_model=d_model, d_out=8, fusion=fusion, seed=3, dtype=dtype)


@pytest.fixture(scope="module")
def trained():
    data = generate_synthetic(SyntheticSpec(n=80, d_latent=4, d1=5, d2=6, num_classes=4, seed=2))
    tr, va = split_train_val(data, 0.25, 0)
    t = Trainer(params(), tr, va, TrainConfig(batch_k=20, max_epochs=2, precision=64))
    t.fit()
    return t.checkpoint()


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_is_byte_identical(dtype):
    ck = checkpoint_from_params(params(dtype), {"lr": 1e-3})
    raw = dumps(ck)
    back = loads(raw)
    assert dumps(back) == raw
    for k, v in ck.params.items():
        assert back.params[k].dtype == dtype and back.params[k].tobytes() == v.tobytes()
    assert back.best_params is None and back.best_val == float("inf")
    assert back.to_params().param_count() == params().param_count()


def test_full_trainer_checkpoint_round_trip(trained, tmp_path):
    path = tmp_path / "run.lck"
    save_checkpoint(trained, path)
    back = load_checkpoint(path, skeleton=params())
    assert path.read_bytes() == dumps(back)
    assert back.epoch == trained.epoch == 2 and back.step == trained.step
    assert set(back.opt_m) == set(back.params) == set(back.best_params)
    assert back.extra == trained.extra
    best = back.to_params("best")
    assert best.g1.w1.data.tobytes() == trained.best_params["g1.w1"].tobytes()


def test_layout_header_and_crc():
    raw = dumps(checkpoint_from_params(params()))
    assert raw[:4] == MAGIC == b"LCK1"
    assert struct.unpack_from("<I", raw, 4)[0] == 1
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[4:-4])
    _, sections = read_sections(raw)
    names = [n for n, _ in sections]
    assert names[0] == "meta" and all(n.startswith("param/") for n in names[1:])


def test_bad_magic_and_version():
    raw = dumps(checkpoint_from_params(params()))
    with pytest.raises(FormatError):
        loads(b"XXXX" + raw[4:])
    body = bytearray(raw[4:-4])
    body[0:4] = struct.pack("<I", 2)
    with pytest.raises(FormatError):
        loads(MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))


def test_corruption_is_detected():
    raw = bytearray(dumps(checkpoint_from_params(params())))
    for pos in (10, len(raw) // 2, len(raw) - 5):
        flipped = bytearray(raw)
        flipped[pos] ^= 0x01
        with pytest.raises(CorruptionError):
            loads(bytes(flipped))
    with pytest.raises(CorruptionError):
        loads(bytes(raw[:-9]))
    with pytest.raises(CorruptionError):
        loads(MAGIC + b"\x00" * 3)


def test_skeleton_mismatch():
    raw = dumps(checkpoint_from_params(params(fusion="concat")))
    with pytest.raises(ContractError):
        loads(raw, skeleton=params(fusion="add"))
    with pytest.raises(ShapeError):
        loads(dumps(checkpoint_from_params(params(d_model=16))), skeleton=params())


def test_unsupported_dtype_and_missing_best():
    ck = Checkpoint(params={"x": np.zeros(2, dtype=np.int64)}, dfe_config={})
    with pytest.raises(ContractError):
        dumps(ck)
    with pytest.raises(ContractError):
        checkpoint_from_params(params()).to_params("best")


def test_tau_and_count():
    ck = checkpoint_from_params(params())
    assert ck.tau == pytest.approx(0.1)
    assert ck.param_count() == params().param_count()
