"""LCK1 checkpoint files: named tensor sections with a CRC32 trailer.

Layout (little-endian)::

    magic "LCK1" | u32 version | u32 section_count
    per section: u32 name_len | name (UTF-8) | u8 dtype | u32 rank | rank x u32 extents | payload
    u32 CRC32 of every byte after the magic

dtype codes: 0 float32, 1 float64, 2 raw bytes (the ``meta`` section holds
sorted-key JSON).  Section names: ``meta``, ``param/<name>``,
``best/<name>``, ``adam_m/<name>``, ``adam_v/<name>``.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, CorruptionError, FormatError, ShapeError
from .model import init_parameters

MAGIC = b"LCK1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    params: dict
    dfe_config: dict
    train_config: dict = field(default_factory=dict)
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val: float = float("inf")
    best_params: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_params(self, which="params"):
        """Rebuild :class:`DFEParameters` from the current or best tensors."""
        state = self.params if which == "params" else self.best_params
        if state is None:
            raise ContractError(f"checkpoint holds no {which!r} tensors")
        dtype = next(iter(state.values())).dtype
        params = init_parameters(**self.dfe_config, seed=0, dtype=dtype)
        params.load_state_dict(state)
        return params

    @property
    def tau(self):
        return float(np.exp(self.params["log_tau"]))

    def param_count(self):
        return int(sum(v.size for v in self.params.values()))

    def check_against(self, skeleton):
        """Raise if names or shapes differ from ``skeleton`` (a DFEParameters)."""
        named = skeleton.named_tensors()
        if set(named) != set(self.params):
            missing, extra = set(named) - set(self.params), set(self.params) - set(named)
            raise ContractError(f"checkpoint/model name mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in named.items():
            if self.params[k].shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {self.params[k].shape} vs model {t.shape}")


def _section(name, array):
    name_b = name.encode("utf-8")
    arr = np.asarray(array)
    if arr.dtype == np.uint8:
        code = 2
    else:
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ContractError(f"{name}: unsupported dtype {arr.dtype}")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    head = struct.pack("<I", len(name_b)) + name_b + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload


def _meta(ckpt):
    meta = {
        "dfe_config": ckpt.dfe_config,
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "best_val": ckpt.best_val,
        "extra": ckpt.extra,
    }
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def dumps(ckpt):
    sections = [("meta", _meta(ckpt))]
    sections += [(f"param/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.best_params is not None:
        sections += [(f"best/{k}", v) for k, v in ckpt.best_params.items()]
    sections += [(f"adam_m/{k}", v) for k, v in ckpt.opt_m.items()]
    sections += [(f"adam_v/{k}", v) for k, v in ckpt.opt_v.items()]
    body = struct.pack("<II", VERSION, len(sections)) + b"".join(_section(n, a) for n, a in sections)
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def read_sections(raw):
    """Validate framing and CRC; return ``(version, [(name, array), ...])``."""
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise CorruptionError("truncated checkpoint")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("CRC mismatch")
    version, count = struct.unpack_from("<II", body, 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off, out = 8, []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BI", body, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            dt = _DTYPES[code]
            count_items = int(np.prod(shape)) if rank else 1
            nbytes = count_items * dt.itemsize
            if off + nbytes > len(body):
                raise CorruptionError(f"section {name!r} overruns the file")
            arr = np.frombuffer(body, dtype=dt, count=count_items, offset=off).reshape(shape)
            off += nbytes
            out.append((name, arr.astype(dt.newbyteorder("=")) if code != 2 else arr.copy()))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"malformed section table: {exc}") from None
    if off != len(body):
        raise CorruptionError("trailing bytes after the last section")
    return version, out


def loads(raw, skeleton=None):
    _, sections = read_sections(raw)
    groups = {"param": {}, "best": {}, "adam_m": {}, "adam_v": {}}
    meta = None
    for name, arr in sections:
        if name == "meta":
            meta = json.loads(arr.tobytes().decode("utf-8"))
            continue
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise FormatError(f"unknown section {name!r}")
        groups[kind][key] = arr
    if meta is None:
        raise FormatError("checkpoint has no meta section")
    ckpt = Checkpoint(
        params=groups["param"],
        dfe_config=meta["dfe_config"],
        train_config=meta["train_config"],
        opt_m=groups["adam_m"],
        opt_v=groups["adam_v"],
        step=meta["step"],
        epoch=meta["epoch"],
        best_val=meta["best_val"],
        best_params=groups["best"] or None,
        extra=meta["extra"],
    )
    if skeleton is not None:
        ckpt.check_against(skeleton)
    return ckpt


def load_checkpoint(path, skeleton=None):
    with open(path, "rb") as fh:
        return loads(fh.read(), skeleton)


def checkpoint_from_params(params, train_config=None):
    """A checkpoint holding only parameters (no optimiser history)."""
    return Checkpoint(params=params.state_dict(), dfe_config=params.config.to_dict(), train_config=train_config or {})
