"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"SMLT" | u32 format version | u64 len + UTF-8 JSON header
    u32 segment count
    per segment: u16 len + UTF-8 name | u8 ndim | u64 * ndim shape | float64 LE data
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Tensor
from .experts import ExpertPool
from .l0mask import HardConcreteMask
from .metaopt import TrainState
from .optim import Adam
from .params import LayerSpec, ParamSet
from .router import RouterParams

MAGIC = b"SMLT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    exit_code = 1


class ChecksumError(CheckpointError):
    exit_code = 4


class VersionError(CheckpointError):
    exit_code = 5


@dataclass
class Checkpoint:
    header: dict
    segments: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        hdr = json.dumps(self.header, sort_keys=True, separators=(",", ":")).encode()
        buf.write(struct.pack("<Q", len(hdr)))
        buf.write(hdr)
        buf.write(struct.pack("<I", len(self.segments)))
        for name, arr in self.segments.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.tobytes())
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < 4 + 4 + 32 or raw[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, digest = raw[:-32], raw[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("checkpoint checksum mismatch")
        (version,) = struct.unpack_from("<I", body, 4)
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        off = 8
        (n,) = struct.unpack_from("<Q", body, off)
        off += 8
        header = json.loads(body[off:off + n].decode())
        off += n
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        segments = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape)
            segments[name] = arr.astype(np.float64)
            off += 8 * size
        if off != len(body):
            raise CheckpointError("trailing bytes after last segment")
        return cls(header, segments)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ParamSet / state (de)serialization -------------------------------------------

def specs_to_json(specs) -> list:
    return [[s.name, s.kind, list(s.shape), s.depth_index] for s in specs]


def specs_from_json(raw) -> tuple[LayerSpec, ...]:
    return tuple(LayerSpec(n, k, tuple(sh), d) for n, k, sh, d in raw)


def put_paramset(segments: dict, prefix: str, p: ParamSet) -> None:
    for s, v in p:
        segments[f"{prefix}/{s.name}"] = v.data


def get_paramset(segments: dict, prefix: str, specs) -> ParamSet:
    values = []
    for s in specs:
        key = f"{prefix}/{s.name}"
        if key not in segments:
            raise CheckpointError(f"missing segment {key}")
        arr = segments[key]
        if tuple(arr.shape) != s.shape:
            raise CheckpointError(f"segment {key} has shape {arr.shape}, expected {s.shape}")
        values.append(Tensor(arr))
    return ParamSet(specs, values)


def state_to_checkpoint(state: TrainState, header: dict) -> Checkpoint:
    pool, router = state.pool, state.router
    header = dict(header)
    header.update({
        "kind": "smat",
        "specs": specs_to_json(pool.specs),
        "n_experts": pool.n_experts,
        "router_names": router.names(),
    })
    seg: dict[str, np.ndarray] = {}
    put_paramset(seg, "theta_pre", pool.theta_pre)
    put_paramset(seg, "theta_delta", pool.theta_delta)
    for i, m in enumerate(pool.masks):
        seg[f"mask/{i}/log_alpha"] = m.log_alpha.data
        seg[f"mask/{i}/hyper"] = np.array([m.beta, m.gamma, m.zeta_s])
    seg["lambdas"] = pool.lambdas
    seg["tau"] = np.array([pool.tau])
    for name, arr in router.arrays.items():
        seg[f"router/{name}"] = arr
    seg["router/meta"] = np.array([router.n_heads, router.gumbel_temp])
    for k, v in state.opt.state_arrays().items():
        seg[f"opt/{k}"] = v
    seg["opt/lr"] = np.array([state.opt.lr])
    seg["step"] = np.array([float(state.step)])
    return Checkpoint(header, seg)


def state_from_checkpoint(ck: Checkpoint) -> TrainState:
    h, seg = ck.header, ck.segments
    if h.get("kind") != "smat":
        raise CheckpointError(f"expected an SMAT checkpoint, got kind {h.get('kind')!r}")
    specs = specs_from_json(h["specs"])
    theta_pre = get_paramset(seg, "theta_pre", specs)
    theta_delta = get_paramset(seg, "theta_delta", specs)
    masks = []
    for i in range(h["n_experts"]):
        beta, gamma, zeta = seg[f"mask/{i}/hyper"].tolist()
        la = seg[f"mask/{i}/log_alpha"]
        if la.shape != (theta_pre.total_dim,):
            raise CheckpointError(f"mask {i} does not match the architecture")
        masks.append(HardConcreteMask(Tensor(la), beta, gamma, zeta))
    pool = ExpertPool(theta_pre, theta_delta, masks, seg["lambdas"].copy(), float(seg["tau"][0]))
    n_heads, temp = seg["router/meta"].tolist()
    router = RouterParams({n: seg[f"router/{n}"].copy() for n in h["router_names"]},
                          h["n_experts"], int(n_heads), float(temp))
    opt = Adam(float(seg["opt/lr"][0]))
    opt.load_arrays({k[4:]: v for k, v in seg.items() if k.startswith("opt/") and k != "opt/lr"})
    return TrainState(pool, router, int(seg["step"][0]), opt)


def model_checkpoint(params: ParamSet, header: dict, kind: str = "pretrained") -> Checkpoint:
    header = dict(header)
    header.update({"kind": kind, "specs": specs_to_json(params.specs)})
    seg: dict[str, np.ndarray] = {}
    put_paramset(seg, "theta", params)
    return Checkpoint(header, seg)


def model_from_checkpoint(ck: Checkpoint) -> ParamSet:
    """Dense parameters from a model checkpoint, or the base of an SMAT one."""
    specs = specs_from_json(ck.header["specs"])
    if ck.header.get("kind") == "smat":
        return get_paramset(ck.segments, "theta_pre", specs)
    return get_paramset(ck.segments, "theta", specs)


def mask_checkpoint(mask: HardConcreteMask, specs, header: dict) -> Checkpoint:
    header = dict(header)
    header.update({"kind": "mask", "specs": specs_to_json(specs)})
    return Checkpoint(header, {"mask/0/log_alpha": mask.log_alpha.data,
                               "mask/0/hyper": np.array([mask.beta, mask.gamma, mask.zeta_s])})
