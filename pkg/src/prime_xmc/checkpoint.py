"""Binary checkpoint format.

Little-endian layout: magic ``PRIM``, version u32, encoder header (d, V,
t_max as u32), then the encoder matrices (token table, projection, bias) as
row-major f32.  Everything after that is a sequence of tagged segments, each
``tag[4] | ndim u32 | dims u32... | payload``; payloads are f32 except the
integer segments (bank assignment, touch counters) which are u32.

Writes are atomic: a temp file in the target directory is renamed over the
destination only after a successful flush.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .encoder import EncoderGrads, EncoderParams
from .model import PrimeModel
from .prototype_net import (
    CentroidStore,
    FreeVectorBank,
    PrototypeNetGrads,
    PrototypeNetParams,
)

MAGIC = b"PRIM"
VERSION = 1

_PROTO_SEGMENTS = (
    (b"ATWQ", "w_q"),
    (b"ATWK", "w_k"),
    (b"ATWV", "w_v"),
    (b"ATWO", "w_o"),
    (b"FFNI", "ffn_in"),
    (b"FFIB", "ffn_in_bias"),
    (b"FFNO", "ffn_out"),
    (b"FFOB", "ffn_out_bias"),
    (b"LN1G", "ln1_gain"),
    (b"LN1B", "ln1_bias"),
    (b"LN2G", "ln2_gain"),
    (b"LN2B", "ln2_bias"),
)


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


def _write_segment(fh, tag: bytes, array: np.ndarray, dtype: str) -> None:
    data = np.ascontiguousarray(array, dtype=dtype)
    fh.write(tag)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_segment(fh) -> tuple[bytes, np.ndarray] | None:
    tag = fh.read(4)
    if not tag:
        return None
    if len(tag) != 4:
        raise CheckpointError("truncated segment tag")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    if ndim > 4:
        raise CheckpointError(f"implausible segment rank {ndim}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    dtype = "<u4" if tag in (b"ASGN", b"TCHD") else "<f4"
    payload = np.frombuffer(_read_exact(fh, 4 * count), dtype=dtype).reshape(shape)
    return tag, payload


def save_checkpoint(path: str | Path, model: PrimeModel) -> None:
    path = Path(path)
    enc = model.encoder
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<III", enc.dim, enc.vocab_size, enc.t_max))
            fh.write(np.ascontiguousarray(enc.token_table, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(enc.proj, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(enc.proj_bias, dtype="<f4").tobytes())
            for tag, attr in _PROTO_SEGMENTS:
                _write_segment(fh, tag, getattr(model.proto, attr), "<f4")
            _write_segment(fh, b"HCFG", np.array(
                [model.proto.dropout_rate, model.centroids.alpha]), "<f4")
            _write_segment(fh, b"CENT", model.centroids.centroids, "<f4")
            _write_segment(fh, b"TCHD", model.centroids.touched, "<u4")
            _write_segment(fh, b"BANK", model.bank.vectors, "<f4")
            _write_segment(fh, b"ASGN", model.bank.assignment, "<u4")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> PrimeModel:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        dim, vocab, t_max = struct.unpack("<III", _read_exact(fh, 12))
        table = np.frombuffer(_read_exact(fh, 4 * vocab * dim), dtype="<f4").reshape(vocab, dim)
        proj = np.frombuffer(_read_exact(fh, 4 * dim * dim), dtype="<f4").reshape(dim, dim)
        bias = np.frombuffer(_read_exact(fh, 4 * dim), dtype="<f4")
        segments: dict[bytes, np.ndarray] = {}
        while True:
            seg = _read_segment(fh)
            if seg is None:
                break
            segments[seg[0]] = seg[1]

    required = [tag for tag, _ in _PROTO_SEGMENTS] + [b"HCFG", b"CENT", b"TCHD", b"BANK", b"ASGN"]
    for tag in required:
        if tag not in segments:
            raise CheckpointError(f"{path}: missing segment {tag.decode()}")

    encoder = EncoderParams(
        token_table=table.astype(np.float64),
        proj=proj.astype(np.float64),
        proj_bias=bias.astype(np.float64),
        dim=dim,
        vocab_size=vocab,
        t_max=t_max,
    )
    hcfg = segments[b"HCFG"]
    ffn_in = segments[b"FFNI"].astype(np.float64)
    proto = PrototypeNetParams(
        **{attr: segments[tag].astype(np.float64) for tag, attr in _PROTO_SEGMENTS},
        dim=dim,
        d_ffn=int(ffn_in.shape[1]),
        dropout_rate=float(hcfg[0]),
    )
    centroids = CentroidStore(
        centroids=segments[b"CENT"].astype(np.float64),
        alpha=float(hcfg[1]),
        touched=segments[b"TCHD"].astype(np.int64),
    )
    bank = FreeVectorBank(
        vectors=segments[b"BANK"].astype(np.float64),
        assignment=segments[b"ASGN"].astype(np.int64),
        grad=np.zeros(segments[b"BANK"].shape),
    )
    return PrimeModel(
        encoder=encoder,
        encoder_grads=EncoderGrads.zeros(encoder),
        proto=proto,
        proto_grads=PrototypeNetGrads.zeros(proto),
        centroids=centroids,
        bank=bank,
    )
