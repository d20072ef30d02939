"""Binary checkpoint files for named arrays, models and buffers.

Layout (all multi-byte integers little-endian), documented byte-exactly in
the README:

    bytes 0-7   magic b"SRCKPT1\\n"
    bytes 8-11  uint32 entry count
    then per entry:
        uint16  name length, followed by that many UTF-8 name bytes
        uint8   dtype code: 0 = float64, 1 = int64, 2 = uint64
        uint8   ndim
        uint32  x ndim dimension sizes
        raw little-endian array payload

Entry order is preserved, so writing the same state twice yields identical
bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .buffer import BufferItem, MemoryBuffer
from .errors import FormatError

MAGIC = b"SRCKPT1\n"

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("<u8")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1, np.dtype(np.uint64): 2}


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"bad checkpoint magic at byte offset 0 in {path}")
    (count,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} at byte offset {pos - 2}")
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n_bytes = int(np.prod(shape)) * 8 if ndim else 8
        arr = np.frombuffer(raw, dtype=_DTYPES[code], count=max(int(np.prod(shape)), 1) if ndim else 1, offset=pos)
        pos += n_bytes
        out[name] = arr.reshape(shape).copy()
    return out


# -------------------------------------------------------------------- models

def model_state(classifier, labelnet=None) -> dict[str, np.ndarray]:
    state: dict[str, np.ndarray] = {}
    for name in classifier.theta.names:
        state[f"classifier/{name}"] = classifier.theta.view(name)
    if labelnet is not None:
        for name in labelnet.omega.names:
            state[f"labels_live/{name}"] = labelnet.omega.view(name)
        for name in labelnet.omega_old.names:
            state[f"labels_old/{name}"] = labelnet.omega_old.view(name)
        state["labels_beta"] = np.array([labelnet.beta])
    return state


def save_model(path, classifier, labelnet=None) -> None:
    save_arrays(path, model_state(classifier, labelnet))


def load_model(path, classifier, labelnet=None) -> None:
    """Restore parameters in place; segment names and shapes must match."""
    state = load_arrays(path)

    def restore(prefix, params):
        for name in params.names:
            key = f"{prefix}/{name}"
            if key not in state:
                raise FormatError(f"checkpoint is missing segment {key}")
            arr = state[key]
            if arr.shape != params.view(name).shape:
                raise FormatError(f"segment {key} has shape {arr.shape}, "
                                  f"expected {params.view(name).shape}")
            params.view(name)[...] = arr

    restore("classifier", classifier.theta)
    if labelnet is not None:
        restore("labels_live", labelnet.omega)
        restore("labels_old", labelnet.omega_old)
        labelnet.beta = float(state["labels_beta"][0])


# -------------------------------------------------------------------- buffer

def _split_u128(value: int) -> tuple[int, int]:
    return (value >> 64) & (2 ** 64 - 1), value & (2 ** 64 - 1)


def _pcg64_state_arrays(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    s_hi, s_lo = _split_u128(st["state"]["state"])
    i_hi, i_lo = _split_u128(st["state"]["inc"])
    return np.array([s_hi, s_lo, i_hi, i_lo, st["has_uint32"], st["uinteger"]],
                    dtype=np.uint64)


def _restore_pcg64(arr: np.ndarray) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (int(arr[0]) << 64) | int(arr[1]),
                  "inc": (int(arr[2]) << 64) | int(arr[3])},
        "has_uint32": int(arr[4]),
        "uinteger": int(arr[5]),
    }
    return rng


def save_buffer(path, buffer: MemoryBuffer) -> None:
    items = buffer.items
    n = len(items)
    dim = items[0].x.size if n else 0
    c = items[0].y_onehot.size if n else 0
    xs = np.zeros((n, dim))
    ys = np.zeros((n, c))
    logits = np.zeros((n, c))
    has_logits = np.zeros(n, dtype=np.int64)
    stream_index = np.zeros(n, dtype=np.int64)
    task_id = np.zeros(n, dtype=np.int64)
    for i, item in enumerate(items):
        xs[i] = item.x
        ys[i] = item.y_onehot
        if item.stored_logits is not None:
            logits[i] = item.stored_logits
            has_logits[i] = 1
        stream_index[i] = item.stream_index
        task_id[i] = item.task_id
    save_arrays(path, {
        "buffer/x": xs, "buffer/y": ys, "buffer/logits": logits,
        "buffer/has_logits": has_logits, "buffer/stream_index": stream_index,
        "buffer/task_id": task_id,
        "buffer/seen": np.array([buffer.seen], dtype=np.int64),
        "buffer/capacity": np.array([buffer.capacity], dtype=np.int64),
        "buffer/rng": _pcg64_state_arrays(buffer.rng),
    })


def load_buffer(path) -> MemoryBuffer:
    state = load_arrays(path)
    buf = MemoryBuffer(int(state["buffer/capacity"][0]),
                       _restore_pcg64(state["buffer/rng"]))
    buf.seen = int(state["buffer/seen"][0])
    for i in range(state["buffer/x"].shape[0]):
        buf.items.append(BufferItem(
            x=state["buffer/x"][i],
            y_onehot=state["buffer/y"][i],
            stored_logits=state["buffer/logits"][i] if state["buffer/has_logits"][i] else None,
            stream_index=int(state["buffer/stream_index"][i]),
            task_id=int(state["buffer/task_id"][i]),
        ))
    return buf
