"""IDX datasets, binary checkpoints and the CSV score/report formats."""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .masks import LayerMasks, MaskSet
from .nn import LayerSpec, ModelState
from .tensor import Tensor


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class UnsupportedTypeError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class TrailingDataError(IdxFormatError):
    pass


class CheckpointError(ValueError):
    pass


IDX_UBYTE = 0x08


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise BadMagicError("IDX magic must start with two zero bytes")
    if raw[2] != IDX_UBYTE:
        raise UnsupportedTypeError(f"IDX type code 0x{raw[2]:02x} not supported (only 0x08 unsigned byte)")
    rank = raw[3]
    header = 4 + 4 * rank
    if len(raw) < header:
        raise TruncatedPayloadError(f"header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(raw) - header
    if actual < expected:
        raise TruncatedPayloadError(f"payload truncated: expected {expected} bytes, got {actual}")
    if actual > expected:
        raise TrailingDataError(f"payload too long: expected {expected} bytes, got {actual}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx(path: str | os.PathLike) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


def encode_idx(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise IdxFormatError("only uint8 arrays can be written")
    return bytes([0, 0, IDX_UBYTE, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(array))


@dataclass
class ImageDataset:
    images: np.ndarray  # N x 1 x H x W, float64
    labels: np.ndarray | None
    source: str = ""
    split: str = "test"

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int) -> ImageDataset:
        labels = None if self.labels is None else self.labels[:n]
        return ImageDataset(self.images[:n], labels, self.source, self.split)


def load_dataset(
    images_path,
    labels_path=None,
    normalize: bool = True,
    num_classes: int = 10,
    split: str = "test",
) -> ImageDataset:
    raw = read_idx(images_path)
    if raw.ndim != 3:
        raise IdxFormatError(f"image file must have rank 3 (N x H x W), got rank {raw.ndim}")
    images = raw.astype(np.float64)[:, None, :, :]
    if normalize:
        images /= 255.0
    labels = None
    if labels_path is not None:
        lab = read_idx(labels_path)
        if lab.ndim != 1 or lab.shape[0] != raw.shape[0]:
            raise IdxFormatError(f"{lab.shape[0]} labels for {raw.shape[0]} images")
        if lab.size and lab.max() >= num_classes:
            raise IdxFormatError(f"label {int(lab.max())} outside [0, {num_classes})")
        labels = lab.astype(np.int64)
    return ImageDataset(images, labels, str(images_path), split)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SDC1"
VERSION = 1


def _u64(*xs: int) -> bytes:
    return struct.pack(f"<{len(xs)}Q", *xs)


def _tensor_record(a: np.ndarray) -> bytes:
    return _u64(a.ndim, *a.shape) + np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode_checkpoint(state: ModelState, mask_set: MaskSet | None = None) -> bytes:
    out = io.BytesIO()
    layers = sorted(state.weights)
    out.write(MAGIC + bytes([VERSION]) + _u64(len(layers), state.rng_seed))
    for i in layers:
        out.write(_u64(i))
        out.write(_tensor_record(state.weights[i].data))
        out.write(_tensor_record(state.biases[i].data))
    if mask_set is None:
        out.write(_u64(0))
    else:
        out.write(_u64(len(mask_set.layers), mask_set.seed))
        for i in sorted(mask_set.layers):
            lm = mask_set.layers[i]
            out.write(_u64(i, lm.rho, *lm.shape))
            for idx in lm.zero_index:
                out.write(_u64(len(idx)) + np.asarray(idx, dtype="<i8").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"corrupt checkpoint: record at byte {self.pos} runs past end of file")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u64(self, count: int = 1):
        vals = struct.unpack(f"<{count}Q", self.take(8 * count))
        return vals[0] if count == 1 else vals

    def tensor(self) -> np.ndarray:
        rank = self.u64()
        if rank > 8:
            raise CheckpointError(f"corrupt checkpoint: tensor rank {rank}")
        dims = self.u64(rank) if rank > 1 else ((self.u64(),) if rank == 1 else ())
        n = int(np.prod(dims, dtype=np.int64))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)


def decode_checkpoint(raw: bytes) -> tuple[ModelState, MaskSet | None]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not an SDC checkpoint (bad magic)")
    if len(raw) < 5 or raw[4] != VERSION:
        found = raw[4] if len(raw) > 4 else None
        raise CheckpointError(f"checkpoint version {found} unsupported (expected {VERSION})")
    r = _Reader(raw)
    r.pos = 5
    n_layers, seed = r.u64(2)
    weights, biases = {}, {}
    for _ in range(n_layers):
        i = r.u64()
        weights[i] = Tensor(r.tensor(), requires_grad=True)
        biases[i] = Tensor(r.tensor(), requires_grad=True)
    state = ModelState(weights, biases, rng_seed=seed)
    n_masks = r.u64()
    mask_set = None
    if n_masks:
        mseed = r.u64()
        layers = {}
        rho = None
        for _ in range(n_masks):
            i, rho, rows, cols = r.u64(4)
            zero_index = []
            for _ in range(rho):
                k = r.u64()
                zero_index.append(np.frombuffer(r.take(8 * k), dtype="<i8").astype(np.int64))
            covered = np.concatenate(zero_index)
            if covered.size != rows * cols or np.unique(covered).size != covered.size:
                raise CheckpointError(f"corrupt checkpoint: masks of layer {i} are not a partition")
            layers[i] = LayerMasks((rows, cols), rho, zero_index)
        mask_set = MaskSet(rho, mseed, layers)
    if r.pos != len(raw):
        raise CheckpointError(f"corrupt checkpoint: {len(raw) - r.pos} trailing bytes")
    return state, mask_set


def save_checkpoint(path, state: ModelState, mask_set: MaskSet | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(state, mask_set))


def load_checkpoint(path, specs: Sequence[LayerSpec] | None = None) -> tuple[ModelState, MaskSet | None]:
    """Read a checkpoint; with ``specs`` given, also check every weight shape against it."""
    state, mask_set = decode_checkpoint(Path(path).read_bytes())
    if specs is not None:
        for i, s in enumerate(specs):
            if not s.has_params:
                continue
            if i not in state.weights or state.weights[i].shape != s.weight_shape():
                raise CheckpointError(f"checkpoint does not match layer {i} ({s.kind})")
    return state, mask_set


def checkpoint_num_classes(state: ModelState) -> int:
    return state.biases[max(state.biases)].shape[0]


# ---------------------------------------------------------------- CSV

SCORE_HEADER = ["id", "pred", "label", "max_p", "ent", "d_ent", "positive"]
REPORT_HEADER = ["task", "metric", "auroc_mean", "auroc_std", "runs", "seed"]


def fmt(x) -> str:
    """Shortest round-trip float text; ``None`` becomes an empty field."""
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence], preamble: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in preamble:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def read_csv_rows(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))
