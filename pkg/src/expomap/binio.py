"""Binary container files for kernel blocks and generator weights.

Both formats share the same conventions: an 8-byte magic, a little-endian
fixed header, then raw array payloads. Nothing here is meant to be portable
beyond little-endian IEEE-754 machines.
"""

from __future__ import annotations

import struct

import numpy as np

from .cntk import KernelBlock
from .glip import GlipNet

KERNEL_MAGIC = b"EXPOKRN1"
NET_MAGIC = b"EXPONET1"

_PRECISION_CODE = {"f32": 0, "f64": 1}
_PRECISION_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_kernel_block(
    path,
    block: KernelBlock,
    grid_shape: tuple[int, int],
    layers: int,
    filter_size: int,
    leaky_slope: float,
    precision: str,
) -> None:
    """Write a kernel block cache file.

    Layout: magic, u32 version, u32 M, u32 N, u32 layers, u32 filter,
    f64 slope, u8 precision, u64 n_rows, u64 n_cols, row indices (u64),
    col indices (u64), entries row-major in the stated precision.
    """
    code = _PRECISION_CODE[precision]
    header = struct.pack(
        "<8sIIIIIdBQQ",
        KERNEL_MAGIC,
        1,
        grid_shape[0],
        grid_shape[1],
        layers,
        filter_size,
        leaky_slope,
        code,
        len(block.rows),
        len(block.cols),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(block.rows.astype("<u8").tobytes())
        fh.write(block.cols.astype("<u8").tobytes())
        fh.write(np.ascontiguousarray(block.entries, dtype=_PRECISION_DTYPE[code]).tobytes())


def load_kernel_block(path) -> tuple[KernelBlock, dict]:
    """Read back a kernel block and its header metadata."""
    fmt = "<8sIIIIIdBQQ"
    size = struct.calcsize(fmt)
    with open(path, "rb") as fh:
        magic, version, m, n, layers, q, slope, code, n_rows, n_cols = struct.unpack(
            fmt, fh.read(size)
        )
        if magic != KERNEL_MAGIC:
            raise ValueError(f"not a kernel cache file (magic {magic!r})")
        if version != 1:
            raise ValueError(f"unsupported kernel cache version {version}")
        rows = np.frombuffer(fh.read(8 * n_rows), dtype="<u8").astype(np.int64)
        cols = np.frombuffer(fh.read(8 * n_cols), dtype="<u8").astype(np.int64)
        dtype = _PRECISION_DTYPE[code]
        entries = np.frombuffer(
            fh.read(dtype.itemsize * n_rows * n_cols), dtype=dtype
        ).reshape(n_rows, n_cols)
    meta = {
        "grid_shape": (m, n),
        "layers": layers,
        "filter_size": q,
        "leaky_slope": slope,
        "precision": "f64" if code == 1 else "f32",
    }
    return KernelBlock(rows=rows, cols=cols, entries=np.array(entries)), meta


def save_glip_net(path, net: GlipNet) -> None:
    """Write generator weights: header with widths, then f64 W/b blobs."""
    header = struct.pack(
        "<8sIqI", NET_MAGIC, 1, net.seed, len(net.widths)
    ) + struct.pack(f"<{len(net.widths)}I", *net.widths)
    with open(path, "wb") as fh:
        fh.write(header)
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_glip_net(path) -> GlipNet:
    fmt = "<8sIqI"
    size = struct.calcsize(fmt)
    with open(path, "rb") as fh:
        magic, version, seed, n_widths = struct.unpack(fmt, fh.read(size))
        if magic != NET_MAGIC:
            raise ValueError(f"not a net weights file (magic {magic!r})")
        if version != 1:
            raise ValueError(f"unsupported net weights version {version}")
        widths = struct.unpack(f"<{n_widths}I", fh.read(4 * n_widths))
        weights, biases = [], []
        q = 3
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            w = np.frombuffer(fh.read(8 * c_out * c_in * q * q), dtype="<f8")
            weights.append(np.array(w).reshape(c_out, c_in, q, q))
            biases.append(np.array(np.frombuffer(fh.read(8 * c_out), dtype="<f8")))
    return GlipNet(widths=tuple(widths), weights=weights, biases=biases, seed=seed)
