"""DDMPT1 tensor files: the on-disk exchange format for every raster and
checkpoint tensor in this package.

Layout: magic ``DDMPT1\\n``, one ASCII header line
``dtype=f32|f64 shape=N,C,H,W\\n``, then the raw little-endian row-major
payload. Files always carry exactly four dimensions; callers store
lower-rank tensors as 4-d views (e.g. a bias of length C as 1,C,1,1).
"""

import numpy as np

MAGIC = b"DDMPT1\n"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save_tensor(path, array):
    arr = np.asarray(array)
    if arr.dtype not in _NAMES:
        raise ValueError(f"tensor file dtype must be f32/f64, got {arr.dtype}")
    if arr.ndim != 4:
        raise ValueError(f"tensor files are 4-d, got shape {arr.shape}")
    name = _NAMES[arr.dtype]
    header = f"dtype={name} shape={','.join(str(s) for s in arr.shape)}\n"
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes())


def load_tensor(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected DDMPT1")
        header = b""
        while not header.endswith(b"\n"):
            ch = f.read(1)
            if not ch:
                raise ValueError(f"{path}: truncated header")
            header += ch
        payload = f.read()
    fields = dict(part.split("=", 1) for part in header.decode("ascii").split())
    if set(fields) != {"dtype", "shape"}:
        raise ValueError(f"{path}: malformed header {header!r}")
    if fields["dtype"] not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype {fields['dtype']!r}")
    shape = tuple(int(s) for s in fields["shape"].split(","))
    if len(shape) != 4:
        raise ValueError(f"{path}: shape must have 4 dims, got {shape}")
    dtype = _DTYPES[fields["dtype"]]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, "
                         f"expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)
