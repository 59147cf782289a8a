"""Binary file formats: raw video clips (RVID) and tensor checkpoints (LTXK).

Both formats are little-endian with no alignment padding. RVID stores one
[T, H, W, C] float32 volume plus its frame rate and serves pixels and
latents alike; LTXK stores an ordered sequence of named float32 tensors.
Parse failures report the absolute byte offset of the problem.
"""

import struct

import numpy as np

RVID_MAGIC = b"RVID"
CKPT_MAGIC = b"LTXK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed binary file; message carries the byte offset."""


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at byte "
                f"{self.pos} (need {n} bytes, have {len(self.blob) - self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def expect_magic(self, magic):
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(
                f"{self.path}: bad magic {got!r} at byte 0, expected {magic!r}")
        (version,) = self.unpack("I", "version")
        if version != FORMAT_VERSION:
            raise FormatError(
                f"{self.path}: unsupported version {version} at byte "
                f"{len(magic)}, expected {FORMAT_VERSION}")

    def done(self):
        if self.pos != len(self.blob):
            raise FormatError(
                f"{self.path}: {len(self.blob) - self.pos} trailing bytes at "
                f"byte {self.pos}")


def write_rvid(path, data, fps):
    data = np.ascontiguousarray(np.asarray(data, dtype="<f4"))
    if data.ndim != 4:
        raise ValueError(f"RVID stores [T,H,W,C] volumes, got rank {data.ndim}")
    with open(path, "wb") as f:
        f.write(RVID_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<IIII", *data.shape))
        f.write(struct.pack("<f", float(fps)))
        f.write(data.tobytes())


def read_rvid(path):
    """-> (float32 array [T,H,W,C], fps)."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    r.expect_magic(RVID_MAGIC)
    t, h, w, c = r.unpack("IIII", "dimensions")
    (fps,) = r.unpack("f", "fps")
    count = t * h * w * c
    payload = r.take(4 * count, f"{count} float32 samples")
    r.done()
    data = np.frombuffer(payload, dtype="<f4").reshape(t, h, w, c)
    return data.astype(np.float32, copy=True), float(fps)


def write_checkpoint(path, named):
    """Save an ordered {name: array} mapping; insertion order is preserved."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            if not isinstance(name, str):
                raise ValueError(f"tensor names must be strings, got {name!r}")
            # not ascontiguousarray: that would promote rank-0 scalars to
            # rank 1, and tobytes() already emits C order
            arr = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"tensor name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise ValueError(f"tensor rank {arr.ndim} exceeds format limit")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path):
    """-> ordered {name: float32 array} exactly as written."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    r.expect_magic(CKPT_MAGIC)
    (count,) = r.unpack("I", "tensor count")
    named = {}
    for i in range(count):
        (name_len,) = r.unpack("H", f"name length of tensor {i}")
        raw = r.take(name_len, f"name of tensor {i}")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(
                f"{r.path}: tensor {i} name is not UTF-8 at byte "
                f"{r.pos - name_len}: {e}") from None
        (rank,) = r.unpack("B", f"rank of {name}")
        dims = r.unpack(f"{rank}I", f"dims of {name}") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * n, f"payload of {name}")
        if name in named:
            raise FormatError(f"{r.path}: duplicate tensor name {name!r}")
        named[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(
            np.float32, copy=True)
    r.done()
    return named
