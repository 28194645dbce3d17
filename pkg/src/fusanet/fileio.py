"""File formats: PFM images, point-set CSV, checkpoints, scene bundles.

PFM stores rows bottom to top as 4-byte floats; a negative scale marks
little-endian data.  Depth maps use the convention that invalid pixels are
written as -1 (PFM has no comments, so the convention is also recorded in
each scene's JSON sidecar).  All writes are atomic (temp file + rename).
"""

import json
import os
import struct
import tempfile

import numpy as np

from .saliency import GuidingPointSet
from .train import ModelState

CHECKPOINT_MAGIC = b"FUSANET-CKPT"
CHECKPOINT_VERSION = 1
INVALID_DEPTH = -1.0


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def pfm_write(path, image, scale=1.0):
    """Write (H, W) as grayscale 'Pf' or (H, W, 3) as colour 'PF'."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        header = b"Pf"
        h, w = image.shape
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
        h, w = image.shape[:2]
    else:
        raise ValueError(f"PFM stores (H, W) or (H, W, 3); got shape {image.shape}")
    payload = image[::-1].astype("<f4").tobytes()  # bottom-to-top row order
    head = b"%s\n%d %d\n%f\n" % (header, w, h, -abs(scale))
    _atomic_write(path, head + payload)


def pfm_read(path):
    """Read a PFM file; returns (array float64, scale).  Colour maps come
    back as (H, W, 3).  Malformed input raises with the byte offset."""
    with open(path, "rb") as f:
        raw = f.read()

    def fail(msg, offset):
        raise ValueError(f"{path}: {msg} at byte {offset}")

    def token(start):
        end = start
        while end < len(raw) and raw[end : end + 1] not in (b" ", b"\n", b"\r", b"\t"):
            end += 1
        if end == start:
            fail("missing header token", start)
        return raw[start:end], end + 1

    magic, pos = token(0)
    if magic not in (b"Pf", b"PF"):
        fail(f"not a PFM header (got {magic!r})", 0)
    color = magic == b"PF"
    wtok, pos = token(pos)
    htok, pos = token(pos)
    stok, pos = token(pos)
    try:
        w, h = int(wtok), int(htok)
        scale = float(stok)
    except ValueError:
        fail("malformed dimensions or scale", pos)
    if w <= 0 or h <= 0 or scale == 0:
        fail("non-positive dimensions or zero scale", pos)
    endian = "<" if scale < 0 else ">"
    count = w * h * (3 if color else 1)
    need = count * 4
    if len(raw) - pos < need:
        fail(f"truncated payload ({len(raw) - pos} of {need} bytes)", pos)
    data = np.frombuffer(raw[pos : pos + need], dtype=endian + "f4").astype(np.float64)
    shape = (h, w, 3) if color else (h, w)
    return data.reshape(shape)[::-1].copy(), abs(scale)


def depth_write(path, depth, valid=None):
    """Depth map to PFM with invalid pixels stored as -1."""
    depth = np.asarray(depth, dtype=np.float64)
    out = depth.copy()
    if valid is not None:
        out[~np.asarray(valid, bool)] = INVALID_DEPTH
    pfm_write(path, out)


def depth_read(path):
    """PFM to (depth, valid); non-positive stored values are invalid."""
    arr, _ = pfm_read(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a grayscale depth PFM")
    valid = arr > 0
    return arr, valid


# ---------------------------------------------------------------------------
# point sets
# ---------------------------------------------------------------------------

def points_write(path, points):
    lines = ["row,col,depth"]
    for r, c, d in zip(points.rows, points.cols, points.depths):
        lines.append(f"{int(r)},{int(c)},{d:.12g}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def points_read(path):
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "row,col,depth":
        raise ValueError(f"{path}: expected header 'row,col,depth'")
    rows, cols, depths = [], [], []
    for ln in lines[1:]:
        r, c, d = ln.split(",")
        rows.append(int(r))
        cols.append(int(c))
        depths.append(float(d))
    return GuidingPointSet.from_arrays(rows, cols, depths)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_record(name, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    nb = name.encode()
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.astype("<f8").tobytes()


def checkpoint_save(path, state):
    """Self-describing binary: magic, version, config hash, then one record
    per tensor (name, rank, extents, little-endian float64 payload).
    Optimizer moments and counters ride along as prefixed records."""
    records = []
    for name, arr in state.params.items():
        records.append(_pack_record(name, arr))
    for name, arr in state.adam_m.items():
        records.append(_pack_record(f"adam_m.{name}", arr))
    for name, arr in state.adam_v.items():
        records.append(_pack_record(f"adam_v.{name}", arr))
    records.append(_pack_record("meta.adam_t", np.array(float(state.adam_t))))
    records.append(_pack_record("meta.epoch", np.array(float(state.epoch))))
    digest = state.config_digest.encode()
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<I", len(digest))
        + digest
        + struct.pack("<I", len(records))
        + b"".join(records)
    )
    _atomic_write(path, blob)


def checkpoint_load(path, expected_digest=None):
    with open(path, "rb") as f:
        raw = f.read()
    pos = len(CHECKPOINT_MAGIC)
    if raw[:pos] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dlen, = struct.unpack_from("<I", raw, pos)
    pos += 4
    digest = raw[pos : pos + dlen].decode()
    pos += dlen
    if expected_digest is not None and digest != expected_digest:
        raise ValueError(
            f"{path}: config hash mismatch (checkpoint {digest}, expected {expected_digest})"
        )
    nrec, = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(nrec):
        nlen, = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + nlen].decode()
        pos += nlen
        rank, = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += count * 8
        tensors[name] = arr.astype(np.float64)

    params = {k: v for k, v in tensors.items()
              if not k.startswith(("adam_m.", "adam_v.", "meta."))}
    return ModelState(
        params=params,
        adam_m={k[len("adam_m."):]: v for k, v in tensors.items() if k.startswith("adam_m.")},
        adam_v={k[len("adam_v."):]: v for k, v in tensors.items() if k.startswith("adam_v.")},
        adam_t=int(tensors["meta.adam_t"].reshape(-1)[0]),
        epoch=int(tensors["meta.epoch"].reshape(-1)[0]),
        config_digest=digest,
    )


# ---------------------------------------------------------------------------
# scene bundles
# ---------------------------------------------------------------------------

def scene_save(directory, scene, stem):
    os.makedirs(directory, exist_ok=True)
    pfm_write(os.path.join(directory, f"{stem}.rgb.pfm"), scene.rgb)
    depth_write(os.path.join(directory, f"{stem}.depth.pfm"), scene.depth, scene.valid)
    sidecar = {
        "descriptor": scene.descriptor,
        "invalid_depth_convention": INVALID_DEPTH,
    }
    _atomic_write(os.path.join(directory, f"{stem}.json"),
                  (json.dumps(sidecar, indent=1, sort_keys=True) + "\n").encode())


def scene_load(directory, stem):
    from .synth import Scene

    rgb, _ = pfm_read(os.path.join(directory, f"{stem}.rgb.pfm"))
    depth, valid = depth_read(os.path.join(directory, f"{stem}.depth.pfm"))
    with open(os.path.join(directory, f"{stem}.json")) as f:
        sidecar = json.load(f)
    return Scene(rgb=rgb, depth=depth, valid=valid, descriptor=sidecar["descriptor"])
