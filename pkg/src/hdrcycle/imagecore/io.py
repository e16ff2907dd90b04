"""Image file codecs: PNG/JPEG for LDR, Radiance RGBE (.hdr) and PFM for HDR."""
from __future__ import annotations

import re
from pathlib import Path

import cv2
import numpy as np

from ..errors import ImageFormatError
from .types import HdrImage, LdrImage

LDR_EXTENSIONS = (".png", ".jpg", ".jpeg")
HDR_EXTENSIONS = (".hdr", ".pfm")


def kind_for_path(path) -> str:
    ext = Path(path).suffix.lower()
    if ext in LDR_EXTENSIONS:
        return "ldr"
    if ext in HDR_EXTENSIONS:
        return "hdr"
    raise ImageFormatError(f"unsupported image extension {ext!r}")


def load_image(path, kind: str | None = None):
    path = Path(path)
    if kind is None:
        kind = kind_for_path(path)
    ext = path.suffix.lower()
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    if kind == "ldr":
        if ext not in LDR_EXTENSIONS:
            raise ImageFormatError(f"{ext!r} is not an LDR format")
        return _read_ldr(path)
    if kind == "hdr":
        if ext == ".pfm":
            return HdrImage(read_pfm(path))
        if ext == ".hdr":
            return HdrImage(read_rgbe(path))
        raise ImageFormatError(f"{ext!r} is not an HDR format")
    raise ValueError(f"kind must be 'ldr' or 'hdr', got {kind!r}")


def save_image(img, path, kind: str | None = None) -> None:
    path = Path(path)
    if kind is None:
        kind = kind_for_path(path)
    ext = path.suffix.lower()
    if kind == "ldr":
        if not isinstance(img, LdrImage):
            img = LdrImage(np.asarray(img))
        if ext not in LDR_EXTENSIONS:
            raise ImageFormatError(f"{ext!r} is not an LDR format")
        q = np.round(img.pixels * 255.0).astype(np.uint8)
        if not cv2.imwrite(str(path), cv2.cvtColor(q, cv2.COLOR_RGB2BGR)):
            raise OSError(f"could not write {path}")
    elif kind == "hdr":
        if not isinstance(img, HdrImage):
            img = HdrImage(np.asarray(img))
        if ext == ".pfm":
            write_pfm(path, img.pixels)
        elif ext == ".hdr":
            write_rgbe(path, img.pixels)
        else:
            raise ImageFormatError(f"{ext!r} is not an HDR format")
    else:
        raise ValueError(f"kind must be 'ldr' or 'hdr', got {kind!r}")


def _read_ldr(path: Path) -> LdrImage:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"could not decode {path}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        channels = 1 if raw.ndim == 2 else raw.shape[2]
        raise ImageFormatError(f"{path}: expected 3 channels, found {channels}")
    if raw.dtype == np.uint8:
        depth = 8
    elif raw.dtype == np.uint16:
        depth = 16
    else:
        raise ImageFormatError(f"{path}: unsupported sample type {raw.dtype}")
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / float(2**depth - 1)
    return LdrImage(rgb, source_bit_depth=depth)


# ---------------------------------------------------------------------------
# PFM

def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    # header: identifier, width, height, scale; whitespace separated
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(\S+)").match(data, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated PFM header")
        tokens.append(m.group(1))
        pos = m.end()
    pos += 1  # single whitespace byte ends the header
    ident, width, height, scale = tokens
    if ident == b"PF":
        channels = 3
    elif ident == b"Pf":
        raise ImageFormatError(f"{path}: greyscale PFM, expected 3 channels")
    else:
        raise ImageFormatError(f"{path}: not a PFM file")
    w, h, scale = int(width), int(height), float(scale)
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(data) - pos < count * 4:
        raise ImageFormatError(f"{path}: truncated PFM payload")
    px = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(h, w, channels)
    # rows are stored bottom to top
    return np.ascontiguousarray(px[::-1]).astype(np.float32)


def write_pfm(path, pixels: np.ndarray, byteorder: str = "little") -> None:
    px = np.asarray(pixels, dtype=np.float32)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ImageFormatError("PFM writer expects H x W x 3")
    h, w, _ = px.shape
    dtype = "<f4" if byteorder == "little" else ">f4"
    scale = -1.0 if byteorder == "little" else 1.0
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n{scale}\n".encode("ascii"))
        f.write(np.ascontiguousarray(px[::-1]).astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# Radiance RGBE

def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    """Decode N x 4 uint8 RGBE quadruples to N x 3 floats (no half-unit offset)."""
    rgbe = np.asarray(rgbe)
    e = rgbe[..., 3].astype(np.int32)
    f = np.where(e > 0, np.ldexp(1.0, e - (128 + 8)), 0.0)
    return (rgbe[..., :3].astype(np.float64) * f[..., None]).astype(np.float32)


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    v = rgb.max(axis=-1)
    mant, exp = np.frexp(v)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    ok = v > 1e-32
    scale = np.where(ok, mant * 256.0 / np.where(ok, v, 1.0), 0.0)
    out[..., :3] = np.where(ok[..., None], np.floor(rgb * scale[..., None]), 0).astype(np.uint8)
    out[..., 3] = np.where(ok, exp + 128, 0).astype(np.uint8)
    return out


def read_rgbe(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def line():
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise ImageFormatError(f"{path}: truncated Radiance header")
        out = data[pos:end]
        pos = end + 1
        return out.decode("latin-1").strip()

    first = line()
    if not first.startswith("#?"):
        raise ImageFormatError(f"{path}: missing Radiance signature")
    while True:
        ln = line()
        if ln == "":
            break
        if ln.startswith("FORMAT=") and ln != "FORMAT=32-bit_rle_rgbe":
            raise ImageFormatError(f"{path}: unsupported {ln}")
    res = line().split()
    if len(res) != 4 or res[2] != "+X" or res[0] not in ("-Y", "+Y"):
        raise ImageFormatError(f"{path}: unsupported resolution line {' '.join(res)!r}")
    h, w = int(res[1]), int(res[3])
    buf = np.frombuffer(data, dtype=np.uint8, offset=pos)
    rgbe = np.empty((h, w, 4), dtype=np.uint8)
    i = 0
    for y in range(h):
        i = _read_scanline(buf, i, w, rgbe[y], path)
    px = rgbe_to_float(rgbe)
    if res[0] == "+Y":
        px = px[::-1]
    return np.ascontiguousarray(px)


def _read_scanline(buf, i, w, row, path):
    rle = 8 <= w < 0x8000 and i + 4 <= len(buf) and buf[i] == 2 and buf[i + 1] == 2 and not (buf[i + 2] & 0x80)
    if not rle:
        n = w * 4
        if i + n > len(buf):
            raise ImageFormatError(f"{path}: truncated pixel data")
        row[:] = buf[i:i + n].reshape(w, 4)
        return i + n
    if (int(buf[i + 2]) << 8 | int(buf[i + 3])) != w:
        raise ImageFormatError(f"{path}: scanline width mismatch")
    i += 4
    for c in range(4):
        x = 0
        while x < w:
            if i >= len(buf):
                raise ImageFormatError(f"{path}: truncated RLE data")
            n = int(buf[i])
            i += 1
            if n > 128:
                n -= 128
                if x + n > w:
                    raise ImageFormatError(f"{path}: bad RLE run")
                row[x:x + n, c] = buf[i]
                i += 1
            else:
                if n == 0 or x + n > w or i + n > len(buf):
                    raise ImageFormatError(f"{path}: bad RLE literal")
                row[x:x + n, c] = buf[i:i + n]
                i += n
            x += n
    return i


def _encode_channel(values: np.ndarray) -> bytes:
    out = bytearray()
    w = len(values)
    x = 0
    while x < w:
        # find next run of >= 4 identical bytes
        run_start = x
        run_len = 0
        while run_start < w:
            run_len = 1
            while run_start + run_len < w and run_len < 127 and values[run_start + run_len] == values[run_start]:
                run_len += 1
            if run_len >= 4:
                break
            run_start += 1
        # literals before the run
        while x < run_start:
            n = min(128, run_start - x)
            out.append(n)
            out.extend(values[x:x + n].tobytes())
            x += n
        if run_start < w and run_len >= 4:
            out.append(128 + run_len)
            out.append(int(values[run_start]))
            x = run_start + run_len
    return bytes(out)


def write_rgbe(path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels, dtype=np.float32)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ImageFormatError("Radiance writer expects H x W x 3")
    h, w, _ = px.shape
    rgbe = float_to_rgbe(px)
    with open(path, "wb") as f:
        f.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
        f.write(f"-Y {h} +X {w}\n".encode("ascii"))
        for y in range(h):
            if 8 <= w < 0x8000:
                f.write(bytes([2, 2, w >> 8, w & 0xFF]))
                for c in range(4):
                    f.write(_encode_channel(rgbe[y, :, c]))
            else:
                f.write(rgbe[y].tobytes())
