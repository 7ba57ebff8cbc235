"""File codecs (.flo, binary netpbm), the pair-directory layout, and run config files."""

import dataclasses
import logging
import struct
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25


class FormatError(ValueError):
    pass


# .flo -------------------------------------------------------------------------

def flo_write(flow, path):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be H x W x 2, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(flow.astype("<f4").tobytes())


def flo_read(path):
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12:
            raise FormatError(f"{path}: not a flow file (header too short)")
        (magic,) = struct.unpack("<f", head[:4])
        if magic != np.float32(FLO_MAGIC):
            raise FormatError(f"{path}: not a flow file (magic {magic})")
        w, h = struct.unpack("<ii", head[4:])
        if w <= 0 or h <= 0:
            raise FormatError(f"{path}: bad extents {w}x{h}")
        payload = f.read()
    n = w * h * 2
    got = len(payload) // 4
    if got < n:
        i, j = divmod(got // 2, w)
        raise FormatError(f"{path}: short read at pair ({i},{j})")
    data = np.frombuffer(payload[:4 * n], dtype="<f4").reshape(h, w, 2)
    return data.astype(np.float64)


# netpbm ---------------------------------------------------------------------------

def _tokens(blob):
    """Header tokens of a binary netpbm file and the payload offset."""
    toks, pos = [], 0
    while len(toks) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        toks.append(blob[start:pos])
    return toks, pos + 1


def _read_netpbm(path, expect):
    blob = Path(path).read_bytes()
    if blob[:2] in (b"P2", b"P3"):
        raise FormatError(f"{path}: ASCII netpbm ({blob[:2].decode()}) not supported, use P5/P6")
    if blob[:2] != expect:
        raise FormatError(f"{path}: expected {expect.decode()} netpbm, got {blob[:2]!r}")
    toks, pos = _tokens(blob)
    w, h, maxval = (int(t) for t in toks[1:])
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    ch = 3 if expect == b"P6" else 1
    data = np.frombuffer(blob[pos:pos + w * h * ch], dtype=np.uint8)
    if data.size != w * h * ch:
        raise FormatError(f"{path}: truncated pixel data")
    return data.reshape((h, w, ch) if ch == 3 else (h, w))


def to_bytes(image):
    """[0, 1] reals to uint8, rounding half up."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def pgm_read(path):
    return _read_netpbm(path, b"P5").astype(np.float64) / 255.0


def pgm_write(image, path):
    """Write a [0, 1] grayscale image (or uint8 array) as binary P5."""
    image = np.asarray(image)
    data = image if image.dtype == np.uint8 else to_bytes(image)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def ppm_write(image, path):
    """Write an H x W x 3 uint8 (or [0, 1] real) image as binary P6."""
    image = np.asarray(image)
    data = image if image.dtype == np.uint8 else to_bytes(image)
    h, w, _ = data.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def ppm_read(path):
    return _read_netpbm(path, b"P6")


# dataset layout ---------------------------------------------------------------------

@dataclasses.dataclass
class FramePair:
    frame1: np.ndarray
    frame2: np.ndarray = None
    forward_flow: np.ndarray = None
    backward_flow: np.ndarray = None
    mask: np.ndarray = None
    occlusion: np.ndarray = None
    pair_id: str = ""


def write_dataset(root, pairs):
    """One subdirectory per pair plus ``manifest.txt`` (pair id, seed)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["# pair_id seed"]
    for i, p in enumerate(pairs):
        pid = f"pair_{i:05d}"
        d = root / pid
        d.mkdir(exist_ok=True)
        pgm_write(p.frame1, d / "frame1.pgm")
        pgm_write(p.frame2, d / "frame2.pgm")
        flo_write(p.forward_flow, d / "flow_fwd.flo")
        if p.backward_flow is not None:
            flo_write(p.backward_flow, d / "flow_bwd.flo")
        if getattr(p, "fg_mask_frame1", None) is not None:
            pgm_write(p.fg_mask_frame1.astype(np.float64), d / "mask.pgm")
        if getattr(p, "occlusion_mask", None) is not None:
            pgm_write(p.occlusion_mask.astype(np.float64), d / "occlusion.pgm")
        lines.append(f"{pid} {'' if p.seed is None else p.seed}".rstrip())
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(root):
    root = Path(root)
    path = root / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing")
    ids = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            ids.append(line.split()[0])
    return ids


def read_pair(pair_dir):
    d = Path(pair_dir)
    if not (d / "frame1.pgm").exists():
        raise FileNotFoundError(f"{d}: missing frame1.pgm")

    def opt(name, reader):
        return reader(d / name) if (d / name).exists() else None

    mask = opt("mask.pgm", pgm_read)
    occ = opt("occlusion.pgm", pgm_read)
    return FramePair(
        frame1=pgm_read(d / "frame1.pgm"),
        frame2=opt("frame2.pgm", pgm_read),
        forward_flow=opt("flow_fwd.flo", flo_read),
        backward_flow=opt("flow_bwd.flo", flo_read),
        mask=None if mask is None else mask > 0.5,
        occlusion=None if occ is None else occ > 0.5,
        pair_id=d.name,
    )


def read_dataset(root):
    root = Path(root)
    return [read_pair(root / pid) for pid in read_manifest(root)]


# run configuration ------------------------------------------------------------------

def _coerce(text, default):
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(t) for t in text.replace(",", " ").split())
    return text


def parse_config(text, sections):
    """Parse ``key = value`` lines into the given dataclass defaults.

    ``sections`` maps a prefix (``kernel``, ``net``, ...) to a dataclass
    instance holding defaults; keys are ``prefix.field``.  Unknown keys are
    rejected.  Returns a dict of prefix -> resolved dataclass.
    """
    values = {k: {} for k in sections}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        prefix, _, name = key.partition(".")
        if prefix not in sections or name not in {f.name for f in dataclasses.fields(sections[prefix])}:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        default = getattr(sections[prefix], name)
        try:
            values[prefix][name] = _coerce(val, default)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key}: {exc}") from None
    out = {}
    for prefix, base in sections.items():
        resolved = dataclasses.replace(base, **values[prefix])
        for f in dataclasses.fields(resolved):
            src = "file" if f.name in values[prefix] else "default"
            log.info("config %s.%s = %r (%s)", prefix, f.name, getattr(resolved, f.name), src)
        out[prefix] = resolved
    return out
