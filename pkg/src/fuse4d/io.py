"""On-disk formats: 16-bit PGM intensity, PFM depth, a text manifest and CSV reports.

A sequence directory holds ``manifest.txt`` plus one PGM and one PFM per
frame. Depth is stored as 32-bit float millimetres with 0.0 for masked
pixels; intensity is scaled to 0..65535.
"""

from __future__ import annotations

import csv
import io as _io
import math
import os
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from fuse4d.core import (
    CameraIntrinsics,
    DepthFrame,
    GroundTruth,
    InvalidInputError,
    Sequence,
    SequenceFrame,
)
from fuse4d.metrics import REPORT_COLUMNS, MetricsReport, ReportRow

PathLike = Union[str, os.PathLike]
MANIFEST = "manifest.txt"
FORMAT_TAG = "fuse4d-sequence"
FORMAT_VERSION = "1"


class LoadError(Exception):
    """Unreadable or inconsistent file; carries the path and byte offset."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{self.path} at byte {self.offset}: {message}")


# ---------------------------------------------------------------- headers

def _header_tokens(data: bytes, count: int, path) -> Tuple[List[bytes], int]:
    """Read ``count`` whitespace-separated tokens (skipping # comments).

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last one.
    """
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(path, pos, "unexpected end of header")
        tokens.append(data[start:pos])
    if pos >= len(data):
        raise LoadError(path, pos, "header not terminated")
    return tokens, pos + 1


def _positive_int(tok: bytes, path, offset) -> int:
    try:
        v = int(tok)
    except ValueError:
        raise LoadError(path, offset, f"expected integer, got {tok!r}") from None
    if v <= 0:
        raise LoadError(path, offset, f"expected positive integer, got {v}")
    return v


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise LoadError(path, 0, f"cannot read file ({e.strerror})") from None


# ---------------------------------------------------------------- PGM

def write_pgm16(path: PathLike, values: np.ndarray) -> None:
    """Binary 16-bit PGM of values in [0, 1], scaled by 65535 and rounded."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise InvalidInputError("PGM needs a 2D array")
    if not np.all(np.isfinite(v)) or v.min(initial=0) < 0 or v.max(initial=0) > 1:
        raise InvalidInputError("PGM intensities must lie in [0, 1]")
    h, w = v.shape
    payload = np.rint(v * 65535.0).astype(">u2").tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n65535\n" % (w, h) + payload)


def read_pgm(path: PathLike) -> np.ndarray:
    """Binary PGM (8 or 16 bit) as float64 in [0, 1]."""
    data = _read_bytes(path)
    if data[:2] != b"P5":
        raise LoadError(path, 0, f"bad magic {data[:2]!r}, expected b'P5'")
    toks, off = _header_tokens(data[2:], 3, path)
    off += 2
    w = _positive_int(toks[0], path, 2)
    h = _positive_int(toks[1], path, 2)
    maxval = _positive_int(toks[2], path, 2)
    if maxval > 65535:
        raise LoadError(path, 2, f"maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    have = len(data) - off
    if have < need:
        raise LoadError(path, len(data), f"truncated payload: {have} of {need} bytes")
    if have > need:
        raise LoadError(path, off + need, f"{have - need} trailing bytes after payload")
    raw = np.frombuffer(data, dtype, count=w * h, offset=off).reshape(h, w)
    if raw.max(initial=0) > maxval:
        raise LoadError(path, off, "sample exceeds maxval")
    return raw.astype(np.float64) / maxval


# ---------------------------------------------------------------- PFM

def write_pfm(path: PathLike, values: np.ndarray) -> None:
    """Greyscale PFM, little-endian (scale -1.0), rows stored bottom to top."""
    v = np.asarray(values)
    if v.ndim != 2:
        raise InvalidInputError("PFM needs a 2D array")
    h, w = v.shape
    payload = np.ascontiguousarray(v[::-1].astype("<f4")).tobytes()
    Path(path).write_bytes(b"Pf\n%d %d\n-1.0\n" % (w, h) + payload)


def read_pfm(path: PathLike) -> np.ndarray:
    """Greyscale PFM as float32 in top-to-bottom row order.

    Negative scale means little-endian, positive big-endian; the magnitude
    is ignored (depth is stored in absolute millimetres).
    """
    data = _read_bytes(path)
    if data[:2] != b"Pf":
        raise LoadError(path, 0, f"bad magic {data[:2]!r}, expected b'Pf'")
    toks, off = _header_tokens(data[2:], 3, path)
    off += 2
    w = _positive_int(toks[0], path, 2)
    h = _positive_int(toks[1], path, 2)
    try:
        scale = float(toks[2])
    except ValueError:
        raise LoadError(path, 2, f"bad scale {toks[2]!r}") from None
    if scale == 0 or not math.isfinite(scale):
        raise LoadError(path, 2, f"bad scale {scale}")
    dtype = np.dtype("<f4" if scale < 0 else ">f4")
    need = w * h * 4
    have = len(data) - off
    if have < need:
        raise LoadError(path, len(data), f"truncated payload: {have} of {need} bytes")
    if have > need:
        raise LoadError(path, off + need, f"{have - need} trailing bytes after payload")
    raw = np.frombuffer(data, dtype, count=w * h, offset=off).reshape(h, w)
    return raw[::-1].astype(np.float32)


# ---------------------------------------------------------------- sequences

def _fmt(v: float) -> str:
    return repr(float(v))


def _frame_names(i: int) -> Tuple[str, str]:
    return f"intensity_{i:05d}.pgm", f"depth_{i:05d}.pfm"


def write_sequence(seq: Sequence, directory: PathLike) -> Path:
    """Write manifest, intensity PGMs and depth PFMs into ``directory``.

    Depth is stored as float32; a sequence read back from disk re-serializes
    bit-identically.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    k = seq.intrinsics
    lines = [
        f"format = {FORMAT_TAG}",
        f"version = {FORMAT_VERSION}",
        f"name = {seq.name}",
        f"frames = {len(seq)}",
        f"width = {seq.width}",
        f"height = {seq.height}",
        f"fx = {_fmt(k.fx)}",
        f"fy = {_fmt(k.fy)}",
        f"u0 = {_fmt(k.u0)}",
        f"v0 = {_fmt(k.v0)}",
    ]
    for pos, f in enumerate(seq):
        iname, dname = _frame_names(pos)
        write_pgm16(d / iname, f.intensity.values)
        write_pfm(d / dname, np.where(f.depth.valid, f.depth.values, 0.0))
        lines.append(f"frame = {f.index} {iname} {dname}")
    gt = seq.ground_truth
    if gt is not None:
        lines.append(f"gt.shape = {gt.shape}")
        lines.append(f"gt.radius_mm = {_fmt(gt.radius_mm)}")
        lines.append(f"gt.plane_depth_mm = {_fmt(gt.plane_depth)}")
        lines.append(f"gt.fall_px = {_fmt(gt.fall_px)}")
        if gt.centers is not None:
            for pos, c in enumerate(gt.centers):
                lines.append(f"gt.center = {pos} " + " ".join(_fmt(x) for x in c))
    (d / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return d


def _parse_manifest(path: Path):
    data = _read_bytes(path)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise LoadError(path, e.start, "manifest is not UTF-8") from None
    keys, frames, centers = {}, [], []
    offset = 0
    for line in text.splitlines(keepends=True):
        here = offset
        offset += len(line.encode("utf-8"))
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        if "=" not in body:
            raise LoadError(path, here, f"expected 'key = value', got {body!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key == "frame":
            parts = value.split()
            if len(parts) != 3:
                raise LoadError(path, here, "frame line needs: index intensity depth")
            frames.append((here, parts))
        elif key == "gt.center":
            parts = value.split()
            if len(parts) != 4:
                raise LoadError(path, here, "gt.center line needs: position x y z")
            centers.append((here, parts))
        elif key in keys:
            raise LoadError(path, here, f"duplicate key {key!r}")
        else:
            keys[key] = (here, value)
    return keys, frames, centers


def read_sequence(directory: PathLike) -> Sequence:
    """Load a sequence written by :func:`write_sequence`; inconsistencies raise LoadError."""
    d = Path(directory)
    mpath = d / MANIFEST
    keys, frames, centers = _parse_manifest(mpath)

    def get(key, conv=str):
        if key not in keys:
            raise LoadError(mpath, 0, f"missing key {key!r}")
        off, raw = keys[key]
        try:
            return conv(raw)
        except (ValueError, InvalidInputError) as e:
            raise LoadError(mpath, off, f"bad value for {key!r}: {e}") from None

    if get("format") != FORMAT_TAG:
        raise LoadError(mpath, keys["format"][0], f"unknown format {get('format')!r}")
    if get("version") != FORMAT_VERSION:
        raise LoadError(mpath, keys["version"][0], f"unsupported version {get('version')!r}")
    n, w, h = get("frames", int), get("width", int), get("height", int)
    if len(frames) != n:
        raise LoadError(mpath, 0, f"manifest declares {n} frames but lists {len(frames)}")
    try:
        k = CameraIntrinsics(get("fx", float), get("fy", float), get("u0", float), get("v0", float))
        k.check_frame(w, h)
    except InvalidInputError as e:
        raise LoadError(mpath, keys["fx"][0], str(e)) from None
    out = []
    for off, (idx, iname, dname) in frames:
        ipath, dpath = d / iname, d / dname
        inten = read_pgm(ipath)
        depth = read_pfm(dpath)
        for p, a in ((ipath, inten), (dpath, depth)):
            if a.shape != (h, w):
                raise LoadError(p, 0, f"size {a.shape[1]}x{a.shape[0]} does not match manifest {w}x{h}")
        valid = depth > 0
        if not np.all(np.isfinite(depth[valid])):
            raise LoadError(dpath, 0, "non-finite depth sample")
        if np.any(depth < 0):
            raise LoadError(dpath, 0, "negative depth sample")
        try:
            index = int(idx)
        except ValueError:
            raise LoadError(mpath, off, f"bad frame index {idx!r}") from None
        out.append(SequenceFrame.from_arrays(index, inten, DepthFrame(depth.astype(np.float64), valid), k))
    gt = None
    if "gt.shape" in keys:
        cen = None
        if centers:
            cen = np.zeros((n, 3))
            seen = set()
            for off, parts in centers:
                try:
                    pos = int(parts[0])
                    cen[pos] = [float(x) for x in parts[1:]]
                except (ValueError, IndexError):
                    raise LoadError(mpath, off, "bad gt.center line") from None
                seen.add(pos)
            if seen != set(range(n)):
                raise LoadError(mpath, centers[0][0], "gt.center lines must cover every frame once")
        gt = GroundTruth(get("gt.shape"), radius_mm=get("gt.radius_mm", float), centers=cen,
                         plane_depth=get("gt.plane_depth_mm", float), fall_px=get("gt.fall_px", float))
    return Sequence(tuple(out), k, gt, name=get("name"))


# ---------------------------------------------------------------- reports

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f"{f:.9g}"
    return str(v)


def _nan_columns(row: ReportRow) -> List[str]:
    out = []
    for col in REPORT_COLUMNS:
        v = getattr(row, col)
        if isinstance(v, float) and math.isnan(v):
            out.append(col)
    return out


def report_text(report: MetricsReport) -> str:
    buf = _io.StringIO()
    wr = csv.writer(buf, lineterminator="\r\n")
    wr.writerow(REPORT_COLUMNS)
    for row in report.rows:
        cells = [_cell(getattr(row, c)) for c in REPORT_COLUMNS]
        nans = _nan_columns(row)
        status = row.status or "ok"
        if nans and "nan:" not in status:
            flag = "nan:" + "+".join(nans)
            status = flag if status == "ok" else f"{status}|{flag}"
        cells[REPORT_COLUMNS.index("status")] = status
        wr.writerow(cells)
    return buf.getvalue()


def write_report(report: MetricsReport, path: PathLike) -> Path:
    """CSV with a header row and one line per report row; floats at 9 significant digits."""
    p = Path(path)
    text = report_text(report)
    try:
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise OSError(f"cannot write report {p}: {e.strerror}") from None
    return p


def write_reports(reports: List[MetricsReport], path: PathLike) -> Path:
    """Several reports concatenated under one header."""
    merged = MetricsReport("merged", rows=[r for rep in reports for r in rep.rows])
    return write_report(merged, path)


_INT_COLS = {"frame"}
_STR_COLS = {"kind", "label", "sweep", "status", "params"}


def _parse_cell(col: str, raw: str):
    if col in _STR_COLS:
        return raw
    if raw == "":
        return None
    if col in _INT_COLS:
        return int(raw)
    return float(raw)


def read_report(path: PathLike) -> MetricsReport:
    p = Path(path)
    data = _read_bytes(p)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise LoadError(p, e.start, "report is not UTF-8") from None
    lines = text.splitlines(keepends=True)
    starts = np.concatenate([[0], np.cumsum([len(x.encode("utf-8")) for x in lines])])
    consumed = [0]

    def feed():
        for ln in lines:
            consumed[0] += 1
            yield ln

    reader = csv.reader(feed())
    header = next(reader, None)
    if header is None or tuple(header) != REPORT_COLUMNS:
        raise LoadError(p, 0, "missing or unexpected header row")
    report = MetricsReport(label=p.stem)
    while True:
        offset = int(starts[consumed[0]])
        try:
            cells = next(reader)
        except StopIteration:
            break
        except csv.Error as e:
            raise LoadError(p, offset, str(e)) from None
        if len(cells) != len(REPORT_COLUMNS):
            raise LoadError(p, offset, f"expected {len(REPORT_COLUMNS)} fields, got {len(cells)}")
        try:
            kw = {c: _parse_cell(c, v) for c, v in zip(REPORT_COLUMNS, cells)}
        except ValueError as e:
            raise LoadError(p, offset, str(e)) from None
        report.rows.append(ReportRow(**kw))
    return report
