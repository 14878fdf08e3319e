"""On-disk formats: raw IQ records, truth sidecars, the dataset table, fit reports."""
import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .fitting import COLUMNS, EXTRA_COLUMNS, SweepDataset
from .simulator import Record

MAGIC = b"ABSR"
VERSION = 1
# magic, version, reserved, f_s, count, T, flux, power, seed, reserved
HEADER = struct.Struct("<4sHHdQdddQQ")
assert HEADER.size == 64


class CorruptRecordError(IOError):
    """A record file could not be parsed; the message names the file."""


def write_record(path, record):
    path = Path(path)
    samples = np.ascontiguousarray(record.samples, dtype="<f4")
    header = HEADER.pack(MAGIC, VERSION, 0, float(record.sample_rate), samples.shape[0],
                         float(record.temperature), float(record.flux), float(record.power),
                         int(record.seed) & 0xFFFFFFFFFFFFFFFF, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(samples.tobytes())
    return path


def read_record(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise CorruptRecordError(f"{path}: cannot read record ({err.strerror})") from err
    if len(raw) < HEADER.size:
        raise CorruptRecordError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, _, f_s, count, temp, flux, power, seed, _ = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptRecordError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptRecordError(f"{path}: unsupported version {version}")
    expected = HEADER.size + 8 * count
    if len(raw) != expected:
        raise CorruptRecordError(f"{path}: expected {expected} bytes for {count} samples, "
                                 f"found {len(raw)}")
    if not f_s > 0:
        raise CorruptRecordError(f"{path}: non-positive sample rate")
    samples = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(count, 2)
    return Record(samples.astype(np.float64), f_s, temp, flux, power, seed)


# --------------------------------------------------------------------------
# JSON documents (truth sidecars, manifests, fit reports)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def dumps_json(obj):
    """Deterministic JSON: sorted keys, fixed indentation, non-finite floats as strings."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj), encoding="utf-8")
    return Path(path)


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def as_float(value):
    """Inverse of the non-finite encoding used by :func:`dumps_json`."""
    return float(value)


# --------------------------------------------------------------------------
# dataset table


def _fmt(v):
    return repr(float(v))


def write_dataset(path, dataset):
    """UTF-8 CSV with the fixed header, then power, segment and record columns."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS + EXTRA_COLUMNS)
        for i in range(len(dataset)):
            w.writerow([_fmt(getattr(dataset, c)[i]) for c in COLUMNS[:-1]]
                       + ["|".join(dataset.flags[i]), _fmt(dataset.power_dBm[i]),
                          int(dataset.segment[i]), dataset.record[i]])
    return path


def read_dataset(path):
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty dataset file (no header)")
    header = tuple(rows[0])
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
    idx = {c: header.index(c) for c in header}
    body = rows[1:]
    if not body:
        return SweepDataset.empty()

    def col(name, conv=float, default=None):
        if name not in idx:
            return None if default is None else [default] * len(body)
        return [conv(r[idx[name]]) for r in body]

    try:
        cols = {c: np.array(col(c)) for c in COLUMNS[:-1]}
        flags = [tuple(f for f in r[idx["flags"]].split("|") if f) for r in body]
        return SweepDataset(**cols, flags=flags,
                            power_dBm=np.array(col("power_dBm", float, "nan"), dtype=float),
                            segment=np.array(col("segment", int, 0), dtype=int),
                            record=col("record", str, ""))
    except (ValueError, IndexError) as err:
        raise ValueError(f"{path}: malformed row ({err})") from err


def write_table(path, header, rows):
    """Plain numeric CSV used for the plot-data tables."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return Path(path)


def read_table(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, [[_cell(v) for v in r] for r in body]


def _cell(text):
    try:
        return float(text)
    except ValueError:
        return text
