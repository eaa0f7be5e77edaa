"""
File Formats
Binary PGM label maps, CTXF feature containers, JSON reports and checkpoints
"""
import json
import logging
import math
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .feature_store import FeatureGrid, LabelMap
from .serializers import CheckpointManifest, validate_document

logger = logging.getLogger(__name__)

CTXF_MAGIC = b'CTXF'
CTXF_VERSION = 1
CTXF_HEADER = struct.Struct('<4sIIIII')
ANCHOR_LAYER = 0xFFFF

# Largest payload accepted from a header, in elements
MAX_ELEMENTS = 1 << 28

CHECKPOINT_FILE = 'checkpoint.ctxf'
MANIFEST_FILE = 'manifest.json'


def _read_bytes(source):
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    return Path(source).read_bytes()


# PGM (P5, maxval 255)

def encode_pgm(label_map):
    header = f"P5\n{label_map.width} {label_map.height}\n255\n".encode('ascii')
    return header + label_map.values.tobytes(order='C')


def write_pgm(path, label_map):
    Path(path).write_bytes(encode_pgm(label_map))


def _pgm_tokens(data, count):
    """Read `count` whitespace-separated header integers after the magic"""
    pos = 2
    tokens = []
    while len(tokens) < count:
        if pos >= len(data):
            raise FormatError("Truncated PGM header", pos)
        ch = data[pos:pos + 1]
        if ch == b'#':
            end = data.find(b'\n', pos)
            if end < 0:
                raise FormatError("Unterminated PGM comment", pos)
            pos = end + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            tokens.append((int(data[start:pos]), start))
        else:
            raise FormatError(f"Unexpected byte {ch!r} in PGM header", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("PGM header must end with a single whitespace byte", pos)
    return tokens, pos + 1


def decode_pgm(data):
    if data[:2] != b'P5':
        raise FormatError("Bad PGM magic, expected P5", 0)
    tokens, payload_at = _pgm_tokens(data, 3)
    (width, w_off), (height, h_off), (maxval, m_off) = tokens
    if width == 0 or height == 0:
        raise FormatError("PGM dimensions must be positive", w_off if width == 0 else h_off)
    if width * height > MAX_ELEMENTS:
        raise FormatError(f"PGM dimensions {width}x{height} overflow", w_off)
    if maxval != 255:
        raise FormatError(f"PGM maxval must be 255, got {maxval}", m_off)
    end = payload_at + width * height
    if len(data) < end:
        raise FormatError(f"Truncated PGM payload, need {width * height} bytes", len(data))
    values = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=payload_at)
    return LabelMap(values.reshape(height, width))


def read_pgm(path):
    return decode_pgm(_read_bytes(path))


# CTXF

def encode_ctxf(layer, array):
    """One CTXF record; `array` is viewed as (h, w, d) float32 little-endian"""
    data = np.asarray(array, dtype='<f4')
    if data.ndim != 3:
        raise ValueError(f"CTXF payload must be (h, w, d), got {data.shape}")
    h, w, d = data.shape
    return CTXF_HEADER.pack(CTXF_MAGIC, CTXF_VERSION, layer, h, w, d) + data.tobytes(order='C')


def decode_ctxf_records(data, offset=0):
    """All records of a CTXF concatenation as (layer, (h, w, d) float32) pairs"""
    records = []
    while offset < len(data):
        if len(data) - offset < CTXF_HEADER.size:
            raise FormatError("Truncated CTXF header", len(data))
        magic, version, layer, h, w, d = CTXF_HEADER.unpack_from(data, offset)
        if magic != CTXF_MAGIC:
            raise FormatError(f"Bad CTXF magic {magic!r}", offset)
        if version != CTXF_VERSION:
            raise FormatError(f"Unsupported CTXF version {version}", offset + 4)
        count = h * w * d
        if count > MAX_ELEMENTS:
            raise FormatError(f"CTXF dimensions {h}x{w}x{d} overflow", offset + 12)
        start = offset + CTXF_HEADER.size
        end = start + 4 * count
        if len(data) < end:
            raise FormatError(f"Truncated CTXF payload, need {4 * count} bytes", len(data))
        values = np.frombuffer(data, dtype='<f4', count=count, offset=start).astype(np.float32)
        records.append((layer, values.reshape(h, w, d)))
        offset = end
    return records


def write_ctxf(path, grid):
    Path(path).write_bytes(encode_ctxf(grid.layer, grid.data))


def read_ctxf(path):
    """Single-record CTXF file as a FeatureGrid"""
    records = decode_ctxf_records(_read_bytes(path))
    if len(records) != 1:
        raise FormatError(f"Expected one CTXF record, found {len(records)}", 0)
    layer, values = records[0]
    return FeatureGrid(layer, values)


def write_anchor_set(path, anchor_set):
    """Anchors as a CTXF record: layer 0xFFFF, h = N, w = 1; invalid rows are zero"""
    rows = np.where(anchor_set.valid[:, None], anchor_set.anchors, 0.0)
    Path(path).write_bytes(encode_ctxf(ANCHOR_LAYER, rows[:, None, :]))


def read_anchor_set(path, layer=0):
    from .anchors import AnchorSet

    records = decode_ctxf_records(_read_bytes(path))
    if len(records) != 1 or records[0][0] != ANCHOR_LAYER:
        raise FormatError("Not an anchor-set CTXF file", 0)
    rows = records[0][1][:, 0, :].astype(np.float64)
    valid = np.any(rows != 0.0, axis=1)
    # counts are not persisted; a stored row counts as one observation
    return AnchorSet(
        layer=layer, anchors=rows, means=rows.copy(),
        norms=np.where(valid, np.linalg.norm(rows, axis=1), 0.0),
        counts=valid.astype(np.int64), degenerate=np.zeros(len(rows), dtype=bool))


# JSON

def _sanitize(value):
    if isinstance(value, dict):
        return {str(k): _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        return _sanitize(value.tolist())
    if isinstance(value, np.generic):
        return _sanitize(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def dumps_json(obj):
    return json.dumps(_sanitize(obj), indent=2, sort_keys=True) + '\n'


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj), encoding='utf-8')


def loads_json(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON: {e.msg}", e.pos) from e


def read_json(path):
    raw = _read_bytes(path)
    try:
        text = raw.decode('utf-8')
    except UnicodeDecodeError as e:
        raise FormatError("JSON report is not UTF-8", e.start) from e
    return loads_json(text)


# Checkpoints: concatenated CTXF records + manifest

def _as_record(array):
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 1:
        return array.reshape(1, 1, -1)
    if array.ndim == 2:
        return array.reshape(array.shape[0], 1, array.shape[1])
    return array.reshape(array.shape[0], -1, array.shape[-1])


def write_checkpoint(out_dir, params, config=None, extra=None):
    """Write parameters in insertion order; returns the manifest dict"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chunks = []
    tensors = []
    for index, (name, array) in enumerate(params.items()):
        chunks.append(encode_ctxf(index, _as_record(array)))
        tensors.append({'name': name, 'shape': list(np.shape(array)), 'record': index})
    (out_dir / CHECKPOINT_FILE).write_bytes(b''.join(chunks))
    manifest = {
        'format': 'ctxf-checkpoint',
        'version': CTXF_VERSION,
        'tensors': tensors,
        'config': config or {},
    }
    if extra:
        manifest.update(extra)
    write_json(out_dir / MANIFEST_FILE, manifest)
    logger.debug(f"Checkpoint with {len(tensors)} tensors written to {out_dir}")
    return manifest


def resolve_checkpoint_dir(path):
    path = Path(path)
    if path.is_dir():
        return path
    return path.parent


def read_checkpoint(path):
    """Returns (params dict, manifest dict); `path` is the run dir or a file inside it"""
    root = resolve_checkpoint_dir(path)
    if not (root / MANIFEST_FILE).exists() or not (root / CHECKPOINT_FILE).exists():
        raise FormatError(f"No checkpoint found under {root}", 0)
    manifest = read_json(root / MANIFEST_FILE)
    checked = validate_document(CheckpointManifest, manifest)
    if checked.version != CTXF_VERSION:
        raise FormatError(f"Unsupported checkpoint version {checked.version}", 0)
    records = decode_ctxf_records(_read_bytes(root / CHECKPOINT_FILE))
    params = {}
    try:
        for tensor in checked.tensors:
            layer, values = records[tensor.record]
            if layer != tensor.record:
                raise FormatError(f"Record {layer} out of order for {tensor.name}", 0)
            params[tensor.name] = values.reshape(tensor.shape)
    except (IndexError, ValueError) as e:
        raise FormatError(f"Checkpoint manifest does not match payload: {e}", 0) from e
    return params, manifest
