"""Text container for matrices: CSV blocks under a key/value manifest header.

One format serves plant files, Gramian caches, grid-ROM files, and projector
exports. Floats are written with ``%.17g`` so every value round-trips
bit-exactly, which is what makes whole-pipeline outputs byte-reproducible.

Layout::

    # lpvrom-blocks v1
    # key: value              (manifest, sorted by key)
    [name rows cols]          (2-D block)   or   [name size] (1-D block)
    comma-separated rows
"""

import io

import numpy as np

from .errors import ToolkitError

MAGIC = "# lpvrom-blocks v1"


def fmt(x):
    """Round-trip decimal rendering of one float."""
    return "%.17g" % float(x)


def format_matrix_csv(M):
    """CSV body (no header) of a 2-D array with round-trip floats."""
    M = np.atleast_2d(M)
    return "\n".join(",".join(fmt(v) for v in row) for row in M)


def dump_blocks(manifest, blocks):
    """Serialize to a string. Manifest values are stringified; keys sorted."""
    out = io.StringIO()
    out.write(MAGIC + "\n")
    for key in sorted(manifest):
        out.write(f"# {key}: {manifest[key]}\n")
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1:
            out.write(f"[{name} {arr.size}]\n")
            out.write(",".join(fmt(v) for v in arr) + "\n")
        elif arr.ndim == 2:
            out.write(f"[{name} {arr.shape[0]} {arr.shape[1]}]\n")
            for row in arr:
                out.write(",".join(fmt(v) for v in row) + "\n")
        else:
            raise ToolkitError(f"block {name!r}: only 1-D/2-D arrays supported")
    return out.getvalue()


def save_blocks(path, manifest, blocks):
    text = dump_blocks(manifest, blocks)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def parse_blocks(text):
    """Inverse of :func:`dump_blocks`. Returns ``(manifest, blocks)``."""
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise ToolkitError("not an lpvrom block file (bad magic line)")
    manifest = {}
    blocks = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        key, _, value = body.partition(":")
        manifest[key.strip()] = value.strip()
        i += 1
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        if not (line.startswith("[") and line.endswith("]")):
            raise ToolkitError(f"expected a block header, got {line!r}")
        parts = line[1:-1].split()
        name = parts[0]
        if len(parts) == 2:
            n = int(parts[1])
            arr = np.array([float(v) for v in lines[i + 1].split(",")]) if n else np.zeros(0)
            if arr.size != n:
                raise ToolkitError(f"block {name!r}: expected {n} values, got {arr.size}")
            blocks[name] = arr
            i += 2
        elif len(parts) == 3:
            rows, cols = int(parts[1]), int(parts[2])
            data = np.zeros((rows, cols))
            for r in range(rows):
                vals = lines[i + 1 + r].split(",")
                if len(vals) != cols:
                    raise ToolkitError(f"block {name!r}: row {r} has {len(vals)} values, expected {cols}")
                data[r] = [float(v) for v in vals]
            blocks[name] = data
            i += 1 + rows
        else:
            raise ToolkitError(f"malformed block header {line!r}")
    return manifest, blocks


def load_blocks(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_blocks(fh.read())
