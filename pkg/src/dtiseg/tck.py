"""TCK streamline file reader/writer (Float32LE subset).

Layout: ASCII header starting with "mrtrix tracks", key: value lines
including "datatype: Float32LE" and "file: . <offset>", terminated by a
line "END"; then float32 little-endian xyz triplets in mm, with an
all-NaN triplet between streamlines and an all-Inf triplet at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, UnsupportedError


@dataclass
class StreamlineSet:
    """Streamlines as (n_points, 3) float arrays of mm coordinates."""

    streamlines: list = field(default_factory=list)

    def __post_init__(self):
        cleaned = []
        for i, s in enumerate(self.streamlines):
            s = np.asarray(s, dtype=np.float32)
            if s.ndim != 2 or s.shape[1] != 3:
                raise DataError(f"streamline {i} is not an (n, 3) point list: shape {s.shape}")
            if s.shape[0] < 2:
                raise DataError(f"streamline {i} has {s.shape[0]} point(s); need >= 2")
            if not np.all(np.isfinite(s)):
                raise DataError(f"streamline {i} contains non-finite coordinates")
            cleaned.append(s)
        self.streamlines = cleaned

    def __len__(self) -> int:
        return len(self.streamlines)

    def __iter__(self):
        return iter(self.streamlines)

    def total_points(self) -> int:
        return sum(s.shape[0] for s in self.streamlines)


def read_tck(path) -> StreamlineSet:
    with open(path, "rb") as f:
        raw = f.read()
    head = raw[:4096].decode("ascii", errors="replace")
    if not head.startswith("mrtrix tracks"):
        raise FormatError(f"{path}: missing 'mrtrix tracks' signature")
    end = head.find("\nEND\n")
    if end < 0:
        raise FormatError(f"{path}: header END marker not found")
    fields = {}
    for line in head[:end].splitlines()[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            fields[k.strip()] = v.strip()
    dt = fields.get("datatype", "")
    if dt != "Float32LE":
        raise UnsupportedError(f"{path}: unsupported datatype {dt!r}, need Float32LE")
    file_field = fields.get("file", "")
    try:
        offset = int(file_field.split()[-1])
    except (IndexError, ValueError):
        raise FormatError(f"{path}: malformed file field {file_field!r}") from None
    triplets = np.frombuffer(raw[offset:], dtype="<f4")
    if triplets.size % 3 != 0:
        raise FormatError(f"{path}: payload is not a whole number of triplets")
    triplets = triplets.reshape(-1, 3)

    isnan = np.isnan(triplets)
    isinf = np.isinf(triplets)
    sep = isnan.all(axis=1)
    term = isinf.all(axis=1)
    term_idx = np.flatnonzero(term)
    if term_idx.size == 0:
        raise FormatError(f"{path}: missing Inf terminator triplet")
    n = int(term_idx[0])
    mixed = (isnan.any(axis=1) | isinf.any(axis=1)) & ~sep & ~term
    if mixed[:n].any():
        bad = int(np.flatnonzero(mixed[:n])[0])
        raise DataError(f"{path}: non-finite coordinate inside a streamline at row {bad}")

    streamlines = []
    start = 0
    for s in [*np.flatnonzero(sep[:n]).tolist(), n]:
        if s > start:
            streamlines.append(np.array(triplets[start:s], dtype=np.float32))
        start = s + 1
    return StreamlineSet(streamlines)


def write_tck(path, streamlines: StreamlineSet) -> None:
    body = []
    for i, s in enumerate(streamlines):
        if i:
            body.append(np.full((1, 3), np.nan, dtype="<f4"))
        body.append(np.asarray(s, dtype="<f4"))
    body.append(np.full((1, 3), np.inf, dtype="<f4"))
    payload = np.concatenate(body, axis=0).tobytes()

    def render(offset):
        return (f"mrtrix tracks\ndatatype: Float32LE\ncount: {len(streamlines)}\n"
                f"file: . {offset}\nEND\n").encode("ascii")

    header = render(0)
    # the offset appears inside the header, so iterate to a fixed point
    while len(render(len(header))) != len(header):
        header = render(len(header))
    header = render(len(header))
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
