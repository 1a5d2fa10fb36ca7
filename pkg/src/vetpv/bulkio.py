"""Bulk-load text emission for the four report tables.

The format matches PostgreSQL's COPY text protocol: tab-delimited fields,
newline-delimited rows, absent values as \\N, and literal backslash / tab /
newline / carriage-return escaped. Rows are staged in an in-memory buffer and
flushed to the sink in large blocks. import_bulk reverses the encoding so the
round trip is exact.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
from pathlib import Path

from .ingest import (
    AERow,
    AgeUnit,
    DrugRow,
    MainRow,
    Outcome,
    OutcomeRow,
    RawTables,
    VeddraLevel,
    WeightUnit,
)

NULL = "\\N"
FLUSH_BLOCK_BYTES = 1 << 20

TABLE_NAMES = ("main", "events", "outcomes", "drugs")

_COLUMNS = {
    "main": (
        ("key", str),
        ("species", str),
        ("breed", str),
        ("gender", str),
        ("age_value", float),
        ("age_unit", AgeUnit),
        ("weight_value", float),
        ("weight_unit", WeightUnit),
        ("received_date", dt.date),
    ),
    "events": (
        ("key", str),
        ("term_code", str),
        ("term_name", str),
        ("veddra_level", VeddraLevel),
    ),
    "outcomes": (
        ("key", str),
        ("medical_status", Outcome),
        ("animals_affected", int),
    ),
    "drugs": (
        ("key", str),
        ("ingredient_name", str),
        ("brand_name", str),
        ("dosage_form", str),
        ("route", str),
        ("atcvet_code", str),
    ),
}

_ROW_TYPES = {"main": MainRow, "events": AERow, "outcomes": OutcomeRow, "drugs": DrugRow}


class BulkWriteError(OSError):
    def __init__(self, message: str, bytes_written: int):
        super().__init__(f"{message} (after {bytes_written} bytes)")
        self.bytes_written = bytes_written


def escape_field(text: str) -> str:
    return (
        text.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def unescape_field(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _encode_value(value, kind) -> str:
    if value is None:
        return NULL
    if kind is float:
        return escape_field(repr(float(value)))
    if kind is int:
        return str(int(value))
    if kind is dt.date:
        return value.isoformat()
    if isinstance(value, (AgeUnit, WeightUnit, VeddraLevel, Outcome)):
        return value.value
    return escape_field(value)


def _decode_value(text: str, kind):
    if text == NULL:
        return None
    if kind is float:
        return float(unescape_field(text))
    if kind is int:
        return int(text)
    if kind is dt.date:
        return dt.date.fromisoformat(text)
    if kind in (AgeUnit, WeightUnit, VeddraLevel, Outcome):
        return kind(text)
    return unescape_field(text)


class _BufferedSink:
    """Accumulates encoded rows and flushes to the byte sink in large blocks."""

    def __init__(self, sink):
        self._sink = sink
        self._buffer = bytearray()
        self.bytes_written = 0

    def write_line(self, line: str):
        self._buffer += line.encode("utf-8")
        self._buffer += b"\n"
        if len(self._buffer) >= FLUSH_BLOCK_BYTES:
            self.flush()

    def flush(self):
        if not self._buffer:
            return
        try:
            self._sink.write(bytes(self._buffer))
        except OSError as exc:
            raise BulkWriteError(str(exc), self.bytes_written) from exc
        self.bytes_written += len(self._buffer)
        self._buffer.clear()


def write_table(rows, table_name: str, sink) -> int:
    columns = _COLUMNS[table_name]
    buffered = _BufferedSink(sink)
    for row in rows:
        fields = [_encode_value(getattr(row, name), kind) for name, kind in columns]
        buffered.write_line("\t".join(fields))
    buffered.flush()
    return len(rows)


def read_table(table_name: str, stream) -> list:
    columns = _COLUMNS[table_name]
    row_type = _ROW_TYPES[table_name]
    text = stream.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    rows = []
    for line in text.split("\n"):
        if line == "":
            continue
        cells = line.split("\t")
        if len(cells) != len(columns):
            raise ValueError(
                f"{table_name}: expected {len(columns)} fields, got {len(cells)}"
            )
        kwargs = {name: _decode_value(cell, kind) for (name, kind), cell in zip(columns, cells)}
        rows.append(row_type(**kwargs))
    return rows


def export_bulk(tables: RawTables, destination) -> dict[str, int]:
    """Write the four tables as bulk-load text; returns row counts per table.

    destination is either a directory path (files <table>.tsv are created) or
    a mapping of table name to an open binary sink.
    """
    counts = {}
    if isinstance(destination, (str, Path)):
        directory = Path(destination)
        directory.mkdir(parents=True, exist_ok=True)
        for name in TABLE_NAMES:
            with open(directory / f"{name}.tsv", "wb") as sink:
                counts[name] = write_table(getattr(tables, name), name, sink)
    else:
        for name in TABLE_NAMES:
            counts[name] = write_table(getattr(tables, name), name, destination[name])
    return counts


def import_bulk(source) -> RawTables:
    """Inverse of export_bulk; source is a directory or mapping of streams."""
    loaded = {}
    if isinstance(source, (str, Path)):
        directory = Path(source)
        for name in TABLE_NAMES:
            with open(directory / f"{name}.tsv", "rb") as stream:
                loaded[name] = read_table(name, stream)
    else:
        for name in TABLE_NAMES:
            loaded[name] = read_table(name, source[name])
    return RawTables(
        main=loaded["main"],
        events=loaded["events"],
        outcomes=loaded["outcomes"],
        drugs=loaded["drugs"],
    )


def export_csv(tables: RawTables, directory) -> dict[str, int]:
    """RFC-4180 CSV export of the same four tables."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name in TABLE_NAMES:
        columns = _COLUMNS[name]
        with open(directory / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([cname for cname, _ in columns])
            for row in getattr(tables, name):
                cells = []
                for cname, kind in columns:
                    value = getattr(row, cname)
                    if value is None:
                        cells.append("")
                    elif kind is float:
                        cells.append(repr(float(value)))
                    elif isinstance(value, (AgeUnit, WeightUnit, VeddraLevel, Outcome)):
                        cells.append(value.value)
                    elif kind is dt.date:
                        cells.append(value.isoformat())
                    else:
                        cells.append(str(value))
                writer.writerow(cells)
        counts[name] = len(getattr(tables, name))
    return counts


def export_bulk_string(tables: RawTables) -> dict[str, str]:
    """In-memory export, mainly for tests and small fixtures."""
    sinks = {name: io.BytesIO() for name in TABLE_NAMES}
    export_bulk(tables, sinks)
    return {name: sink.getvalue().decode("utf-8") for name, sink in sinks.items()}


def import_bulk_string(texts: dict[str, str]) -> RawTables:
    streams = {name: io.StringIO(text) for name, text in texts.items()}
    return import_bulk(streams)
