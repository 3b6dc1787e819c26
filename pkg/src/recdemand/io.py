"""On-disk formats: event logs, parameter checkpoints, embedding tables, CSV outputs.

Good ids on disk are 1-based with 0 standing for the outside option; in
memory goods are 0-based indices and the outside option is -1.  All text
files are UTF-8 with LF line endings.  Floats are written with Python's
shortest round-trip representation, so text round trips are lossless.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .exog import ExogenousEmbeddingTable, ExogenousWeights, ProjectionWeights
from .params import ArrayBundle, ModelParameters, SequenceWeights
from .recmodel import RecModel
from .types import InteractionLog, SlotLayout
from .utils import git_blob_hash

EVENTS_MAGIC = "#recdemand-events 1"
EVENTS_HEADER = "user\tday\tchoice\tpage"
CHECKPOINT_MAGIC = b"RECDEMAND-CKPT 1\n"
BUNDLE_TYPES = {cls.__name__: cls for cls in (ModelParameters, SequenceWeights, RecModel,
                                              ProjectionWeights, ExogenousWeights)}


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""


def to_good_id(index: int) -> int:
    return 0 if index < 0 else index + 1


def from_good_id(good_id: int) -> int:
    return -1 if good_id == 0 else good_id - 1


def fmt_float(x: float) -> str:
    return repr(float(x))


# -- events -------------------------------------------------------------------

def _page_text(row: np.ndarray, layout: SlotLayout) -> str:
    parts = []
    for r, (lo, hi) in enumerate(zip(layout.offsets[:-1], layout.offsets[1:])):
        ids = [str(g + 1) for g in row[lo:hi].tolist() if g >= 0]
        parts.append(f"{r}:{','.join(ids)}")
    return "|".join(parts)


def format_events(log: InteractionLog, arm: str | None = None) -> str:
    lines = [EVENTS_MAGIC,
             "#capacities " + ",".join(str(c) for c in log.layout.capacities),
             f"#n_goods {log.n_goods}"]
    if arm is not None:
        lines.append(f"#arm {arm}")
    for u in sorted(log.prior):
        lines.append(f"#prior {u} " + ",".join(str(g + 1) for g in log.prior[u]))
    lines.append(EVENTS_HEADER)
    for u, d, c, row in zip(log.users.tolist(), log.days.tolist(), log.choices.tolist(), log.pages):
        lines.append(f"{u}\t{d}\t{to_good_id(c)}\t{_page_text(row, log.layout)}")
    return "\n".join(lines) + "\n"


def write_events(path, log: InteractionLog, arm: str | None = None) -> None:
    _write_text(path, format_events(log, arm))


def _parse_ids(text: str, where: str) -> list[int]:
    if text == "":
        return []
    try:
        ids = [int(t) for t in text.split(",")]
    except ValueError:
        raise FormatError(f"{where}: bad good id list {text!r}") from None
    if any(i < 1 for i in ids):
        raise FormatError(f"{where}: good ids must be >= 1")
    return ids


def parse_events(text: str, source: str = "<events>") -> InteractionLog:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != EVENTS_MAGIC:
        raise FormatError(f"{source}:1: missing {EVENTS_MAGIC!r} header")
    capacities, n_goods, arm, prior = None, None, None, {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        where = f"{source}:{i + 1}"
        key, _, value = lines[i][1:].partition(" ")
        try:
            if key == "capacities":
                capacities = tuple(int(c) for c in value.split(","))
            elif key == "n_goods":
                n_goods = int(value)
            elif key == "arm":
                arm = value
            elif key == "prior":
                u, _, ids = value.partition(" ")
                prior[int(u)] = tuple(g - 1 for g in _parse_ids(ids, where))
            else:
                raise FormatError(f"{where}: unknown metadata key {key!r}")
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{where}: bad metadata line {lines[i]!r}") from None
        i += 1
    if capacities is None or n_goods is None:
        raise FormatError(f"{source}: metadata must give capacities and n_goods")
    layout = SlotLayout(capacities)
    if i >= len(lines) or lines[i] != EVENTS_HEADER:
        raise FormatError(f"{source}:{i + 1}: expected column header {EVENTS_HEADER!r}")
    rows = lines[i + 1:]
    n = len(rows)
    users = np.empty(n, np.int64)
    days = np.empty(n, np.int64)
    choices = np.empty(n, np.int64)
    pages = np.full((n, layout.total), -1, np.int64)
    for k, line in enumerate(rows):
        where = f"{source}:{i + 2 + k}"
        fields = line.split("\t")
        if len(fields) != 4:
            raise FormatError(f"{where}: expected 4 tab-separated fields, got {len(fields)}")
        try:
            users[k], days[k], choice = int(fields[0]), int(fields[1]), int(fields[2])
        except ValueError:
            raise FormatError(f"{where}: user, day and choice must be integers") from None
        if days[k] < 0 or users[k] < 0:
            raise FormatError(f"{where}: user and day must be non-negative")
        if not 0 <= choice <= n_goods:
            raise FormatError(f"{where}: choice id {choice} outside 0..{n_goods}")
        choices[k] = from_good_id(choice)
        slots = fields[3].split("|")
        if len(slots) != layout.n_slots:
            raise FormatError(f"{where}: expected {layout.n_slots} slots, got {len(slots)}")
        seen = set()
        for r, slot in enumerate(slots):
            tag, sep, ids = slot.partition(":")
            if not sep or tag != str(r):
                raise FormatError(f"{where}: slot {r} must be written as '{r}:ids'")
            ids = _parse_ids(ids, where)
            if len(ids) > layout.capacities[r]:
                raise FormatError(f"{where}: slot {r} exceeds capacity {layout.capacities[r]}")
            if any(g > n_goods for g in ids) or seen.intersection(ids) or len(set(ids)) < len(ids):
                raise FormatError(f"{where}: page goods must be distinct ids in 1..{n_goods}")
            seen.update(ids)
            lo = layout.offsets[r]
            pages[k, lo:lo + len(ids)] = [g - 1 for g in ids]
    order = np.lexsort((days, users))
    same = (np.diff(users[order]) == 0) & (np.diff(days[order]) == 0)
    if same.any():
        raise FormatError(f"{source}: duplicate (user, day) events")
    arms = {int(u): arm for u in np.unique(users).tolist()} if arm is not None else {}
    return InteractionLog(users, days, choices, pages, layout, n_goods, arms, prior)


def read_events(path) -> InteractionLog:
    path = Path(path)
    return parse_events(path.read_text(encoding="utf-8"), str(path))


def events_arm(path) -> str | None:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                return None
            if line.startswith("#arm "):
                return line[5:].rstrip("\n")
    return None


# -- checkpoints -------------------------------------------------------------------

def _class_tree(bundle: ArrayBundle, prefix: str = "") -> dict[str, str]:
    tree = {prefix.rstrip("."): type(bundle).__name__}
    for f in dataclasses.fields(bundle):
        value = getattr(bundle, f.name)
        if isinstance(value, ArrayBundle):
            tree.update(_class_tree(value, prefix + f.name + "."))
    return tree


def checkpoint_bytes(bundle: ArrayBundle, meta: dict | None = None) -> bytes:
    arrays = [(name, np.ascontiguousarray(a, dtype="<f8")) for name, a in bundle.leaves()]
    header = {
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "classes": _class_tree(bundle),
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    return CHECKPOINT_MAGIC + head + b"".join(a.tobytes() for _, a in arrays)


def save_checkpoint(path, bundle: ArrayBundle, meta: dict | None = None) -> None:
    _write_bytes(path, checkpoint_bytes(bundle, meta))


def _build(classes: dict[str, str], values: dict[str, np.ndarray], prefix: str = ""):
    key = prefix.rstrip(".")
    cls = BUNDLE_TYPES.get(classes.get(key, ""))
    if cls is None:
        raise FormatError(f"unknown bundle type {classes.get(key)!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        name = prefix + f.name
        if name in classes:
            kwargs[f.name] = _build(classes, values, name + ".")
        elif name in values:
            kwargs[f.name] = values[name]
        else:
            raise FormatError(f"checkpoint is missing array {name!r}")
    return cls(**kwargs)


def parse_checkpoint(data: bytes, source: str = "<checkpoint>"):
    """Returns (bundle, meta)."""
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise FormatError(f"{source}: truncated header")
    try:
        header = json.loads(rest[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: bad header ({exc})") from None
    body = rest[nl + 1:]
    values, offset = {}, 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(body):
            raise FormatError(f"{source}: truncated array data for {entry['name']!r}")
        values[entry["name"]] = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(body):
        raise FormatError(f"{source}: {len(body) - offset} trailing bytes")
    return _build(header["classes"], values), header.get("meta", {})


def load_checkpoint(path):
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), str(path))


# -- embedding tables ------------------------------------------------------------

def format_embeddings(goods: np.ndarray, vectors: np.ndarray) -> str:
    vectors = np.atleast_2d(vectors)
    lines = ["good_id," + ",".join(f"x{k}" for k in range(vectors.shape[1]))]
    for g, row in zip(np.asarray(goods).tolist(), vectors):
        lines.append(str(g + 1) + "," + ",".join(fmt_float(x) for x in row.tolist()))
    return "\n".join(lines) + "\n"


def write_embedding_table(path, table: ExogenousEmbeddingTable) -> None:
    _write_text(path, format_embeddings(table.goods, table.vectors))


def read_embedding_table(path) -> ExogenousEmbeddingTable:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("good_id,"):
        raise FormatError(f"{path}:1: expected header starting with 'good_id,'")
    width = len(lines[0].split(","))
    goods, rows = [], []
    for k, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != width:
            raise FormatError(f"{path}:{k}: expected {width} fields, got {len(fields)}")
        try:
            gid = int(fields[0])
            rows.append([float(x) for x in fields[1:]])
        except ValueError:
            raise FormatError(f"{path}:{k}: non-numeric field") from None
        if gid < 1:
            raise FormatError(f"{path}:{k}: good ids must be >= 1")
        goods.append(gid - 1)
    vectors = np.array(rows, dtype=np.float64).reshape(len(rows), width - 1)
    try:
        return ExogenousEmbeddingTable(np.array(goods, dtype=np.int64), vectors)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# -- CSV outputs with metadata sidecars ---------------------------------------------

def _cell(x) -> str:
    if isinstance(x, (float, np.floating)):
        return fmt_float(x)
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def format_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(x) for x in row])
    return buf.getvalue()


def input_hashes(paths: Iterable) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        out[p.name] = git_blob_hash(p.read_bytes())
    return dict(sorted(out.items()))


def sidecar_text(seed: int, inputs: dict[str, str], extra: dict | None = None) -> str:
    meta = {"inputs": inputs, "seed": int(seed), "tool": "recdemand", "version": __version__}
    if extra:
        meta.update(extra)
    return json.dumps(meta, sort_keys=True, indent=2) + "\n"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], seed: int,
              inputs: dict[str, str], extra: dict | None = None) -> None:
    """CSV plus a ``<name>.meta.json`` sidecar with seed, input hashes and version."""
    _write_text(path, format_csv(header, rows))
    write_sidecar(path, seed, inputs, extra)


def write_sidecar(path, seed: int, inputs: dict[str, str], extra: dict | None = None) -> None:
    path = Path(path)
    _write_text(path.with_name(path.name + ".meta.json"), sidecar_text(seed, inputs, extra))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _write_text(path, text: str) -> None:
    _write_bytes(path, text.encode("utf-8"))


def _write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
