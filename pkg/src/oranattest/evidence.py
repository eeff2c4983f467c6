"""Evidence collection from a file-backed stand-in for a NETCONF datastore.

A manifest binds evidence ids to sources (whole files, single XML elements,
or runtime fields handed in by the O-RU controller). ``collect`` resolves the
manifest against a consistent copy of the datastore and returns the items in
canonical order: ascending by the UTF-8 bytes of the id.

Manifest grammar, one entry per line, ``#`` starts a comment, tokens are
shell-quoted::

    <id> <category> <static|dynamic> file    <path>
    <id> <category> <static|dynamic> subtree <file> <selector>
    <id> <category> <static|dynamic> runtime <field-name>

Relative ``file`` paths resolve inside the datastore; absolute paths are read
from disk at collection time (used for the reporter's own binary).

Selectors are element names joined by ``/``. A leading ``//`` matches the
first element anywhere in the document; otherwise the first name must be the
document element. Namespaces are ignored. The payload is the element's text
content encoded as UTF-8, so a numeric leaf such as ``clock-class`` is hashed
as its decimal text.
"""

from __future__ import annotations

import logging
import os
import shlex
import tempfile
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

from . import merkle
from .errors import (
    CollectionError,
    DatastoreNotFound,
    DuplicateEvidenceId,
    EmptyEvidenceSet,
    ManifestError,
    PathViolation,
    UnknownEvidenceId,
)

log = logging.getLogger(__name__)


class Category(str, Enum):
    RuntimeConfig = "RuntimeConfig"
    StartupBaseline = "StartupBaseline"
    ReporterBinary = "ReporterBinary"
    AccessControl = "AccessControl"
    KpmTelemetry = "KpmTelemetry"
    KpmSubscription = "KpmSubscription"
    FronthaulSecurity = "FronthaulSecurity"
    SyncParams = "SyncParams"
    FirmwareVersion = "FirmwareVersion"
    RfCapabilities = "RfCapabilities"
    YangModuleIntegrity = "YangModuleIntegrity"
    InitServices = "InitServices"
    RuntimeControlField = "RuntimeControlField"


class Disclosure(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class FileSource:
    path: str

    def describe(self) -> list[str]:
        return ["file", self.path]


@dataclass(frozen=True)
class SubtreeSource:
    file: str
    selector: str

    def describe(self) -> list[str]:
        return ["subtree", self.file, self.selector]


@dataclass(frozen=True)
class RuntimeSource:
    name: str

    def describe(self) -> list[str]:
        return ["runtime", self.name]


Source = Union[FileSource, SubtreeSource, RuntimeSource]


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    category: Category
    disclosure: Disclosure
    source: Source

    def to_line(self) -> str:
        tokens = [self.id, self.category.value, self.disclosure.value, *self.source.describe()]
        return " ".join(shlex.quote(t) for t in tokens)


@dataclass
class EvidenceManifest:
    entries: list[ManifestEntry]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @classmethod
    def parse(cls, text: str) -> "EvidenceManifest":
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            try:
                tokens = shlex.split(line, comments=True)
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from None
            if not tokens:
                continue
            if len(tokens) < 5:
                raise ManifestError(f"line {lineno}: expected at least 5 fields, got {len(tokens)}")
            ident, cat, disc, kind, *args = tokens
            try:
                category = Category(cat)
            except ValueError:
                raise ManifestError(f"line {lineno}: unknown category {cat!r}") from None
            try:
                disclosure = Disclosure(disc.lower())
            except ValueError:
                raise ManifestError(f"line {lineno}: disclosure must be static or dynamic") from None
            if kind == "file" and len(args) == 1:
                source: Source = FileSource(args[0])
            elif kind == "subtree" and len(args) == 2:
                source = SubtreeSource(args[0], args[1])
            elif kind == "runtime" and len(args) == 1:
                source = RuntimeSource(args[0])
            else:
                raise ManifestError(f"line {lineno}: bad source {kind!r} with {len(args)} argument(s)")
            entries.append(ManifestEntry(ident, category, disclosure, source))
        return cls(entries)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EvidenceManifest":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        header = "# id category disclosure source-kind source-args...\n"
        return header + "".join(e.to_line() + "\n" for e in self.entries)


@dataclass(frozen=True)
class EvidenceItem:
    id: str
    category: Category
    disclosure: Disclosure
    payload: bytes
    source: Source

    @property
    def digest(self) -> bytes:
        return merkle.leaf_hash(self.payload)


def _sort_key(ident: str) -> bytes:
    return ident.encode("utf-8")


class EvidenceSet:
    """Evidence items held in canonical (byte-wise id) order."""

    def __init__(self, items: Iterable[EvidenceItem]) -> None:
        ordered = sorted(items, key=lambda it: _sort_key(it.id))
        for a, b in zip(ordered, ordered[1:]):
            if a.id == b.id:
                raise DuplicateEvidenceId(a.id)
        self.items: tuple[EvidenceItem, ...] = tuple(ordered)
        self._index = {it.id: i for i, it in enumerate(self.items)}

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __contains__(self, ident: object) -> bool:
        return ident in self._index

    def __getitem__(self, ident: str) -> EvidenceItem:
        try:
            return self.items[self._index[ident]]
        except KeyError:
            raise UnknownEvidenceId(ident) from None

    def index_of(self, ident: str) -> int:
        try:
            return self._index[ident]
        except KeyError:
            raise UnknownEvidenceId(ident) from None

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    def leaf_digests(self) -> list[bytes]:
        return [it.digest for it in self.items]

    def replace(self, ident: str, payload: bytes) -> "EvidenceSet":
        old = self[ident]
        items = list(self.items)
        items[self._index[ident]] = EvidenceItem(old.id, old.category, old.disclosure, payload, old.source)
        return EvidenceSet(items)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, EvidenceSet) and self.items == other.items

    def __repr__(self) -> str:
        return f"EvidenceSet({len(self.items)} items)"


@dataclass(frozen=True)
class ConfigUpdateEvent:
    file: str
    version: int
    time_ms: int


def _now_ms() -> int:
    return time.time_ns() // 1_000_000


class DatastoreSnapshot:
    """In-memory mirror of a datastore directory.

    Writers go through ``apply_update`` / ``refresh``; readers take a copy of
    the file map with ``files_copy`` so a collection never sees a half-applied
    update.
    """

    def __init__(self, root_dir: str | os.PathLike, files: dict[str, bytes], version: int = 0) -> None:
        self.root_dir = Path(root_dir)
        self.files = files
        self.version = version
        self._lock = threading.Lock()

    def files_copy(self) -> dict[str, bytes]:
        with self._lock:
            return dict(self.files)

    def _resolve(self, file: str | os.PathLike) -> tuple[str, Path]:
        root = self.root_dir.resolve()
        candidate = Path(file)
        if candidate.is_absolute():
            raise PathViolation(f"{file}: absolute paths are not allowed")
        target = (root / candidate).resolve()
        try:
            rel = target.relative_to(root)
        except ValueError:
            raise PathViolation(f"{file}: escapes datastore root") from None
        if str(rel) == ".":
            raise PathViolation(f"{file}: not a file path")
        return rel.as_posix(), target

    def apply_update(self, file: str | os.PathLike, new_bytes: bytes) -> ConfigUpdateEvent:
        rel, target = self._resolve(file)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".upd-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(new_bytes)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        with self._lock:
            self.files[rel] = bytes(new_bytes)
            self.version += 1
            version = self.version
        return ConfigUpdateEvent(rel, version, _now_ms())

    def refresh(self, file: str, content: bytes | None) -> ConfigUpdateEvent:
        """Record an externally made change (``content=None`` means deleted)."""
        rel, _ = self._resolve(file)
        with self._lock:
            if content is None:
                self.files.pop(rel, None)
            else:
                self.files[rel] = content
            self.version += 1
            version = self.version
        return ConfigUpdateEvent(rel, version, _now_ms())

    def __repr__(self) -> str:
        return f"DatastoreSnapshot({str(self.root_dir)!r}, files={len(self.files)}, version={self.version})"


def load_datastore(root_dir: str | os.PathLike) -> DatastoreSnapshot:
    root = Path(root_dir)
    if not root.is_dir():
        raise DatastoreNotFound(str(root))
    files: dict[str, bytes] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            full = Path(dirpath) / name
            if not full.is_file() or full.is_symlink():
                continue
            try:
                files[full.relative_to(root).as_posix()] = full.read_bytes()
            except OSError as exc:
                raise CollectionError(str(full), exc.strerror or str(exc)) from exc
    return DatastoreSnapshot(root, files, 0)


def apply_update(snapshot: DatastoreSnapshot, file: str | os.PathLike, new_bytes: bytes) -> ConfigUpdateEvent:
    return snapshot.apply_update(file, new_bytes)


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1] if isinstance(tag, str) else ""


def _walk(el: ET.Element, names: Sequence[str]) -> ET.Element | None:
    if not names:
        return el
    for child in el:
        if _local(child.tag) == names[0]:
            found = _walk(child, names[1:])
            if found is not None:
                return found
    return None


def select_element(document: bytes, selector: str) -> ET.Element | None:
    anywhere = selector.startswith("//")
    names = [n for n in selector.strip("/").split("/") if n]
    if not names:
        raise ValueError(f"empty selector {selector!r}")
    root = ET.fromstring(document)
    if anywhere:
        for el in root.iter():
            if _local(el.tag) == names[0]:
                found = _walk(el, names[1:])
                if found is not None:
                    return found
        return None
    if _local(root.tag) != names[0]:
        return None
    return _walk(root, names[1:])


def select_text(document: bytes, selector: str) -> bytes | None:
    el = select_element(document, selector)
    if el is None:
        return None
    return "".join(el.itertext()).encode("utf-8")


def _resolve_entry(
    entry: ManifestEntry, files: Mapping[str, bytes], runtime_fields: Mapping[str, bytes]
) -> bytes:
    src = entry.source
    if isinstance(src, RuntimeSource):
        if src.name not in runtime_fields:
            raise CollectionError(entry.id, f"runtime field {src.name!r} not supplied")
        return bytes(runtime_fields[src.name])

    fname = src.path if isinstance(src, FileSource) else src.file
    if os.path.isabs(fname):
        try:
            data = Path(fname).read_bytes()
        except OSError as exc:
            raise CollectionError(entry.id, f"cannot read {fname}: {exc.strerror}") from exc
    else:
        key = Path(fname).as_posix()
        if key not in files:
            raise CollectionError(entry.id, f"file {fname!r} not in datastore")
        data = files[key]

    if isinstance(src, FileSource):
        return data
    try:
        text = select_text(data, src.selector)
    except ET.ParseError as exc:
        raise CollectionError(entry.id, f"{fname} is not well-formed XML: {exc}") from None
    if text is None:
        raise CollectionError(entry.id, f"selector {src.selector!r} matched nothing in {fname}")
    return text


def collect(
    manifest: EvidenceManifest,
    snapshot: DatastoreSnapshot,
    runtime_fields: Mapping[str, bytes] | None = None,
) -> EvidenceSet:
    if not manifest.entries:
        raise EmptyEvidenceSet("manifest has no entries")
    files = snapshot.files_copy()
    runtime_fields = runtime_fields or {}
    seen: set[str] = set()
    items = []
    for entry in manifest.entries:
        if entry.id in seen:
            raise DuplicateEvidenceId(entry.id)
        seen.add(entry.id)
        payload = _resolve_entry(entry, files, runtime_fields)
        if not payload:
            raise CollectionError(entry.id, "empty payload")
        items.append(EvidenceItem(entry.id, entry.category, entry.disclosure, payload, entry.source))
    return EvidenceSet(items)


def compute_config_hash(evidence: EvidenceSet) -> bytes:
    """Configuration hash used by the trigger logic: the Merkle root itself."""
    if len(evidence) == 0:
        raise EmptyEvidenceSet("evidence set is empty")
    return merkle.merkle_root(evidence.leaf_digests())
