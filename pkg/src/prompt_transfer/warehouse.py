"""Prompt warehouse: an on-disk catalog of prompts plus the run manifest."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path

from . import binio
from .errors import DigestMismatchError
from .tuning import SoftPrompt, load_prompt, save_prompt

INDEX_NAME = "warehouse.json"
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class EntryKey:
    model_digest: str
    task: str
    seed: int
    provenance: str

    def as_list(self) -> list:
        return [self.model_digest, self.task, self.seed, self.provenance]


class WarehouseIndex:
    """Catalog of stored prompt files keyed by (model digest, task, seed, provenance).

    Writes are serialised by a lock; every load re-verifies the file digest
    recorded at store time.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.RLock()
        self._entries: dict[EntryKey, dict] = {}
        path = self.root / INDEX_NAME
        if path.exists():
            for e in json.loads(path.read_text())["entries"]:
                key = EntryKey(e["model_digest"], e["task"], int(e["seed"]), e["provenance"])
                self._entries[key] = e

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: EntryKey) -> bool:
        return key in self._entries

    def keys(self) -> list[EntryKey]:
        return sorted(self._entries, key=lambda k: k.as_list())

    def _flush(self) -> None:
        rows = [self._entries[k] for k in self.keys()]
        binio.write_file(self.root / INDEX_NAME, (json.dumps({"entries": rows}, sort_keys=True, indent=1) + "\n").encode())

    def store(self, prompt: SoftPrompt, seed: int, overwrite: bool = False, provenance: str | None = None) -> EntryKey:
        """File ``prompt``; ``provenance`` defaults to the prompt's own ``kind``."""
        kind = provenance or prompt.provenance.get("kind", "unknown")
        key = EntryKey(prompt.model_digest, prompt.task, int(seed), kind)
        rel = Path("prompts") / prompt.model_digest[:12] / f"{prompt.task}__s{int(seed)}__{kind}.ptp"
        with self._lock:
            if key in self._entries and not overwrite:
                raise KeyError(f"warehouse already holds {key.as_list()}")
            digest = save_prompt(prompt, self.root / rel)
            self._entries[key] = {**dict(zip(("model_digest", "task", "seed", "provenance"), key.as_list())),
                                  "path": rel.as_posix(), "sha256": digest}
            self._flush()
        return key

    def load(self, key: EntryKey) -> SoftPrompt:
        e = self._entries[key]
        raw = binio.read_file(self.root / e["path"])
        if binio.sha256(raw) != e["sha256"]:
            raise DigestMismatchError(f"{e['path']} does not match its recorded digest")
        return load_prompt(self.root / e["path"])

    def find(self, model_digest: str | None = None, task: str | None = None, seed: int | None = None,
             provenance: str | None = None) -> list[EntryKey]:
        return [k for k in self.keys()
                if (model_digest is None or k.model_digest == model_digest)
                and (task is None or k.task == task)
                and (seed is None or k.seed == seed)
                and (provenance is None or k.provenance == provenance)]


class Manifest:
    """Every artifact written under the output directory, with its SHA-256."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()
        path = self.root / MANIFEST_NAME
        self.entries: dict[str, str] = json.loads(path.read_text())["artifacts"] if path.exists() else {}

    def record(self, path: str | Path) -> str:
        path = Path(path)
        rel = path.resolve().relative_to(self.root.resolve()).as_posix()
        digest = binio.sha256(path.read_bytes())
        with self._lock:
            self.entries[rel] = digest
        return digest

    def write(self) -> Path:
        with self._lock:
            body = json.dumps({"artifacts": dict(sorted(self.entries.items()))}, indent=1, sort_keys=True) + "\n"
        binio.write_file(self.root / MANIFEST_NAME, body.encode())
        return self.root / MANIFEST_NAME

    def verify(self) -> list[str]:
        """Relative paths whose current bytes no longer match the manifest."""
        bad = []
        for rel, digest in sorted(self.entries.items()):
            p = self.root / rel
            if not p.exists() or binio.sha256(p.read_bytes()) != digest:
                bad.append(rel)
        return bad
