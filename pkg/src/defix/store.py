"""On-disk artifact store: content-addressed files plus a JSON manifest.

Layout under the ``--out`` directory::

    datasets/     <name>-<sha12>.data   Dataset files
    checkpoints/  <name>-<sha12>.ckpt   ModelCheckpoint files
    scenarios/    <name>-<sha12>.json   mini-scenarios and route suites
    reports/      <name>-<sha12>.json   evaluation and training reports (+ figures)
    manifest.json                       logical name -> path, sha256, metadata
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .data import Dataset
from .nn import ModelCheckpoint
from .sim import canonical_json

MANIFEST_VERSION = 1
KINDS = {"datasets": ".data", "checkpoints": ".ckpt", "scenarios": ".json", "reports": ".json"}


class MissingArtifactError(LookupError):
    pass


class ArtifactStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        for kind in KINDS:
            (self.root / kind).mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
            if self.manifest.get("version") != MANIFEST_VERSION:
                raise ValueError(f"unsupported manifest version {self.manifest.get('version')!r}")
        else:
            self.manifest = {"version": MANIFEST_VERSION, "artifacts": {}, "commands": []}

    # --- writing ---------------------------------------------------------------------------

    def _save_manifest(self) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")
        tmp.replace(self.manifest_path)

    def put_bytes(self, kind: str, name: str, blob: bytes, meta: dict | None = None,
                  suffix: str | None = None) -> dict:
        if kind not in KINDS:
            raise ValueError(f"unknown artifact kind {kind!r}")
        sha = hashlib.sha256(blob).hexdigest()
        rel = f"{kind}/{name}-{sha[:12]}{suffix or KINDS[kind]}"
        path = self.root / rel
        if not path.exists():
            path.write_bytes(blob)
        entry = {"kind": kind, "path": rel, "sha256": sha, "meta": meta or {}}
        self.manifest["artifacts"][name] = entry
        self._save_manifest()
        return entry

    def put_dataset(self, name: str, data: Dataset, meta: dict | None = None) -> dict:
        return self.put_bytes("datasets", name, data.to_bytes(), {"n": len(data), **(meta or {})})

    def put_checkpoint(self, name: str, ckpt: ModelCheckpoint, meta: dict | None = None) -> dict:
        return self.put_bytes("checkpoints", name, ckpt.to_bytes(), {"id": ckpt.id, **(meta or {})})

    def put_json(self, kind: str, name: str, obj, meta: dict | None = None) -> dict:
        return self.put_bytes(kind, name, (canonical_json(obj) + "\n").encode(), meta)

    def put_file(self, kind: str, name: str, path: str | Path, meta: dict | None = None) -> dict:
        path = Path(path)
        return self.put_bytes(kind, name, path.read_bytes(), meta, path.suffix)

    def log_command(self, record: dict) -> None:
        self.manifest["commands"].append(record)
        self._save_manifest()

    # --- reading ---------------------------------------------------------------------------

    def has(self, name: str) -> bool:
        return name in self.manifest["artifacts"]

    def entry(self, name: str) -> dict:
        try:
            return self.manifest["artifacts"][name]
        except KeyError:
            raise MissingArtifactError(f"artifact {name!r} not found in {self.manifest_path}") from None

    def path(self, name: str) -> Path:
        p = self.root / self.entry(name)["path"]
        if not p.exists():
            raise MissingArtifactError(f"artifact file {p} is missing")
        return p

    def read_bytes(self, name: str) -> bytes:
        blob = self.path(name).read_bytes()
        if hashlib.sha256(blob).hexdigest() != self.entry(name)["sha256"]:
            raise ValueError(f"artifact {name!r} does not match its manifest hash")
        return blob

    def load_dataset(self, name: str) -> Dataset:
        return Dataset.from_bytes(self.read_bytes(name))

    def load_checkpoint(self, name: str) -> ModelCheckpoint:
        return ModelCheckpoint.from_bytes(self.read_bytes(name))

    def load_json(self, name: str):
        return json.loads(self.read_bytes(name))

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self.manifest["artifacts"] if n.startswith(prefix))

    def hashes(self) -> dict[str, str]:
        return {n: e["sha256"] for n, e in sorted(self.manifest["artifacts"].items())}
