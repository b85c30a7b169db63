"""Run manifest: which files a training run used, with content hashes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .trainer import FingerprintMismatch

MANIFEST_NAME = "manifest.json"


class MissingFile(FileNotFoundError):
    pass


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class FileRef:
    path: str
    sha256: str

    @classmethod
    def of(cls, path: str | Path) -> "FileRef":
        p = Path(path).resolve()
        if not p.is_file():
            raise MissingFile(f"no such file: {path}")
        return cls(str(p), file_sha256(p))

    def verify(self) -> None:
        if not Path(self.path).is_file():
            raise MissingFile(f"manifest references a missing file: {self.path}")
        actual = file_sha256(self.path)
        if actual != self.sha256:
            raise FingerprintMismatch(f"{self.path} changed since it was recorded (sha256 {actual[:12]}...)")


@dataclass
class RunManifest:
    seed: int
    model: dict
    train_config_sha256: str
    tokenizer_fingerprint: str = ""
    tokenizer: FileRef | None = None
    dataset: FileRef | None = None
    eval_dataset: FileRef | None = None
    sft: bool = False
    checkpoints: list[FileRef] = field(default_factory=list)
    telemetry: FileRef | None = None
    created: str = field(default_factory=now_iso)
    updated: str = field(default_factory=now_iso)

    def refs(self) -> list[FileRef]:
        out = [r for r in (self.tokenizer, self.dataset, self.eval_dataset, self.telemetry) if r is not None]
        return out + list(self.checkpoints)

    def verify(self) -> None:
        for ref in self.refs():
            ref.verify()

    def add_checkpoint(self, path: str | Path) -> None:
        ref = FileRef.of(path)
        self.checkpoints = [c for c in self.checkpoints if c.path != ref.path] + [ref]
        self.updated = now_iso()

    def dumps(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        for key in ("tokenizer", "dataset", "eval_dataset", "telemetry"):
            if d.get(key) is not None:
                d[key] = FileRef(**d[key])
        d["checkpoints"] = [FileRef(**c) for c in d.get("checkpoints", [])]
        return cls(**d)

    def save(self, directory: str | Path) -> Path:
        path = Path(directory) / MANIFEST_NAME
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(self.dumps(), encoding="utf-8")
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, directory: str | Path, verify: bool = True) -> "RunManifest":
        path = Path(directory) / MANIFEST_NAME
        if not path.is_file():
            raise MissingFile(f"no run manifest in {directory}")
        m = cls.loads(path.read_text(encoding="utf-8"))
        if verify:
            m.verify()
        return m
