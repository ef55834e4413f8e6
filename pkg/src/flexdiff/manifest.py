"""Run manifests: enough provenance to replay a command bit-for-bit.

Every CLI command that writes artifacts also writes manifest.txt into
its output directory: the argv it ran with, the resolved config hash,
seeds, the inference plan if any, a flops summary, and a sha256 per
artifact. Replaying re-runs the stored argv in a fresh directory and
compares artifact hashes.
"""

from __future__ import annotations

import hashlib
import os
import shlex
from dataclasses import dataclass, field

from .config import format_config_text, parse_config_text


class ManifestError(ValueError):
    pass


MANIFEST_NAME = "manifest.txt"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int = 0
    config_hash: str = ""
    plan: str = ""
    flops: int = 0
    artifacts: dict[str, str] = field(default_factory=dict)  # name -> sha256
    extra: dict[str, str] = field(default_factory=dict)

    def add_artifact(self, path) -> None:
        self.artifacts[os.path.basename(str(path))] = sha256_file(path)

    def to_text(self) -> str:
        values: dict[str, object] = {
            "run.command": self.command,
            "run.argv": shlex.join(self.argv),
            "run.seed": self.seed,
            "run.config_hash": self.config_hash,
            "run.plan": self.plan,
            "run.flops": self.flops,
        }
        for k, v in self.extra.items():
            values[f"extra.{k}"] = v
        for name, digest in self.artifacts.items():
            values[f"artifact.{name}"] = digest
        return format_config_text(values)

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        flat = parse_config_text(text)
        if "run.command" not in flat or "run.argv" not in flat:
            raise ManifestError("missing run.command or run.argv")
        m = cls(
            command=flat.pop("run.command"),
            argv=shlex.split(flat.pop("run.argv")),
            seed=int(flat.pop("run.seed", "0")),
            config_hash=flat.pop("run.config_hash", ""),
            plan=flat.pop("run.plan", ""),
            flops=int(flat.pop("run.flops", "0")),
        )
        for k, v in flat.items():
            section, _, rest = k.partition(".")
            if section == "artifact":
                m.artifacts[rest] = v
            elif section == "extra":
                m.extra[rest] = v
            else:
                raise ManifestError(f"unknown manifest key {k!r}")
        return m


def write_manifest(out_dir, m: RunManifest) -> str:
    path = os.path.join(str(out_dir), MANIFEST_NAME)
    with open(path, "w") as f:
        f.write(m.to_text())
    return path


def read_manifest(out_dir) -> RunManifest:
    path = os.path.join(str(out_dir), MANIFEST_NAME)
    if not os.path.exists(path):
        raise ManifestError(f"no {MANIFEST_NAME} in {out_dir}")
    with open(path) as f:
        return RunManifest.from_text(f.read())


def compare_artifacts(a: RunManifest, b: RunManifest) -> list[str]:
    """Names whose hashes differ or that exist on one side only."""
    bad = sorted(set(a.artifacts) ^ set(b.artifacts))
    bad += sorted(k for k in set(a.artifacts) & set(b.artifacts)
                  if a.artifacts[k] != b.artifacts[k])
    return bad


def acquire_lock(out_dir) -> str:
    """One writer per output dir; O_EXCL so races lose cleanly."""
    path = os.path.join(str(out_dir), ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ManifestError(
            f"{out_dir} is locked by another run (remove .lock if stale)"
        ) from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    return path


def release_lock(path) -> None:
    if os.path.exists(path):
        os.remove(path)
