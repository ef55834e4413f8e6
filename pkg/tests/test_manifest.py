"""Run manifests: serialization, artifact comparison, directory locking."""

import hashlib

import numpy as np
import pytest

from flexdiff.manifest import (
    ManifestError,
    RunManifest,
    acquire_lock,
    compare_artifacts,
    read_manifest,
    release_lock,
    sha256_file,
    write_manifest,
)


def make_manifest(**kw):
    base = dict(command="train", argv=["flexdiff", "train", "--steps", "5"],
                seed=11, config_hash="ab" * 32, plan="weak:30,powerful:20",
                flops=123456789)
    base.update(kw)
    return RunManifest(**base)


class TestSerialization:
    def test_round_trip(self):
        m = make_manifest()
        m.extra["note"] = "smoke"
        m.artifacts["model.fxck"] = "cd" * 32
        got = RunManifest.from_text(m.to_text())
        assert got == m

    def test_argv_with_spaces_survives(self):
        m = make_manifest(argv=["flexdiff", "train", "--note", "two words",
                                "--plan", "weak:30,powerful:20"])
        got = RunManifest.from_text(m.to_text())
        assert got.argv == m.argv

    def test_dotted_artifact_names(self):
        m = make_manifest()
        m.artifacts["samples.grid.pgm"] = "11" * 32
        got = RunManifest.from_text(m.to_text())
        assert got.artifacts == {"samples.grid.pgm": "11" * 32}

    def test_required_fields(self):
        with pytest.raises(ManifestError, match="run.command"):
            RunManifest.from_text("[run]\nseed = 1\n")

    def test_unknown_key_rejected(self):
        m = make_manifest()
        text = m.to_text() + "[rogue]\nx = 1\n"
        with pytest.raises(ManifestError, match="unknown manifest key"):
            RunManifest.from_text(text)

    def test_defaults_fill_missing_optionals(self):
        got = RunManifest.from_text("[run]\nargv = a b\ncommand = sample\n")
        assert got.seed == 0 and got.flops == 0
        assert got.plan == "" and got.artifacts == {}


class TestFiles:
    def test_write_read(self, tmp_path):
        m = make_manifest()
        write_manifest(tmp_path, m)
        assert read_manifest(tmp_path) == m

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError, match="no manifest.txt"):
            read_manifest(tmp_path)

    def test_sha256_file(self, tmp_path):
        path = tmp_path / "blob.bin"
        payload = bytes(range(256)) * 10
        path.write_bytes(payload)
        assert sha256_file(path) == hashlib.sha256(payload).hexdigest()

    def test_add_artifact_uses_basename(self, tmp_path):
        path = tmp_path / "deep" / "model.fxck"
        path.parent.mkdir()
        path.write_bytes(b"x")
        m = make_manifest()
        m.add_artifact(path)
        assert list(m.artifacts) == ["model.fxck"]


class TestCompare:
    def test_equal_is_empty(self):
        a = make_manifest()
        a.artifacts = {"x": "1", "y": "2"}
        b = make_manifest()
        b.artifacts = {"y": "2", "x": "1"}
        assert compare_artifacts(a, b) == []

    def test_differing_and_one_sided(self):
        a = make_manifest()
        a.artifacts = {"x": "1", "y": "2", "only_a": "3"}
        b = make_manifest()
        b.artifacts = {"x": "1", "y": "9", "only_b": "4"}
        assert compare_artifacts(a, b) == ["only_a", "only_b", "y"]


class TestLock:
    def test_exclusive_acquire(self, tmp_path):
        lock = acquire_lock(tmp_path)
        with pytest.raises(ManifestError, match="locked by another run"):
            acquire_lock(tmp_path)
        release_lock(lock)
        release_lock(acquire_lock(tmp_path))

    def test_release_tolerates_missing(self, tmp_path):
        release_lock(str(tmp_path / ".lock"))
