"""
Run Manifest - Stage completion records with artifact checksums
Root manifest (run directory) holds shared stages and the list of cells;
each (bias, seed) cell keeps its own cell_manifest.json.
"""
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List

import numpy as np

from core.checkpoint import artifact_checksum
from core.errors import ConfigurationError, ManifestMismatchError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CELL_MANIFEST_NAME = "cell_manifest.json"

# dependency order for listing
STAGE_ORDER = ("pretrain", "steer", "generate", "finetune", "evaluate", "analyze", "recover",
               "verbalize", "report")


@dataclass
class StageRecord:
    stage: str
    key: str
    status: str
    artifacts: Dict[str, str] = field(default_factory=dict)
    started: str = ""
    seconds: float = 0.0
    notes: dict = field(default_factory=dict)


def environment_notes():
    return {"python": sys.version.split()[0], "numpy": np.__version__, "platform": platform.platform(),
            "precision": "float64"}


class RunManifest:
    """
    JSON manifest under a directory. Artifact paths are stored relative to
    root so a run directory can be moved.
    """

    def __init__(self, path, root, config_hash, scope="run"):
        self.path = path
        self.root = root
        self.config_hash = config_hash
        self.scope = scope
        self.stages: List[StageRecord] = []
        self.cells: List[str] = []
        self.environment = environment_notes()

    @classmethod
    def open(cls, root, config_hash, force=False, name=MANIFEST_NAME, scope="run"):
        """Load the manifest under root, or start a new one; refuses a foreign config unless force"""
        path = os.path.join(root, name)
        manifest = cls(path, root, config_hash, scope)
        if not os.path.exists(path):
            return manifest
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path} is not valid JSON: {e}")
        if data.get("config_hash") != config_hash:
            if not force:
                raise ManifestMismatchError(
                    f"{path} was produced by config {data.get('config_hash', '?')[:12]}, "
                    f"current config is {config_hash[:12]}; rerun with --force to overwrite")
            logger.warning(f"Config hash changed for {path}; --force given, previous stage records dropped")
            return manifest
        manifest.stages = [StageRecord(**s) for s in data.get("stages", [])]
        manifest.cells = list(data.get("cells", []))
        return manifest

    def to_dict(self):
        ordered = sorted(self.stages, key=lambda s: (STAGE_ORDER.index(s.stage), s.key))
        return {"config_hash": self.config_hash, "scope": self.scope, "environment": self.environment,
                "stages": [asdict(s) for s in ordered], "cells": sorted(self.cells)}

    def save(self):
        os.makedirs(self.root, exist_ok=True)
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        os.replace(tmp, self.path)
        return self.path

    def find(self, stage, key):
        for record in self.stages:
            if record.stage == stage and record.key == key:
                return record
        return None

    def is_complete(self, stage, key, inputs=None):
        """Recorded ok, same upstream inputs, and every artifact still on disk with its recorded checksum"""
        record = self.find(stage, key)
        if record is None or record.status != "ok":
            return False
        if inputs is not None and record.notes.get("inputs") != inputs:
            logger.info(f"Upstream artifacts of {stage}[{key}] changed; stage will rerun")
            return False
        for rel, checksum in record.artifacts.items():
            path = os.path.join(self.root, rel)
            if not os.path.exists(path) or artifact_checksum(path) != checksum:
                logger.warning(f"Artifact {rel} of {stage}[{key}] is missing or changed; stage will rerun")
                return False
        return True

    def record(self, stage, key, paths, status="ok", started=None, seconds=0.0, notes=None, inputs=None):
        notes = dict(notes or {})
        if inputs is not None:
            notes["inputs"] = inputs
        artifacts = {}
        for path in paths:
            if os.path.exists(path):
                artifacts[os.path.relpath(path, self.root)] = artifact_checksum(path)
        entry = StageRecord(stage=stage, key=key, status=status, artifacts=artifacts,
                            started=started or time.strftime("%Y-%m-%d %H:%M:%S"),
                            seconds=round(float(seconds), 3), notes=notes)
        self.stages = [s for s in self.stages if not (s.stage == stage and s.key == key)]
        self.stages.append(entry)
        self.save()
        return entry

    def add_cell(self, rel_dir):
        if rel_dir not in self.cells:
            self.cells.append(rel_dir)
            self.save()

    def artifact_checksums(self):
        """rel path -> checksum over every ok stage"""
        return {rel: checksum for s in self.stages if s.status == "ok" for rel, checksum in s.artifacts.items()}


def cell_manifest(cell_dir, config_hash, force=False):
    return RunManifest.open(cell_dir, config_hash, force=force, name=CELL_MANIFEST_NAME, scope="cell")
