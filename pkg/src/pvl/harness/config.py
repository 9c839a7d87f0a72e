"""Checked-in thresholds and bundled conversation scripts."""

from __future__ import annotations

import json
from pathlib import Path

from ..transcript import Transcript, Vocabulary, load_script

HERE = Path(__file__).parent
THRESHOLDS_PATH = HERE / "thresholds.json"
DATA_DIR = HERE / "data"
SCRIPTS = ("drift", "aura", "plan", "plan_no_trigger")


def load_thresholds(path=None) -> dict:
    return json.loads(Path(path or THRESHOLDS_PATH).read_text())


def thresholds_for(section: str, path=None) -> dict:
    data = load_thresholds(path)
    if section not in data:
        raise KeyError(f"no thresholds for {section!r}")
    return dict(data[section])


def script(name: str, vocab: Vocabulary) -> Transcript:
    if name not in SCRIPTS:
        raise KeyError(f"unknown script {name!r}; bundled: {SCRIPTS}")
    return load_script(DATA_DIR / f"{name}.json", vocab)
