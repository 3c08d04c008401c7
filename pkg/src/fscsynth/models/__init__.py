"""Bundled example models and specifications."""

from pathlib import Path

ROOT = Path(__file__).parent


def path(name: str) -> Path:
    return ROOT / name


def text(name: str) -> str:
    return path(name).read_text()
