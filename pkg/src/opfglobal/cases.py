"""Access to the case files shipped with the package."""

from __future__ import annotations

from importlib.resources import files
from pathlib import Path


def data_dir() -> Path:
    return Path(str(files("opfglobal") / "data"))


def bundled_cases() -> list[str]:
    return sorted(p.stem for p in data_dir().glob("*.m"))


def case_path(name: str) -> Path:
    path = data_dir() / f"{name}.m"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled case named {name!r}")
    return path
