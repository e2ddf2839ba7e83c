"""Fixture benchmarks: the ten-task smoke benchmark and the sf_bq028 case study."""

from __future__ import annotations

from pathlib import Path

from .casestudy import build_casestudy
from .smoke import build_smoke


def build_all(out: Path) -> dict[str, Path]:
    out = Path(out)
    paths = build_smoke(out / "smoke")
    paths.update(build_casestudy(out / "casestudy"))
    return paths


__all__ = ["build_all", "build_casestudy", "build_smoke"]
