"""
    Rigid-object toss tracking, TSDF reconstruction and contact-geometry
    learning, interlaced in a cyclic refinement loop.
"""
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path


def _version() -> str:
    # Source checkouts carry the release number in the top-level VERSION file.
    source = Path(__file__).resolve().parents[2] / 'VERSION'
    if source.is_file():
        return source.read_text().strip()
    try:
        return version('tossfuse')
    except PackageNotFoundError:
        return '0+unknown'


__version__ = _version()
