"""mixexpo's version and on-disk format numbers."""

from typing import Final
from importlib.metadata import PackageNotFoundError, version

__all__ = ['VERSION', 'CHECKPOINT_FORMAT']


def _installed_version() -> str:
    """Version of the installed distribution, or 'dev' for a source checkout."""
    try:
        return version('mixexpo')
    except PackageNotFoundError:
        return 'dev'


VERSION: Final[str] = _installed_version()

# Bumped whenever the checkpoint archive layout changes.
CHECKPOINT_FORMAT: Final[int] = 1
