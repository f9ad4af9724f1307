"""Config-driven experiment runners and the ``gradmatch`` command line."""
from .cli import main
from .runners import RUNNERS

__all__ = ["main", "RUNNERS"]
