"""Project root launcher for tfi-util.

Resolves the installed `tfi-util` console script and falls back to the
in-tree CLI module when the package is not installed.
"""

from importlib.metadata import entry_points
import logging
from typing import Callable, Optional


SCRIPT_NAME = "tfi-util"

logger = logging.getLogger(__name__)


def _resolve_script(name: str) -> Optional[Callable[[], None]]:
    for ep in entry_points().select(group="console_scripts"):
        if ep.name == name:
            return ep.load()
    return None


def main() -> None:
    script = _resolve_script(SCRIPT_NAME)
    if script is None:
        logger.debug("console script '%s' が未インストールのため tfi_util_cli を直接使います", SCRIPT_NAME)
        from tfi_util_cli import main as script
    script()


if __name__ == "__main__":
    main()
