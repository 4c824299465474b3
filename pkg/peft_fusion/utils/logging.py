import logging

from rich.console import Console
from rich.logging import RichHandler

_HANDLER_NAME = "peft_fusion.rich"


def configure_logging(level: str = "INFO", console: Console | None = None) -> logging.Logger:
    """Install one rich handler on standard error for the ``peft_fusion`` logger tree.

    Calling it again only changes the level.
    """
    root = logging.getLogger("peft_fusion")
    root.setLevel(level)
    if not any(handler.get_name() == _HANDLER_NAME for handler in root.handlers):
        handler = RichHandler(
            console=console or Console(stderr=True),
            show_path=False,
            rich_tracebacks=False,
            markup=False,
        )
        handler.set_name(_HANDLER_NAME)
        handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
        root.addHandler(handler)
    return root
