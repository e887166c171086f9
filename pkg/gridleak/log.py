"""Package logger."""

from logging import (
    DEBUG,
    INFO,
    WARNING,
    Formatter,
    StreamHandler,
    getLogger,
)


log = getLogger("gridleak")

_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup(verbosity: int = 0) -> None:
    """Attach a stderr handler; 1 means INFO, 2 or more DEBUG."""
    if verbosity >= 2:
        level = DEBUG
    elif verbosity == 1:
        level = INFO
    else:
        level = WARNING

    if not log.handlers:
        handler = StreamHandler()
        handler.setFormatter(Formatter(_FORMAT))
        log.addHandler(handler)

    log.setLevel(level)
