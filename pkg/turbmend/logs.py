import logging

from rich.logging import RichHandler

DIAGNOSTICS_LOGGER = "turbmend.diagnostics"

diagnostics = logging.getLogger(DIAGNOSTICS_LOGGER)


def configure_logging(level: int | str = logging.INFO) -> logging.Logger:
    """Route turbmend log records to a single rich console handler.

    Only the command line calls this; as a library turbmend leaves handler
    setup to the host application.
    """
    logger = logging.getLogger("turbmend")
    for handler in list(logger.handlers):
        if isinstance(handler, RichHandler):
            logger.removeHandler(handler)
    handler = RichHandler(show_path=False, rich_tracebacks=True, markup=False)
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False
    return logger


def log_iteration(solver: str, iteration: int, objective: float, residual: float) -> None:
    # CSV: solver,iteration,objective,residual
    if diagnostics.isEnabledFor(logging.DEBUG):
        diagnostics.debug(f"{solver},{iteration},{objective:.10g},{residual:.10g}")
