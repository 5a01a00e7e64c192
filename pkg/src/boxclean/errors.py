"""Exception families. The CLI maps each family to a distinct exit code."""


class BoxcleanError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(BoxcleanError):
    """Invalid configuration: bad thresholds, missing seed, unknown mode."""


class DataFormatError(BoxcleanError):
    """Unparseable or schema-violating input data (COCO files, ledgers, queues)."""


class StateError(BoxcleanError):
    """Inconsistent pipeline state: corrupt checkpoints, unresolved queues, lock conflicts."""


class ExternalDetectorError(BoxcleanError):
    """External detector command failed or produced invalid output."""


class ExternalCommandError(ExternalDetectorError):
    """The configured external detector command exited nonzero."""


class ExternalOutputMissingError(ExternalDetectorError):
    """The external detector command finished but wrote no output file."""
