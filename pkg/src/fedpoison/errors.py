"""Exception hierarchy shared across the simulator."""


class FedPoisonError(Exception):
    pass


class ConfigError(FedPoisonError, ValueError):
    """Invalid configuration value or combination."""


class ParseError(FedPoisonError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyDatasetError(FedPoisonError, ValueError):
    pass


class AttackSetupError(FedPoisonError, ValueError):
    """Attack cannot be constructed (e.g. candidate pool too small)."""


class SamplingError(FedPoisonError, RuntimeError):
    pass
