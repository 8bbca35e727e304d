from typing import Optional


class FexSdeError(Exception):
    """Базовая ошибка пакета"""


class ConfigurationError(FexSdeError, ValueError):
    pass


class ExpressionParseError(ConfigurationError):
    pass


class ArtifactMissingError(FexSdeError, FileNotFoundError):
    def __init__(self, message: str, command: Optional[str] = None):
        if command:
            message = f"{message} (run `fexsde {command}` first)"
        super().__init__(message)
        self.command = command


class NumericalError(FexSdeError, ArithmeticError):
    def __init__(self, message: str, tau: Optional[float] = None):
        if tau is not None:
            message = f"{message} at tau={tau:.6g}"
        super().__init__(message)
        self.tau = tau


class CacheContractError(FexSdeError, RuntimeError):
    pass


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_NUMERICAL = 4
