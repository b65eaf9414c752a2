"""Exception hierarchy shared by all modules.

Each class carries a short ``category`` used by the CLI to print a
categorized error line.
"""


class ProladError(Exception):
    category = "error"


class DimensionError(ProladError, ValueError):
    category = "dimension"


class ConfigurationError(ProladError, ValueError):
    category = "configuration"


class ContractError(ProladError, RuntimeError):
    category = "contract"


class InputError(ProladError, ValueError):
    category = "input"


class TrainingError(ProladError, RuntimeError):
    category = "training"


class FormatError(ProladError, ValueError):
    category = "format"
