"""Exception hierarchy shared by all modules."""


class LoraComposeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LoraComposeError, ValueError):
    pass


class IncompatibleModulesError(LoraComposeError, ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        lines = [f"{mod}/{layer}: {reason}" for mod, layer, reason in self.problems]
        super().__init__("incompatible modules: " + "; ".join(lines))


class WeightArityError(LoraComposeError, ValueError):
    pass


class LabelError(LoraComposeError, ValueError):
    pass


class DataError(LoraComposeError, ValueError):
    pass


class BudgetExhaustedError(LoraComposeError, RuntimeError):
    pass


class SpecError(LoraComposeError, ValueError):
    pass


class StorageError(LoraComposeError, OSError):
    pass


class ConflictError(LoraComposeError):
    pass


class NotFoundError(LoraComposeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CorruptionError(LoraComposeError):
    pass


class FormatError(LoraComposeError, ValueError):
    pass


class EmptyRegistryError(LoraComposeError):
    pass
