"""Exception hierarchy. Each family maps to a CLI exit code."""


class EvForecastError(Exception):
    exit_code = 1


class ConfigError(EvForecastError):
    exit_code = 2


class DataError(EvForecastError):
    """Bad or inconsistent input data."""

    exit_code = 3

    def __init__(self, message, stage=None):
        self.stage = stage
        super().__init__(f"[{stage}] {message}" if stage else message)


class ShapeError(DataError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class GapError(DataError):
    pass


class DataCorruptionError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class TrainingDivergenceError(EvForecastError):
    exit_code = 4

    def __init__(self, epoch, step=None, detail="non-finite value"):
        self.epoch = epoch
        self.step = step
        where = f"epoch {epoch}" + (f", step {step}" if step is not None else "")
        super().__init__(f"training diverged at {where}: {detail}")


class ModelFileError(EvForecastError):
    exit_code = 3


class CorruptModelError(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class MissingArtifactError(EvForecastError):
    """An upstream CLI artifact is absent; names the command that creates it."""

    exit_code = 5

    def __init__(self, path, command):
        self.path = path
        self.command = command
        super().__init__(f"missing {path}; run `evforecast {command}` first")
