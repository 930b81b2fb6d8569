class AfrdError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AfrdError, ValueError):
    def __init__(self, op: str, axis: int | str, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: axis {axis} expected {expected}, got {got}")


class GraphError(AfrdError, RuntimeError):
    pass


class ConfigError(AfrdError, ValueError):
    pass


class CheckpointFormatError(AfrdError, ValueError):
    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class DatasetError(AfrdError, RuntimeError):
    def __init__(
        self,
        message: str,
        *,
        path: str | None = None,
        sample_id: str | None = None,
        lighting: int | None = None,
    ):
        self.path = path
        self.sample_id = sample_id
        self.lighting = lighting
        where = []
        if sample_id is not None:
            where.append(f"sample {sample_id}")
        if lighting is not None:
            where.append(f"lighting {lighting}")
        if path is not None:
            where.append(str(path))
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class MetricUndefinedError(AfrdError, ValueError):
    pass


class ScoringError(AfrdError, RuntimeError):
    def __init__(self, sample_id: str, reason: str):
        self.sample_id = sample_id
        super().__init__(f"sample {sample_id}: {reason}")


class TrainingError(AfrdError, RuntimeError):
    pass
