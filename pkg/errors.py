"""Exception hierarchy shared by every module"""
from typing import Any, Dict, Optional


class VoltVarError(Exception):
    """Base class; `details` is what the CLI emits with --json-errors"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': type(self).__name__,
            'message': str(self),
            'details': self.details,
        }


class NetworkFileError(VoltVarError):
    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}", {'path': path, 'line': line_no})
        self.line_no = line_no


class TopologyError(VoltVarError):
    def __init__(self, message: str, edge=None):
        super().__init__(message, {'edge': list(edge) if edge is not None else None})
        self.edge = edge


class ImpedanceError(VoltVarError):
    def __init__(self, message: str, edge=None):
        super().__init__(message, {'edge': list(edge) if edge is not None else None})
        self.edge = edge


class DimensionError(VoltVarError):
    pass


class NumericalError(VoltVarError):
    pass


class DivergenceError(NumericalError):
    pass


class VoltageCollapseError(NumericalError):
    pass


class ScenarioFileError(VoltVarError):
    def __init__(self, path: str, row: int, message: str):
        super().__init__(f"{path}: row {row}: {message}", {'path': path, 'row': row})
        self.row = row


class OpfNotConvergedError(NumericalError):
    pass


class TrainingError(VoltVarError):
    def __init__(self, epoch: int, learning_rate: float, message: str = 'loss diverged'):
        super().__init__(
            f"{message} at epoch {epoch} (learning_rate={learning_rate:g})",
            {'epoch': epoch, 'learning_rate': learning_rate},
        )
        self.epoch = epoch
        self.learning_rate = learning_rate


class EquilibriumError(NumericalError):
    pass


class ControlPreconditionError(VoltVarError):
    pass


class CheckpointError(VoltVarError):
    pass
