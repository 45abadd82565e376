"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad ranks, ratios, dimension chains, depths."""


class ShapeError(ValueError):
    """Operands with incompatible shapes or stack depths."""


class NumericInputError(ValueError):
    """Non-finite values fed to a numeric routine."""


class NumericDivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``term`` names the offending quantity; ``round_index`` and ``client_id``
    are filled in by the orchestrator when known.
    """

    def __init__(self, term, round_index=None, client_id=None):
        self.term = term
        self.round_index = round_index
        self.client_id = client_id
        where = ""
        if round_index is not None:
            where += f" at round {round_index}"
        if client_id is not None:
            where += f" on client {client_id}"
        super().__init__(f"non-finite value in {term}{where}")


class ProtocolError(RuntimeError):
    """Malformed exchange between server and clients."""

    def __init__(self, message, client_id=None):
        self.client_id = client_id
        if client_id is not None:
            message = f"client {client_id}: {message}"
        super().__init__(message)


class FormatError(ValueError):
    """Malformed serialized stack; ``offset`` points at the violating byte."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (offset {offset})")


class SolverError(RuntimeError):
    """Inner solver failed to decrease its objective."""
