"""Exception types. Every error carries a short machine-readable ``code``."""


class FFDError(Exception):
    code = "error"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ParseError(FFDError):
    code = "parse-error"

    def __init__(self, message, line=None, offset=None):
        where = ""
        if line is not None:
            where = f"line {line}: "
        elif offset is not None:
            where = f"byte {offset}: "
        super().__init__(where + message)
        self.line = line
        self.offset = offset


class MeshIndexError(FFDError):
    code = "index-out-of-range"


class DegenerateTriangleError(FFDError):
    code = "degenerate-triangle"


class ConnectivityMismatchError(FFDError):
    code = "connectivity-mismatch"


class SequenceError(FFDError):
    code = "sequence-error"


class DomainError(FFDError):
    code = "out-of-domain"


class ShapeMismatchError(FFDError):
    code = "shape-mismatch"


class StructureMismatchError(FFDError):
    code = "structure-mismatch"


class WatertightError(FFDError):
    code = "not-watertight"


class DegenerateGeometryError(FFDError):
    code = "degenerate-geometry"


class DivergenceError(FFDError):
    code = "divergence"


class ConfigError(FFDError):
    code = "config-error"
