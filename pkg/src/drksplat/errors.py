"""Exception types raised across the package."""


class DrkError(Exception):
    """Base class for all drksplat errors."""


class NonFinite(DrkError, ValueError):
    pass


class DegenerateQuaternion(DrkError, ValueError):
    pass


class DegenerateBasis(DrkError, ValueError):
    pass


class GrazingView(DrkError, ValueError):
    pass


class GrazingRay(DrkError, ValueError):
    pass


class BehindCamera(DrkError, ValueError):
    pass


class ReplayMismatch(DrkError, RuntimeError):
    pass


class DimensionMismatch(DrkError, ValueError):
    pass


class ParseError(DrkError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class EmptyMesh(DrkError, ValueError):
    pass


class DegenerateFace(DrkError, ValueError):
    pass


class TooManyVertices(DrkError, ValueError):
    pass


class VersionMismatch(DrkError, ValueError):
    pass


class CorruptFile(DrkError, ValueError):
    pass


class MissingImage(DrkError, FileNotFoundError):
    pass


class UnsupportedFormat(DrkError, ValueError):
    pass
