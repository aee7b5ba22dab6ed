class InvalidInputError(ValueError):
    pass


class BehindCameraError(InvalidInputError):
    pass


class OutOfRangeError(InvalidInputError):
    pass


class NonWatertightError(InvalidInputError):
    pass


class ObjParseError(InvalidInputError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class IllPosedError(InvalidInputError):
    pass


class ArenaTooSmallError(RuntimeError):
    pass


class ReconstructionFailedError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass
