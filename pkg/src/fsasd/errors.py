"""Exception hierarchy.

``InvalidInput`` subclasses map to CLI exit code 2; everything else that
derives from ``FsasdError`` is treated as a run failure.
"""


class FsasdError(Exception):
    pass


class InvalidInput(FsasdError):
    pass


class MalformedName(InvalidInput):
    def __init__(self, name, token, reason=""):
        self.name = name
        self.token = token
        msg = f"malformed clip name {name!r}: token {token}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class UnsupportedFormat(InvalidInput):
    pass


class CorruptHeader(InvalidInput):
    pass


class EmptyDataset(InvalidInput):
    pass


class InvalidSpec(InvalidInput):
    pass


class InsufficientData(InvalidInput):
    pass


class ClipTooShort(InvalidInput):
    pass


class ShapeMismatch(InvalidInput):
    pass


class NonFiniteActivation(FsasdError):
    pass


class VersionMismatch(FsasdError):
    pass


class CorruptFile(FsasdError):
    pass


class SingularCovariance(FsasdError):
    pass


class InsufficientFrames(InsufficientData):
    pass


class EmptySet(InvalidInput):
    def __init__(self, which):
        self.which = which
        super().__init__(f"empty score set: {which}")


class PTooSmall(InvalidInput):
    pass


class MissingCell(InvalidInput):
    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"no scores for cell {cell}")


class MissingModel(FsasdError):
    pass


class UnmatchedClip(InvalidInput):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(self.missing[:10])
        more = f" (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ""
        super().__init__(f"{len(self.missing)} scored clips missing from ground truth: {shown}{more}")
