"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its shape/value contract."""


class FormatError(ValueError):
    """A binary file is malformed; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ValidationError(ValueError):
    """Well-formed input whose contents disagree (manifest vs tensors, config schema)."""
