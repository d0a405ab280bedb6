"""Exception types shared across the toolkit.

ContractError covers violated preconditions and invariants (CLI exit 3);
ResourceMissingError covers missing files / registry entries (CLI exit 4).
"""


class DemspecError(Exception):
    """Base class; carries a machine-readable error code."""

    code = "ERROR"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def to_json(self):
        return {"error": self.code, "message": str(self)}


class ContractError(DemspecError):
    code = "CONTRACT_VIOLATION"


class ResourceMissingError(DemspecError):
    code = "RESOURCE_MISSING"
