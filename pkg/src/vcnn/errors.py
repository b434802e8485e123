class VcnnError(Exception):
    pass


class ShapeError(VcnnError, ValueError):
    pass


class RangeError(VcnnError, ValueError):
    pass


class ArgumentError(VcnnError, ValueError):
    pass


class ContractError(VcnnError, ValueError):
    """Raised when a backward pass is handed a cache or gradient it cannot belong to."""


class NumericError(VcnnError, ArithmeticError):
    pass
