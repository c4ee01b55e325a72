"""Exception types shared across the package."""


class NonMonotoneMapError(ValueError):
    """A transport map decreases somewhere; ``node`` is the first bad index."""

    def __init__(self, message: str = "not cyclically monotone", node: int | None = None):
        if node is not None:
            message = f"{message} (first violation at node {node})"
        super().__init__(message)
        self.node = node


class DomainError(ValueError):
    """A map or potential leaves the region it is defined on."""


class KnotSpanError(DomainError):
    """Potential values fall outside the knot range of a step parameterization."""

    def __init__(self, message: str = "knot span too small", lo: float | None = None,
                 hi: float | None = None):
        if lo is not None and hi is not None:
            message = f"{message}: potential range [{lo:.6g}, {hi:.6g}]"
        super().__init__(message)
        self.range = (lo, hi)


class StepSizeError(RuntimeError):
    """Projected gradient descent kept increasing the loss."""
