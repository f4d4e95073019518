from django.core.exceptions import ImproperlyConfigured


class GeometryError(ImproperlyConfigured):
    """
    A box or start point violates the geometric hypotheses of an experiment.
    """


class NumericalError(ArithmeticError):
    """
    Base class for numerical failures. Maps to CLI exit status 3.
    """


class ToleranceNotReached(NumericalError):
    """
    A quadrature or series could not meet its tolerance.

    Attributes:
        achieved (float): The best error estimate that was reached.
    """

    def __init__(self, msg: str, achieved: float):
        super().__init__(f"{msg} (achieved error {achieved:.3e})")
        self.achieved = achieved


class InsufficientPadding(NumericalError):
    """
    Periodic convolution would wrap more kernel mass than allowed.

    Attributes:
        escaped_mass (float): Bound on the wrapped kernel mass.
    """

    def __init__(self, msg: str, escaped_mass: float):
        super().__init__(f"{msg} (escaped kernel mass {escaped_mass:.3e})")
        self.escaped_mass = escaped_mass


class WindowTruncationError(NumericalError):
    def __init__(self, msg: str, edge_contribution: float):
        super().__init__(f"{msg} (edge contribution {edge_contribution:.3e})")
        self.edge_contribution = edge_contribution


class TailBoundExceeded(NumericalError):
    def __init__(self, msg: str, tail_bound: float):
        super().__init__(f"{msg} (tail bound {tail_bound:.3e})")
        self.tail_bound = tail_bound


class PositivityViolation(NumericalError):
    pass
