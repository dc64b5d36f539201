"""Exception hierarchy shared by all modules."""


class WgqedError(Exception):
    """Base class for library errors."""


class ParameterError(WgqedError, ValueError):
    """An argument lies outside its documented domain."""


class BasisMismatchError(WgqedError, ValueError):
    """Operands were built on different Hilbert spaces."""


class DegenerateStateError(WgqedError, ValueError):
    """A state construction produced the zero vector."""


class NoDarkStateError(WgqedError, ValueError):
    """Requested an M-excitation dark state with 2M > N."""


class NotSymmetricError(WgqedError, ValueError):
    """A state or model is not invariant under the requested site groups."""


class NumericalError(WgqedError, RuntimeError):
    """A numerical routine failed or violated an invariant."""


class StiffnessError(NumericalError):
    """The adaptive integrator could not take a step.

    ``time`` holds the simulation time at which integration stopped.
    """

    def __init__(self, message, time):
        super().__init__(f"{message} (t = {time:.6g})")
        self.time = time


class EigenSolverError(NumericalError):
    """Dense eigendecomposition failed; ``condition`` is the matrix condition number."""

    def __init__(self, message, condition):
        super().__init__(f"{message} (condition number {condition:.3e})")
        self.condition = condition
