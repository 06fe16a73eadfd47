"""Exception types shared across the package.

``NumericalError`` subclasses map to CLI exit code 3, ``ConfigError`` to 2.
"""


class LagromError(Exception):
    pass


class ConfigError(LagromError, ValueError):
    pass


class NumericalError(LagromError):
    pass


class NonConvergence(NumericalError):
    def __init__(self, iterations, final_norm, step=None):
        self.iterations = iterations
        self.final_norm = final_norm
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(
            f"Newton did not converge{where}: {iterations} iterations, "
            f"residual norm {final_norm:.3e}"
        )


class OptimizerStall(NumericalError):
    def __init__(self, grad_norm, message=""):
        self.grad_norm = grad_norm
        super().__init__(f"constrained least squares stalled (gradient norm {grad_norm:.3e}) {message}".strip())


class NonFiniteLoss(NumericalError):
    def __init__(self, epoch, batch):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


class InsufficientCycles(NumericalError):
    pass


class IllConditioned(UserWarning):
    """Warning: regression matrix condition number above threshold."""
