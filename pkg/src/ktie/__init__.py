"""Forward solvers, linearization, Carleman functionals and coefficient
recovery for time-dependent semilinear transport equations on disks."""

__version__ = "0.1.0"
