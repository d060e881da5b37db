"""Age-minimal CPU scheduling under an average power budget.

Solver for the waiting-time + per-batch-speed control problem, plus structure
verification, a discrete-event simulator and closed-form baseline policies.
"""

__version__ = "0.1.0"
