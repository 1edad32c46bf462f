"""Traffic signal control with unobserved intersections.

A point-queue grid simulator, DQN / MaxPressure / fixed-time controllers,
neighbour-average state imputation and a learned reward model.
"""

__version__ = "0.1.0"
