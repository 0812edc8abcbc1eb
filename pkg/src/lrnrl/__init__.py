"""Set-encoder actor-critic agents for goal-conditioned planar cube transport."""

__version__ = "0.1.0"
