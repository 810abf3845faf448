"""Risk-sensitive decision-focused learning with conditional generative models.

Subpackages: `autodiff` (tape engine), `flow` (conditional coupling flow),
`risk` (CVaR machinery), `solver` (projections and CVaR-SAA solves),
`problems` (benchmark families and generators), `train` (learning loops),
`evaluate` (regret metric, sweeps, theory suite), `cli`.
"""

__version__ = "0.1.0"
