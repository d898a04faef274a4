"""Online RL with passive memory: regularized LP dual, occupancy estimators, mirror-descent learner
and lower-bound instances."""

from .dual import SolveReport, extract_occupancy, extract_policy, solve_dual
from .mdp import ContinuousMdp, Episode, EpisodeBatch, Policy, TabularMdp, load_mdp, rollout
from .online import OnlineConfig, PassiveMemory, RegretRecord, build_memory, run_online
from .oracle import OccupancyTable, exact_occupancy, exact_value, optimal_policy

__version__ = "0.1.0"
