"""Data-driven reachability with quantile-trained surrogates and robust conformal inference."""
from . import conformal, dynamics, reach, refine, surrogate
from .conformal import DivergenceSpec, InfeasibleError, RobustQuantileResult, robust_quantile
from .dynamics import InitialSet, ShiftSpec, SystemModel, TrajectoryDataset, get_model, sample_dataset
from .reach import Box, Flowpipe, Zonotope, contains, inflate, partition, surrogate_flowpipe
from .surrogate import SurrogateNet, TrainConfig, TrainResult, forward, train

__version__ = "0.1.0"
