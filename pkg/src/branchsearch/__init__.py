"""Budget-staged search over adversarial-branch architectures, with model
selection driven entirely by label-free metrics."""

from .bohb import SearchSpace, Surrogate, hyperband_brackets, run_search
from .ems import EmsPair, EmsRegressor, SnapshotDataset, fit, fit_pair, select_best
from .losses import AdvMode, Batch, alda_loss, cross_entropy, dann_loss, total_loss
from .metrics import SnapshotMetrics, cluster_scores, diversity, pseudo_label_accuracy, target_entropy
from .network import BranchConfig, Network, TrainSchedule, build_network, grl_rho_at, lr_at
from .synthdata import DomainPair, ShiftSpec, make_pair
from .trainer import TrialRecord, TrialSpec, run_trial

__version__ = "0.1.0"

__all__ = [
    "AdvMode", "Batch", "BranchConfig", "DomainPair", "EmsPair", "EmsRegressor",
    "Network", "SearchSpace", "ShiftSpec", "SnapshotDataset", "SnapshotMetrics",
    "Surrogate", "TrainSchedule", "TrialRecord", "TrialSpec",
    "alda_loss", "build_network", "cluster_scores", "cross_entropy", "dann_loss",
    "diversity", "fit", "fit_pair", "grl_rho_at", "hyperband_brackets", "lr_at",
    "make_pair", "pseudo_label_accuracy", "run_search", "run_trial", "select_best",
    "target_entropy", "total_loss",
]
