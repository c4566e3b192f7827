"""Non-recurrent baselines: per-window linear SVR and a supervised GMM-HMM."""

from .hmm import HmmModel, decode_to_valence, discretize, fit_hmm, grid_search_hmm, predict_hmm, viterbi
from .smoothing import moving_average
from .svr import SvrModel, grid_search_svr, predict_svr, train_svr

__all__ = [
    "HmmModel",
    "SvrModel",
    "decode_to_valence",
    "discretize",
    "fit_hmm",
    "grid_search_hmm",
    "grid_search_svr",
    "moving_average",
    "predict_hmm",
    "predict_svr",
    "train_svr",
    "viterbi",
]
