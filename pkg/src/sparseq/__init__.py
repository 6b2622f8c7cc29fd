"""Bilevel-optimized sparse querying of augmentation oracles on text-attributed graphs."""
from .bosq import BilevelConfig, RunResult, run_baseline, run_bosq, exhaustive_oracle
from .explainer import Explainer, FileBackend, PersistentCache, RemoteBackend, SyntheticBackend
from .hypergrad import HypergradConfig, hypergradient, neumann_inverse_hvp
from .nnkernel import GnnParams, TrainConfig, gcn_forward, grad_w, hvp, train_inner
from .selector import SelectionState, blend_features, gumbel_topk, ste_backward
from .tagcore import TagGraph, gen_planted_dataset, load_dataset, normalize_adjacency, save_dataset

__version__ = "0.1.0"
