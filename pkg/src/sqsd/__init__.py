"""Sparse quantize-and-sample speculative decoding between an edge and a cloud."""

from .codec import LatticeDistribution, Scheme, lattice_quantize, total_bits
from .conformal import ThresholdState
from .engine import CloudNode, DraftParams, EdgeNode, run_direct
from .models import SyntheticModelSpec, synthetic_pair, trace_pair
from .simplex import SparseDistribution, TokenDistribution, tv_distance

__all__ = [
    "CloudNode", "DraftParams", "EdgeNode", "LatticeDistribution", "Scheme", "SparseDistribution",
    "SyntheticModelSpec", "ThresholdState", "TokenDistribution", "lattice_quantize", "run_direct",
    "synthetic_pair", "total_bits", "trace_pair", "tv_distance",
]
