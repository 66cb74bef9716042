"""Entanglement certification for coherent-state alphabets sent over fading channels."""

__version__ = "0.1.0"

from .alphabet import Alphabet, SourceModel, build_alphabet, calibrated, four_state, source_model, two_state
from .certify import (
    CertificationProblem,
    CertificationResult,
    StateMoments,
    certify_all,
    certify_bin,
    compare_alphabets,
    log_negativity,
    theoretical_curve,
)
from .channel import BeamGeometry, ChannelParams, TransmissionHistogram, empirical_histogram, propagate
from .fock import coherent_state, negativity_exact, q_function
from .rates import RateReport, aggregate
from .sdp import SdpProblem, SdpSolution, solve
