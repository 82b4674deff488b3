"""Single-channel speech dereverberation with mask-estimating networks
trained adversarially (LSGAN + L1) on simulated reverberant speech."""

__version__ = "0.1.0"

SAMPLE_RATE = 16000
