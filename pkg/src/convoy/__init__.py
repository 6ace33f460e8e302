"""Verifiable, privacy-preserving offloading of convolution layers."""

from .keymask import MaskSet, SecretKey, SecurityParams, blind, keygen, precompute_masks, recover, sample_z
from .net import Client, ConvServer, RunningServer, VerificationFailed, client_infer, serve
from .server import ServerBehavior, adversary_compute, compute
from .tensor import ConvShape, OpCounter, direct_conv, flatten_kernels, im2col, matmul, reshape_output
from .verify import TolerancePolicy, make_verification_tag, verify

__version__ = "0.1.0"
