"""Kernel backend selection.

The compiled extension covers the hot forward ops (conv2d, circular
conv, pixel-wise correlation); both backends follow the accumulation
contract in kernels_numpy, so forward results are bit-identical.

Backward passes only promise determinism, not a fixed summation order,
and the numpy implementations reduce through BLAS tensordot at several
times the throughput of the compiled loops (see benchmarks), so they
are used regardless of backend.  Set POLYSNAP_FORCE_NUMPY=1 to skip the
extension entirely, e.g. for parity tests.
"""

from __future__ import annotations

import os

from . import kernels_numpy

if os.environ.get("POLYSNAP_FORCE_NUMPY") == "1":
    _impl = kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = kernels_numpy
        BACKEND = "numpy"

conv2d_fwd = _impl.conv2d_fwd
conv2d_bwd_input = kernels_numpy.conv2d_bwd_input
conv2d_bwd_weight = kernels_numpy.conv2d_bwd_weight
conv2d_bwd_bias = kernels_numpy.conv2d_bwd_bias
circ_conv1d_fwd = _impl.circ_conv1d_fwd
circ_conv1d_bwd_input = kernels_numpy.circ_conv1d_bwd_input
circ_conv1d_bwd_weight = kernels_numpy.circ_conv1d_bwd_weight
circ_conv1d_bwd_bias = kernels_numpy.circ_conv1d_bwd_bias
pixcorr_fwd = _impl.pixcorr_fwd
pixcorr_bwd = kernels_numpy.pixcorr_bwd
