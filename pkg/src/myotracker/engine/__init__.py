import ctypes
import os


def _tune_allocator():
    """Keep large blocks in the malloc arena instead of mmap/munmap cycles.

    The engine allocates big short-lived arrays at a high rate; with
    glibc's default thresholds every one triggers fresh page faults,
    which is especially costly inside sandboxed or virtualized kernels.
    Set MYOTRACKER_NO_MALLOC_TUNING=1 to skip.
    """
    if os.environ.get("MYOTRACKER_NO_MALLOC_TUNING"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        m_trim_threshold, m_mmap_threshold, m_mmap_max = -1, -3, -4
        libc.mallopt(m_mmap_threshold, 2**31 - 1)
        libc.mallopt(m_trim_threshold, 2**31 - 1)
        libc.mallopt(m_mmap_max, 0)
    except OSError:
        pass


_tune_allocator()

from . import ops
from .gradcheck import check_many, check_op, numerical_gradient, relative_error
from .nn import Conv2d, GroupNorm, InstanceNorm, LayerNorm, Linear, Module, uniform_fan_in
from .tensor import Tape, Tensor, no_grad

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "no_grad",
    "Module",
    "Linear",
    "Conv2d",
    "LayerNorm",
    "GroupNorm",
    "InstanceNorm",
    "uniform_fan_in",
    "check_op",
    "check_many",
    "numerical_gradient",
    "relative_error",
]
