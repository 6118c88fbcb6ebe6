"""Process-level numeric runtime setup, applied once on package import.

* Large allocations are kept on the heap free-list (mallopt) instead of
  being returned to the OS, so the per-iteration activation buffers do not
  pay page-fault costs every forward pass.
* BLAS pools are capped at one thread: the matrices here are small enough
  that spin-waiting workers cost more than they contribute, and
  single-threaded reductions keep results bit-identical across machines
  with different core counts.  Compiled kernels in _kernels partition work
  per output element, so their thread count never affects results.
"""

import ctypes


def _tune_malloc():
    try:
        libc = ctypes.CDLL(None)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def _pin_blas():
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1, user_api="blas")
    except Exception:
        pass


_tune_malloc()
_pin_blas()
