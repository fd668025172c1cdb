"""Dense multi-way tensor helpers.

Tensors are plain ``numpy.ndarray`` objects in C order, so the last mode
varies fastest. Mode indices are zero-based numpy axes: mode 0 of a
convolution weight is the input-channel axis, mode 1 the output-channel
axis, modes 2 and 3 the kernel rows and columns.

None of the functions here mutate their arguments.
"""

import numpy as np

__all__ = [
    "as_tensor",
    "as_weight_tensor",
    "mode_n_product",
    "unfold",
    "fold",
    "frobenius_norm",
    "relative_approx_error",
]


def as_tensor(x, dtype=np.float64):
    """Return ``x`` as a contiguous array of ``dtype``, rejecting non-finite values."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim == 0:
        raise ValueError("tensors need at least one mode")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def as_weight_tensor(x, dtype=np.float64):
    """Validate a convolution weight laid out as (in, out, kernel_h, kernel_w)."""
    arr = as_tensor(x, dtype=dtype)
    if arr.ndim != 4:
        raise ValueError(f"weight tensor must have 4 modes, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"weight tensor extents must be positive, got {arr.shape}")
    return arr


def _check_mode(ndim, n):
    if not 0 <= n < ndim:
        raise ValueError(f"mode {n} is out of range for a {ndim}-mode tensor")


def mode_n_product(tensor, matrix, n):
    """Multiply ``tensor`` along mode ``n`` by ``matrix``.

    ``matrix`` has shape ``(d_n, d'_n)`` where ``d'_n`` is the current
    extent of mode ``n``; the result has extent ``d_n`` on that mode, i.e.
    ``out[..., i, ...] = sum_j matrix[i, j] * tensor[..., j, ...]``.
    """
    tensor = np.asarray(tensor)
    matrix = np.asarray(matrix)
    _check_mode(tensor.ndim, n)
    if matrix.ndim != 2:
        raise ValueError("mode_n_product expects a matrix")
    if matrix.shape[1] != tensor.shape[n]:
        raise ValueError(
            f"dimension mismatch on mode {n}: tensor extent {tensor.shape[n]}, "
            f"matrix has {matrix.shape[1]} columns"
        )
    out = np.tensordot(matrix, tensor, axes=([1], [n]))
    return np.moveaxis(out, 0, n)


def unfold(tensor, n):
    """Mode-``n`` unfolding: a ``d_n x prod(other extents)`` matrix.

    Column index runs over the remaining modes in their original order with
    the last one fastest, so ``unfold(T, n)[i, j]`` is ``T`` at mode-n
    index ``i`` and the C-order multi-index ``j`` over the other modes.
    """
    tensor = np.asarray(tensor)
    _check_mode(tensor.ndim, n)
    return np.moveaxis(tensor, n, 0).reshape(tensor.shape[n], -1)


def fold(matrix, shape, n):
    """Inverse of :func:`unfold` for a tensor of the given ``shape``."""
    shape = tuple(int(s) for s in shape)
    _check_mode(len(shape), n)
    moved = (shape[n],) + shape[:n] + shape[n + 1:]
    matrix = np.asarray(matrix)
    if matrix.size != int(np.prod(shape)):
        raise ValueError(f"cannot fold {matrix.shape} into {shape}")
    return np.ascontiguousarray(np.moveaxis(matrix.reshape(moved), 0, n))


def frobenius_norm(tensor):
    tensor = np.asarray(tensor, dtype=np.float64)
    return float(np.sqrt(np.sum(tensor * tensor)))


def relative_approx_error(x, xhat):
    """``||x - xhat||_F / ||x||_F``.

    Raises ``ValueError`` on a shape mismatch or when ``x`` is all zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xhat.shape}")
    norm = frobenius_norm(x)
    if norm == 0.0:
        raise ValueError("relative error is undefined for an all-zero reference tensor")
    return frobenius_norm(x - xhat) / norm
