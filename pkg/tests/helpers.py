"""Shared oracles for the test suite."""
import numpy as np


def central_difference(f, x, idx, h=1e-6):
    x = x.copy()
    x[idx] += h
    fp = f(x)
    x[idx] -= 2 * h
    fm = f(x)
    return (fp - fm) / (2 * h)


def vector_rel_error(approx, exact):
    approx, exact = np.asarray(approx), np.asarray(exact)
    denom = max(np.linalg.norm(exact), np.linalg.norm(approx), 1e-300)
    return np.linalg.norm(approx - exact) / denom


def direct_linear_conv(kernel, x):
    """Non-cyclic convolution truncated to the input support, summed in the spatial domain.

    ``kernel`` is ``[c_out, c_in, *(2n)]`` with lag ``m`` stored at index
    ``m mod 2n``; ``x`` is ``[B, c_in, *n]``. 1-D and 2-D grids are supported.
    """
    grid = x.shape[2:]
    n = grid[-1]
    lag = (np.arange(n)[:, None] - np.arange(n)[None, :]) % (2 * n)   # [m, j]
    if len(grid) == 1:
        T = kernel[..., lag]                                             # [o, i, m, j]
        return np.einsum("oimj,bij->bom", T, x)
    nx = grid[0]
    y = np.zeros((x.shape[0], kernel.shape[0]) + grid)
    for lx in range(-(nx - 1), nx):
        T = kernel[:, :, lx % (2 * nx)][..., lag]                        # [o, i, m, j]
        lo, hi = max(0, lx), min(nx, nx + lx)
        y[:, :, lo:hi] += np.einsum("oimj,bixj->boxm", T, x[:, :, lo - lx:hi - lx])
    return y


def model_fd_check(model, loss_and_grad, n_params=20, seed=0, h=1e-6):
    """Compare analytic parameter gradients against central differences on random coordinates."""
    rng = np.random.default_rng(seed)
    p0 = model.store.flat().copy()
    model.store.zero_grad()
    loss_and_grad(backward=True)
    g = model.store.flat("grads")
    idx = rng.choice(p0.size, size=min(n_params, p0.size), replace=False)

    def f(p):
        model.store.set_flat(p)
        return loss_and_grad(backward=False)

    fd = np.array([central_difference(f, p0, i, h) for i in idx])
    model.store.set_flat(p0)
    return vector_rel_error(g[idx], fd)
