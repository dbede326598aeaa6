"""Pure numpy cost-curve kernel, used when the compiled one is unavailable."""

import numpy as np

_CELLS = 1 << 22  # betas x samples evaluated per numpy batch


def cost_curve(loads, betas, alpha, gamma, price_vm, price_fn, mult, ceil_cores=False):
    loads = np.ascontiguousarray(loads, dtype=np.float64)
    betas = np.ascontiguousarray(betas, dtype=np.float64)
    out = np.empty(len(betas))
    n = len(loads)
    if n == 0:
        out[:] = 0.0
        return out
    batch = max(1, _CELLS // n)
    for lo in range(0, len(betas), batch):
        b = betas[lo:lo + batch, None]
        cores_vm = b / alpha
        cores_fn = mult * np.maximum(loads[None, :] - b, 0.0) / gamma
        if ceil_cores:
            cores_vm = np.ceil(cores_vm)
            cores_fn = np.ceil(cores_fn)
        out[lo:lo + batch] = (cores_vm * price_vm * n)[:, 0] + (cores_fn * price_fn).sum(axis=1)
    return out
