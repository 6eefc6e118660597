"""Central finite-difference check on randomly chosen scalar parameters."""
import numpy as np
import torch


def check_gradients(model, loss_fn, n_params=25, step=1e-4, rtol=1e-3, seed=0, atol=1e-9):
    """``loss_fn()`` returns a scalar tensor from ``model``'s current parameters.

    Returns the list of (name, index, analytic, numeric, relative error).
    """
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for _, p in params], dtype=np.float64)
    picks = rng.choice(len(params), size=n_params, p=sizes / sizes.sum())
    out = []
    with torch.no_grad():
        for k in picks:
            name, p = params[k]
            i = int(rng.integers(p.numel()))
            flat = p.view(-1)
            ana = 0.0 if p.grad is None else float(p.grad.view(-1)[i])
            orig = float(flat[i])
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
            num = (up - down) / (2 * step)
            err = abs(num - ana)
            rel = 0.0 if err <= atol else err / max(abs(num), abs(ana))
            out.append((name, i, ana, num, rel))
    bad = [r for r in out if r[4] >= rtol]
    return out, bad
