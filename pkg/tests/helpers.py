"""Shared test utilities: finite-difference gradient checking."""

import torch


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def pick_slots(params, count: int, generator: torch.Generator):
    """Sample (param, flat_index) slots across a parameter list."""
    params = [p for p in params if p.requires_grad and p.numel() > 0]
    slots = []
    for _ in range(count):
        pi = int(torch.randint(0, len(params), (1,), generator=generator))
        p = params[pi]
        idx = int(torch.randint(0, p.numel(), (1,), generator=generator))
        slots.append((p, idx))
    return slots


def central_difference(make_loss, param, idx: int, eps: float) -> float:
    flat = param.data.view(-1)
    orig = flat[idx].item()
    try:
        flat[idx] = orig + eps
        f_plus = float(make_loss())
        flat[idx] = orig - eps
        f_minus = float(make_loss())
    finally:
        flat[idx] = orig
    return (f_plus - f_minus) / (2.0 * eps)


def gradient_check(make_loss, params, count=10, eps=1e-5, seed=0, tol=1e-4,
                   min_grad=1e-5):
    """Compare autograd gradients with central differences on random slots.

    ``make_loss`` must be deterministic (seed all of its randomness
    internally) and differentiable at the current parameters. Slots whose
    analytic gradient is below ``min_grad`` are skipped as numerically
    uninformative; at least half the requested slots must be checked.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = make_loss()
    loss.backward()
    gen = torch.Generator().manual_seed(seed)
    slots = pick_slots(params, count, gen)
    checked = 0
    with torch.no_grad():
        for param, idx in slots:
            auto = float(param.grad.view(-1)[idx])
            if abs(auto) < min_grad:
                continue
            fd = central_difference(make_loss, param, idx, eps)
            err = rel_err(fd, auto)
            assert err <= tol, (
                f"gradient mismatch at {tuple(param.shape)}[{idx}]: "
                f"autograd={auto:.10g} fd={fd:.10g} rel_err={err:.3g}"
            )
            checked += 1
    assert checked >= count // 2, f"only {checked} informative slots out of {count}"
    return checked
