"""Central finite differences, used as an independent check on autograd."""

import torch


def numeric_grad(fn, tensor: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn().item()
        flat[i] = old - h
        down = fn().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    # the floor keeps tensors whose true gradient is zero (biases feeding a
    # batch norm) from turning rounding noise into a relative error of 1
    scale = max(analytic.norm().item(), numeric.norm().item(), floor)
    return (analytic - numeric).norm().item() / scale


def max_relative_error(fn, tensors) -> dict:
    """Compare autograd against finite differences for every tensor in ``tensors``.

    ``fn`` must be a zero-argument closure returning a scalar and reading the
    tensors in place.
    """
    for t in tensors.values():
        t.grad = None
    fn().backward()
    errors = {}
    for name, t in tensors.items():
        analytic = t.grad.detach().clone()
        with torch.no_grad():
            numeric = numeric_grad(fn, t)
        errors[name] = relative_error(analytic, numeric)
    return errors
