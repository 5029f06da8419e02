import numpy as np
import torch


def central_difference(loss_fn, param: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Entry-by-entry central finite differences of ``loss_fn()`` w.r.t. ``param``."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = float(loss_fn())
            flat[i] = orig - eps
            minus = float(loss_fn())
            flat[i] = orig
            g[i] = (plus - minus) / (2 * eps)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.detach(), b.detach()
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def random_matrix(rng: np.random.Generator, d: int, k: int) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal((d, k)))
