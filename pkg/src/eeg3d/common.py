from __future__ import annotations

import torch


class NumericalAbort(RuntimeError):
    """A loss or gradient became non-finite; carries a diagnostic dict."""

    def __init__(self, message: str, **diagnostics):
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)
        self.diagnostics = diagnostics


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def set_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def check_finite(value: torch.Tensor, what: str, **diagnostics) -> None:
    if not torch.isfinite(value).all():
        raise NumericalAbort(f"non-finite {what}", **diagnostics)


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
        p.grad = None
    return module
