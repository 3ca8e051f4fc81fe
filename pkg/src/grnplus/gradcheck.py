"""Finite-difference verification of the full generator+segmentor gradient path."""

from __future__ import annotations

import torch

from . import diffcore as dc
from . import rng
from .models import Generator, GeneratorConfig, Segmentor, SegmentorConfig, init_parameters
from .objectives import dice_loss, stage2_loss

TOY_SEGMENTOR = SegmentorConfig(encoder_channels=(2, 4))
TOY_GENERATOR = GeneratorConfig(stem_channels=2, n_down=1, n_res_blocks=1)


def toy_problem(seed: int = 0, size: int = 8, batch: int = 2):
    """Float64 toy G and S plus a random image batch and label map.

    Weights are Kaiming-scaled throughout: with the small training init the
    normalized convs become so curved in weight space that a 1e-3 central
    difference is dominated by truncation error.
    """
    G, S = Generator(TOY_GENERATOR), Segmentor(TOY_SEGMENTOR)
    init_parameters(G, rng.torch_generator(seed, "gradcheck", "generator"), std=None)
    init_parameters(S, rng.torch_generator(seed, "gradcheck", "segmentor"), std=None)
    G, S = G.double(), S.double()
    g = rng.torch_generator(seed, "gradcheck", "data")
    x = torch.rand(batch, 1, size, size, generator=g, dtype=torch.float64)
    y = torch.randint(0, TOY_SEGMENTOR.n_classes, (batch, size, size), generator=g)
    return G, S, x, y


def run_gradcheck(seed: int = 0, samples: int = 100, eps: float = 1e-3) -> dc.GradCheckResult:
    """Check d Dice(S(G(x)))/d(theta_G, theta_S) plus the stage-2 loss on the segmentor.

    The stage-2 term uses G(x) as a constant, so it enters through theta_S only;
    summing both keeps one scalar for every coordinate.
    """
    G, S, x, y = toy_problem(seed)
    with torch.no_grad():
        x_hat_const = G(x)

    def loss():
        return dice_loss(S(G(x)), y).value + stage2_loss(S, x, x_hat_const, y).value

    params = {f"G.{n}": p for n, p in G.named_parameters()}
    params.update({f"S.{n}": p for n, p in S.named_parameters()})
    return dc.gradient_check(loss, params, samples, eps, rng.torch_generator(seed, "gradcheck", "coords"))
