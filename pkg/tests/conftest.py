"""Shared fixtures and the central finite-difference gradient oracle."""

import numpy as np
import pytest

from spoofprompt.encoders import ClassPromptSet, EncoderConfig, Vocabulary, init_backbone
from spoofprompt.tensor import Rng, Tensor


def finite_difference(build_scalar, param: Tensor, flat_index: int, step: float = 1e-5) -> float:
    """Central-difference derivative of ``build_scalar()`` wrt one coordinate.

    ``build_scalar`` must rebuild the forward pass from the tensor's current
    ``data`` on every call so in-place perturbation is visible.
    """
    flat = param.data.reshape(-1)
    original = flat[flat_index]
    flat[flat_index] = original + step
    up = float(build_scalar().data)
    flat[flat_index] = original - step
    down = float(build_scalar().data)
    flat[flat_index] = original
    return (up - down) / (2.0 * step)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def assert_gradients_match(build_scalar, params: dict[str, Tensor], rng: np.random.Generator,
                           n_coords: int = 20, step: float = 1e-5, rtol: float = 1e-4):
    """Analytic vs central-difference gradients on sampled coordinates.

    Checks up to ``n_coords`` random coordinates per parameter group at the
    given relative tolerance.
    """
    for p in params.values():
        p.grad = None
    loss = build_scalar()
    loss.backward()
    for name, p in params.items():
        assert p.grad is not None, f"no gradient reached parameter group '{name}'"
        size = p.data.size
        coords = rng.choice(size, size=min(n_coords, size), replace=False)
        for c in coords:
            fd = finite_difference(build_scalar, p, int(c), step)
            an = float(p.grad.reshape(-1)[int(c)])
            err = relative_error(an, fd)
            assert err <= rtol, (
                f"gradient mismatch for {name}[{c}]: analytic={an:.3e} fd={fd:.3e} rel={err:.3e}")


@pytest.fixture(scope="session")
def tiny_config() -> EncoderConfig:
    """Smallest architecture that still exercises every code path."""
    return EncoderConfig(image_size=16, patch_size=8, embed_dim=16, depth=2, heads=2,
                         text_width=16, image_width=16, max_text_len=12)


@pytest.fixture(scope="session")
def vocab() -> Vocabulary:
    return Vocabulary.default()


@pytest.fixture(scope="session")
def tiny_backbone(tiny_config, vocab):
    return init_backbone(tiny_config, Rng(11).child("backbone"), vocab)


@pytest.fixture(scope="session")
def prompt_set() -> ClassPromptSet:
    return ClassPromptSet.default_unified()
