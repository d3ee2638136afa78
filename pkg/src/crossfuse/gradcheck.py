"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import FusionModel, ModelConfig
from .tensor import Tape, Tensor
from .training import cross_entropy

TINY_CONFIG = ModelConfig(n_stacks=2, embed_dim=4, patch_size=5, hsi_channels=6, lidar_channels=1, n_classes=3,
                          dropout_rate=0.5, seed=0)


def numerical_grad(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f / d t.data by central differences, perturbing ``t`` in place."""
    flat = t.data.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def relative_error(ad: np.ndarray, fd: np.ndarray) -> float:
    """max |ad - fd| / max(1, |fd|), elementwise."""
    if ad.size == 0:
        return 0.0
    return float(np.max(np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))))


def tape_grads(f: Callable[[], Tensor], inputs: list[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [t.grad.copy() for t in inputs]


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    threshold: float

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.threshold]

    @property
    def passed(self) -> bool:
        return not self.failures

    def format(self) -> str:
        width = max(len(k) for k in self.errors)
        lines = []
        for name, err in self.errors.items():
            status = "ok" if err < self.threshold else "FAIL"
            lines.append(f"{name:<{width}}  {err:.3e}  {status}")
        verdict = "PASS" if self.passed else "FAIL: " + ", ".join(self.failures)
        lines.append(f"threshold {self.threshold:.0e}: {verdict}")
        return "\n".join(lines) + "\n"


def check_model_gradients(config: ModelConfig = TINY_CONFIG, batch: int = 2, seed: int = 0, h: float = 1e-5,
                          threshold: float = 1e-4) -> GradcheckReport:
    """Compare every parameter's tape gradient of the batch cross-entropy with finite differences.

    Dropout runs in training mode with a mask that is redrawn identically for
    every evaluation, so the loss is a deterministic function of the weights.
    """
    model = FusionModel(config)
    rng = np.random.default_rng(seed)
    p = config.patch_size
    hsi = rng.random((batch, p, p, config.hsi_channels))
    lidar = rng.random((batch, p, p, config.lidar_channels))
    labels = rng.integers(0, config.n_classes, size=batch)

    def loss() -> Tensor:
        probs = model.forward(hsi, lidar, training=True, rng=np.random.default_rng(seed + 1))
        return cross_entropy(probs, labels)

    params = model.parameters()
    grads = tape_grads(loss, params)
    errors = {}
    for (name, t), g in zip(model.named_parameters(), grads):
        fd = numerical_grad(lambda: loss().item(), t, h)
        errors[name] = relative_error(g, fd)
    return GradcheckReport(errors, threshold)
