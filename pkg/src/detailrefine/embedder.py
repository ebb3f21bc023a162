"""Frozen random convolutional patch embedder used by the perceptual reward.

Three 3x3 convolutions with fixed seeded weights (ReLU after the first two),
global average pooling and L2 normalisation.  Nothing here is trained; the
same seed gives the same map on every platform because weights are drawn
with numpy's PCG64 generator.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError


class FrozenEmbedder:
    def __init__(self, seed: int = 1234, dim: int = 32, channels: int = 3, widths: tuple[int, int] = (16, 32)):
        rng = np.random.default_rng(seed)
        chans = (channels,) + tuple(widths) + (dim,)
        self.dim = dim
        self.channels = channels
        self._weights = []
        self._biases = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            bound = np.sqrt(6.0 / (cin * 9))
            w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
            b = rng.uniform(-0.1, 0.1, size=cout)
            w.setflags(write=False)
            b.setflags(write=False)
            self._weights.append(w)
            self._biases.append(b)
        # offset keeps the pooled vector away from the origin before normalising
        self._offset = rng.normal(0.0, 0.5, size=dim)
        self._offset.setflags(write=False)
        self._w_t = [torch.from_numpy(w.copy()) for w in self._weights]
        self._b_t = [torch.from_numpy(b.copy()) for b in self._biases]
        self._offset_t = torch.from_numpy(self._offset.copy())

    def features(self, patches: torch.Tensor) -> torch.Tensor:
        """``(N, h, w, C)`` patches of one size -> ``(N, dim)`` unit vectors."""
        if patches.dim() == 3:
            patches = patches.unsqueeze(0)
        if patches.shape[-1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {patches.shape[-1]}")
        x = patches.permute(0, 3, 1, 2).to(torch.float64) - 0.5
        n_layers = len(self._w_t)
        for i, (w, b) in enumerate(zip(self._w_t, self._b_t)):
            x = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), w, b)
            if i < n_layers - 1:
                x = F.relu(x)
        v = x.mean(dim=(2, 3)) + self._offset_t
        return v / v.norm(dim=1, keepdim=True)

    def __call__(self, patch) -> np.ndarray:
        t = torch.as_tensor(np.asarray(patch), dtype=torch.float64)
        with torch.no_grad():
            return self.features(t)[0].numpy()

    def distance(self, a, b) -> float:
        return float(np.linalg.norm(self(a) - self(b)))
