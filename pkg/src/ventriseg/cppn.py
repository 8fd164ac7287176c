"""The location pattern network (CPPN).

Three pointwise layers map the 9 coordinate channels to 8 nonnegative
pattern channels.  The first layer's pre-activation is an exact quadratic
function of the normalized coordinates; layers 2 and 3 compose quadrics
nonlinearly.  Every operation is 1x1 (pointwise), so the module works
unchanged on 2D slices and 3D volumes.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .coords import CppnInput

PATTERN_CHANNELS = 8
INPUT_CHANNELS = 9

# Batch-norm running statistics decay 0.9 (torch's momentum is 1 - decay).
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def quadric_preactivation(cppn_in: CppnInput | np.ndarray, w, b: float) -> np.ndarray:
    """Weighted sum of the 9 channels plus bias: one quadric scalar field.

    ``w`` holds the 9 coefficients in channel order (squares, pairwise
    products, linear terms).
    """
    channels = cppn_in.channels if isinstance(cppn_in, CppnInput) else np.asarray(cppn_in)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (INPUT_CHANNELS,):
        raise ValueError(f"expected 9 weights, got shape {w.shape}")
    return np.tensordot(w, channels.astype(np.float64), axes=(0, 0)) + float(b)


class PatternNet(nn.Module):
    """Pointwise 3-layer network: 9 coordinate channels -> 8 patterns.

    Each layer is a 1x1 linear map over channels, batch norm, then ReLU.
    """

    def __init__(self, hidden=(16, 16), dtype=torch.float32):
        super().__init__()
        widths = (INPUT_CHANNELS,) + tuple(hidden) + (PATTERN_CHANNELS,)
        if len(widths) != 4:
            raise ValueError(f"expected two hidden widths, got {hidden}")
        self.widths = widths
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers.append(
                nn.ModuleDict(
                    {
                        "lin": nn.Conv1d(cin, cout, kernel_size=1, dtype=dtype),
                        "bn": nn.BatchNorm1d(
                            cout, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=dtype
                        ),
                    }
                )
            )
        self.layers = nn.ModuleList(layers)

    def forward(self, channels: torch.Tensor) -> torch.Tensor:
        """channels: (B, 9, *spatial) -> patterns: (B, 8, *spatial)."""
        if channels.shape[1] != INPUT_CHANNELS:
            raise ValueError(f"expected 9 input channels, got {channels.shape[1]}")
        if not self.training and not self.bn_initialized():
            raise RuntimeError(
                "pattern network used in eval mode before any training batch "
                "populated its batch-norm running statistics"
            )
        spatial = channels.shape[2:]
        h = channels.reshape(channels.shape[0], INPUT_CHANNELS, -1)
        for layer in self.layers:
            h = torch.relu(layer["bn"](layer["lin"](h)))
        return h.reshape(h.shape[0], PATTERN_CHANNELS, *spatial)

    def bn_initialized(self) -> bool:
        return all(int(layer["bn"].num_batches_tracked) > 0 for layer in self.layers)

    def mark_bn_initialized(self) -> None:
        """Accept the current running statistics as valid for eval mode."""
        for layer in self.layers:
            layer["bn"].num_batches_tracked.fill_(1)

    @property
    def quadric_weights(self) -> torch.Tensor:
        """First-layer coefficients, shape (neurons, 9)."""
        return self.layers[0]["lin"].weight.detach().reshape(self.widths[1], INPUT_CHANNELS)

    @property
    def quadric_biases(self) -> torch.Tensor:
        return self.layers[0]["lin"].bias.detach()


def cppn_forward(
    params: PatternNet,
    cppn_in: CppnInput | np.ndarray | torch.Tensor,
    mode: str = "eval",
) -> np.ndarray | torch.Tensor:
    """Run the pattern network on a single field of coordinate channels.

    Accepts a :class:`CppnInput`, a (9, *spatial) numpy array, or a torch
    tensor; numpy in, numpy out.  ``mode`` is "train" or "eval"; eval uses
    the accumulated batch-norm running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    is_numpy = not isinstance(cppn_in, torch.Tensor)
    if isinstance(cppn_in, CppnInput):
        arr = cppn_in.channels
    else:
        arr = cppn_in
    if is_numpy:
        dtype = next(params.parameters()).dtype
        t = torch.as_tensor(np.asarray(arr), dtype=dtype)
    else:
        t = arr
    if t.shape[0] != INPUT_CHANNELS:
        raise ValueError(f"expected leading channel axis of 9, got {tuple(t.shape)}")
    params.train(mode == "train")
    with torch.set_grad_enabled(mode == "train"):
        out = params(t.unsqueeze(0)).squeeze(0)
    params.eval()
    if is_numpy:
        return out.detach().cpu().numpy()
    return out
