"""Volume head: optional 3x3x3 convolution followed by a per-voxel affine map.

Output channel layout (``C`` semantic classes):

    [0, C)        semantic logits
    C             FREE logit
    C + 1         raw density (softplus applied)
    C + 2 .. C+4  raw normal (normalized per voxel)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DomainError
from ..voxel import FeatureVolume, ScalarField, VectorField

NORMAL_EPS = 1e-8
_OFFSETS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class HeadParams:
    weight: np.ndarray
    bias: np.ndarray
    conv: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        d = {"weight": self.weight, "bias": self.bias}
        if self.conv is not None:
            d["conv"] = self.conv
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadParams":
        return cls(d["weight"], d["bias"], d.get("conv"))


def n_outputs(num_classes: int) -> int:
    return num_classes + 1 + 1 + 3


def init_head(channels: int, num_classes: int, rng: np.random.Generator, use_conv: bool = False,
              scale: float = 0.1, density_bias: float = -4.0) -> HeadParams:
    k = n_outputs(num_classes)
    bias = np.zeros(k)
    bias[num_classes + 1] = density_bias
    conv = None
    if use_conv:
        conv = np.zeros((3, 3, 3, channels, channels))
        conv[1, 1, 1] = np.eye(channels)
        conv += rng.normal(scale=scale / 27, size=conv.shape)
    return HeadParams(rng.normal(scale=scale, size=(channels, k)), bias, conv)


def conv3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3x3 convolution (cross-correlation) over an (H, W, Z, Cin) volume."""
    h, w, z, _ = x.shape
    pad = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((h, w, z, kernel.shape[4]))
    for a, b, c in _OFFSETS:
        out += pad[a : a + h, b : b + w, c : c + z] @ kernel[a, b, c]
    return out


def conv3_backward(x: np.ndarray, kernel: np.ndarray, g: np.ndarray):
    """Gradients of ``sum(g * conv3(x, kernel))`` with respect to ``x`` and ``kernel``."""
    h, w, z, cin = x.shape
    pad = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    gk = np.zeros_like(kernel)
    gpad = np.zeros_like(pad)
    gf = g.reshape(-1, g.shape[-1])
    for a, b, c in _OFFSETS:
        win = pad[a : a + h, b : b + w, c : c + z].reshape(-1, cin)
        gk[a, b, c] = win.T @ gf
        gpad[a : a + h, b : b + w, c : c + z] += g @ kernel[a, b, c].T
    return gpad[1:-1, 1:-1, 1:-1], gk


@dataclass
class HeadOutput:
    density: ScalarField
    sem: VectorField
    normals: VectorField
    cache: dict


def head_forward(volume: FeatureVolume, params: HeadParams, num_classes: int) -> HeadOutput:
    x = volume.values
    cin = x.shape[3]
    k = n_outputs(num_classes)
    if params.weight.shape != (cin, k) or params.bias.shape != (k,):
        raise DomainError(f"head expects weight ({cin}, {k}) and bias ({k},), got {params.weight.shape}, {params.bias.shape}")
    if params.conv is not None and params.conv.shape != (3, 3, 3, cin, cin):
        raise DomainError(f"conv kernel must be (3, 3, 3, {cin}, {cin})")
    hid = conv3(x, params.conv) if params.conv is not None else x
    out = hid @ params.weight + params.bias
    c = num_classes
    raw_d = out[..., c + 1]
    raw_n = out[..., c + 2 : c + 5]
    norm = np.linalg.norm(raw_n, axis=-1, keepdims=True)
    ok = norm > NORMAL_EPS
    normals = np.where(ok, raw_n / np.where(ok, norm, 1.0), 0.0)
    spec = volume.spec
    cache = {"x": x, "hid": hid, "raw_d": raw_d, "raw_n": raw_n, "params": params, "num_classes": c}
    return HeadOutput(
        ScalarField(spec, softplus(raw_d)),
        VectorField(spec, out[..., : c + 1]),
        VectorField(spec, normals),
        cache,
    )


def head_backward(cache: dict, g_density=None, g_sem=None, g_normals=None):
    """Gradients with respect to the head parameters and the input volume.

    Returns ``(param_grads: dict, grad_volume)``.
    """
    p: HeadParams = cache["params"]
    c = cache["num_classes"]
    hid = cache["hid"]
    g_out = np.zeros(hid.shape[:3] + (n_outputs(c),))
    if g_sem is not None:
        g_out[..., : c + 1] = g_sem
    if g_density is not None:
        g_out[..., c + 1] = g_density * sigmoid(cache["raw_d"])
    if g_normals is not None:
        raw = cache["raw_n"]
        norm = np.linalg.norm(raw, axis=-1, keepdims=True)
        ok = norm > NORMAL_EPS
        safe = np.where(ok, norm, 1.0)
        n = raw / safe
        gn = (g_normals - n * np.sum(n * g_normals, axis=-1, keepdims=True)) / safe
        g_out[..., c + 2 : c + 5] = np.where(ok, gn, 0.0)
    flat_g = g_out.reshape(-1, g_out.shape[-1])
    grads = {
        "weight": hid.reshape(-1, hid.shape[-1]).T @ flat_g,
        "bias": flat_g.sum(axis=0),
    }
    g_hid = g_out @ p.weight.T
    if p.conv is not None:
        g_x, g_k = conv3_backward(cache["x"], p.conv, g_hid)
        grads["conv"] = g_k
    else:
        g_x = g_hid
    return grads, g_x
