"""Neural material field: an MLP from surface points to material parameters.

Four hidden ReLU layers of 64 units on a 6-octave positional encoding of the
3D hit point. Raw outputs are squashed into the physical parameter ranges:

    eps_r = 1 + 199 * sigmoid(o1)
    sigma = exp(ln 1e-3 + (ln 1e6 - ln 1e-3) * sigmoid(o2))
    s     = sigmoid(o3)
    xpd   = sigmoid(o4)

The lobe exponent alpha_r is a per-run scalar, not a field output. With the
39-dim encoding this network has 15300 learnable parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

_LN_SIGMA_LO = np.log(1e-3)
_LN_SIGMA_HI = np.log(1e6)

DEFAULT_OCTAVES = 6
DEFAULT_HIDDEN = (64, 64, 64, 64)
N_OUTPUTS = 4


def positional_encoding(points, octaves: int = DEFAULT_OCTAVES):
    """[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(...)].

    Output length per point is 3 + 3 * 2 * octaves (39 at six octaves).
    """
    if octaves < 0:
        raise ValueError("octaves must be >= 0")
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.all(np.isfinite(p)):
        raise ValueError("points must be finite")
    parts = [p]
    for level in range(octaves):
        w = (2.0 ** level) * np.pi * p
        parts.append(np.sin(w))
        parts.append(np.cos(w))
    return np.concatenate(parts, axis=1)


def encoding_dim(octaves: int = DEFAULT_OCTAVES) -> int:
    return 3 + 3 * 2 * octaves


@dataclass
class MaterialField:
    """MLP weights plus the fixed lobe exponent and encoding setup."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    octaves: int = DEFAULT_OCTAVES
    alpha_r: float = 100.0

    @classmethod
    def init_random(cls, seed: int = 0, octaves: int = DEFAULT_OCTAVES,
                    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
                    alpha_r: float = 100.0) -> "MaterialField":
        rng = np.random.default_rng(seed)
        dims = [encoding_dim(octaves), *hidden, N_OUTPUTS]
        ws, bs = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / d_in)
            ws.append(rng.normal(0.0, scale, size=(d_in, d_out)))
            bs.append(np.zeros(d_out))
        return cls(ws, bs, octaves=octaves, alpha_r=alpha_r)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    # -- parameter vector <-> layer arrays -----------------------------------

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def unflatten(self, vec) -> list:
        """Split a flat parameter vector (ndarray or Var) into layer arrays.

        Var input yields Var slices so gradients flow back to the vector.
        """
        out = []
        pos = 0
        for w, b in zip(self.weights, self.biases):
            for template in (w, b):
                n = template.size
                chunk = vec[pos:pos + n]
                if isinstance(chunk, ad.Var):
                    if template.ndim > 1:
                        chunk = _reshape(chunk, template.shape)
                else:
                    chunk = np.asarray(chunk).reshape(template.shape)
                out.append(chunk)
                pos += n
        if pos != len(ad.value_of(vec)):
            raise ValueError("parameter vector length mismatch")
        return out

    def set_flat(self, vec: np.ndarray) -> None:
        arrs = self.unflatten(np.asarray(vec, dtype=np.float64))
        self.weights = arrs[0::2]
        self.biases = arrs[1::2]

    # -- evaluation -----------------------------------------------------------

    def raw_outputs(self, points, params=None):
        """Forward pass; ``params`` optionally supplies a flat (Var) vector."""
        x = positional_encoding(points, self.octaves)
        if params is None:
            layers = [a for pair in zip(self.weights, self.biases) for a in pair]
        else:
            layers = self.unflatten(params)
        h = x
        n_layers = len(layers) // 2
        for li in range(n_layers):
            w, b = layers[2 * li], layers[2 * li + 1]
            h = ad.matmul(h, w) + b
            if li < n_layers - 1:
                h = ad.relu(h)
        return h

    def evaluate(self, points, params=None) -> dict:
        """Material parameters at points; dict of arrays (or Vars) per name."""
        raw = self.raw_outputs(points, params)
        o1, o2, o3, o4 = (raw[:, k] for k in range(4))
        eps_r = 1.0 + 199.0 * ad.sigmoid(o1)
        sigma = ad.exp(_LN_SIGMA_LO + (_LN_SIGMA_HI - _LN_SIGMA_LO) * ad.sigmoid(o2))
        return {"eps_r": eps_r, "sigma": sigma, "s": ad.sigmoid(o3),
                "xpd": ad.sigmoid(o4), "alpha_r": self.alpha_r}

    # -- checkpoint io ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Single-file checkpoint: length-prefixed JSON header + raw float64."""
        header = json.dumps({
            "layer_dims": self.layer_dims,
            "octaves": self.octaves,
            "alpha_r": self.alpha_r,
            "transforms": {"eps_r": "1+199*sigmoid", "sigma": "logspace_sigmoid(1e-3,1e6)",
                           "s": "sigmoid", "xpd": "sigmoid"},
        }).encode()
        blob = self.flatten().astype("<f8").tobytes()
        with Path(path).open("wb") as fh:
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(blob)

    @classmethod
    def load(cls, path: str | Path) -> "MaterialField":
        with Path(path).open("rb") as fh:
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode())
            vec = np.frombuffer(fh.read(), dtype="<f8")
        dims = header["layer_dims"]
        obj = cls.init_random(octaves=header["octaves"], hidden=tuple(dims[1:-1]),
                              alpha_r=header["alpha_r"])
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"{path}: non-finite weights")
        obj.set_flat(vec)
        return obj


def _reshape(v: ad.Var, shape) -> ad.Var:
    val = v.value.reshape(shape)
    orig = v.value.shape
    return v.tape._record(val, (v.id,), lambda adj: (adj.reshape(orig),))
