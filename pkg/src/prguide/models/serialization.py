"""Versioned binary container for noise predictors.

Layout (little-endian)::

    b"PRGM" | version u32 | kind u32 | payload

kind 1, Gaussian mixture::

    C, W, H, K : u32
    K x (label i32, subject i32, weight f64, variance f64, mean C*W*H f64)

kind 2, MLP::

    C, W, H, n_labels, n_subjects, time_dim, label_dim, activation, prediction, n_hidden : u32
    n_hidden x u32 hidden sizes
    n_weights : u64, then n_weights f64 in parameter order

Means and weight blobs use the location-major grid layout.
"""
import struct
from pathlib import Path

import numpy as np
import torch

from prguide.exceptions import FormatError
from prguide.grid import LatentGrid
from prguide.models.gmm import GaussianMixtureModel
from prguide.models.mlp import ACTIVATIONS, PREDICTIONS, MlpDenoiser

MAGIC = b"PRGM"
VERSION = 1
KIND_GMM = 1
KIND_MLP = 2
_ACT_CODES = {name: i for i, name in enumerate(sorted(ACTIVATIONS))}
_PRED_CODES = {name: i for i, name in enumerate(PREDICTIONS)}


def _gmm_payload(model):
    c, w, h = model.grid_shape
    out = [struct.pack("<IIII", c, w, h, model.n_components)]
    for k in range(model.n_components):
        out.append(struct.pack("<iidd", model.labels[k], model.subjects[k], model.weights[k], model.variances[k]))
        out.append(model.means[k].data.astype("<f8").tobytes())
    return b"".join(out)


def _mlp_payload(model):
    c, w, h = model.grid_shape
    hidden = tuple(model.hidden_layer_sizes)
    head = struct.pack(
        "<10I", c, w, h, model.n_labels_, model.n_subjects, model.time_embed_dim,
        model.label_embed_dim, _ACT_CODES[model.activation], _PRED_CODES[model.prediction], len(hidden),
    )
    weights = model.weights()
    return (
        head
        + struct.pack(f"<{len(hidden)}I", *hidden)
        + struct.pack("<Q", weights.size)
        + weights.astype("<f8").tobytes()
    )


def model_to_bytes(model):
    if isinstance(model, GaussianMixtureModel):
        kind, payload = KIND_GMM, _gmm_payload(model)
    elif isinstance(model, MlpDenoiser):
        kind, payload = KIND_MLP, _mlp_payload(model)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return struct.pack("<4sII", MAGIC, VERSION, kind) + payload


class _Reader:
    def __init__(self, buf, pos=0):
        self.buf, self.pos = buf, pos

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("model payload truncated")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def doubles(self, n):
        if self.pos + 8 * n > len(self.buf):
            raise FormatError("model payload truncated")
        arr = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += 8 * n
        return arr


def _read_gmm(r):
    c, w, h, k = r.take("<IIII")
    labels, subjects, weights, variances, means = [], [], [], [], []
    for _ in range(k):
        lab, sub, wt, var = r.take("<iidd")
        labels.append(lab)
        subjects.append(sub)
        weights.append(wt)
        variances.append(var)
        means.append(LatentGrid.from_flat(r.doubles(c * w * h), c, w, h))
    return GaussianMixtureModel(means, weights, variances, labels, subjects)


def _read_mlp(r):
    c, w, h, n_labels, n_subjects, tdim, ldim, act, pred, n_hidden = r.take("<10I")
    hidden = r.take(f"<{n_hidden}I")
    (n_weights,) = r.take("<Q")
    flat = r.doubles(n_weights)
    names = {code: name for name, code in _ACT_CODES.items()}
    if act not in names:
        raise FormatError(f"unknown activation code {act}")
    if pred >= len(PREDICTIONS):
        raise FormatError(f"unknown prediction code {pred}")
    model = MlpDenoiser(
        hidden_layer_sizes=tuple(hidden), activation=names[act], prediction=PREDICTIONS[pred], time_embed_dim=tdim,
        label_embed_dim=ldim, n_labels=n_labels, n_subjects=n_subjects,
    )
    model._build((c, w, h), n_labels)
    state = model.network_.state_dict()
    expected = sum(v.numel() for v in state.values())
    if expected != n_weights:
        raise FormatError(f"weight blob has {n_weights} values, architecture needs {expected}")
    pos = 0
    for key, v in state.items():
        n = v.numel()
        state[key] = torch.as_tensor(flat[pos:pos + n].reshape(v.shape))
        pos += n
    model.network_.load_state_dict(state)
    return model


def model_from_bytes(buf):
    r = _Reader(bytes(buf))
    magic, version, kind = r.take("<4sII")
    if magic != MAGIC:
        raise FormatError(f"bad model magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported model version {version}")
    if kind == KIND_GMM:
        model = _read_gmm(r)
    elif kind == KIND_MLP:
        model = _read_mlp(r)
    else:
        raise FormatError(f"unknown model kind {kind}")
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after model payload")
    return model


def save_model(model, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
