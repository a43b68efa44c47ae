"""Conditional transport-plan parameterizations.

Two model kinds cover the plan factorizations used by the objectives:

* :class:`ImplicitGenerator` - a noise-fed MLP producing samples. One
  instance maps (x, noise) to y and plays the conditional-marginal factor;
  a second maps (y, x, noise) to y' and plays the transport factor.
* :class:`ExplicitConditional` - an MLP with a softmax output row per input,
  giving probabilities over a finite label set.

MLP inputs may arrive in several parts (conditioning value, upstream sample,
noise). The first layer keeps one weight block per part, which is
arithmetically identical to concatenating the parts but lets gradients flow
into an upstream generated sample without a gather/concat primitive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .synthdata import RngStream

__all__ = [
    "MlpConfig",
    "Mlp",
    "ImplicitGenerator",
    "ExplicitConditional",
    "compose_explicit_marginal",
    "save_checkpoint",
    "load_checkpoint",
]

_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


@dataclass(frozen=True)
class MlpConfig:
    """Feed-forward net: part_dims are summed into the input width.

    widths lists hidden... -> output, so a "2-layer MLP" with hidden width h
    and scalar output is widths=(h, h, 1).
    """

    part_dims: tuple
    widths: tuple
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("need at least one hidden layer")
        if any(w <= 0 for w in self.widths) or any(d <= 0 for d in self.part_dims):
            raise ValueError("all widths and part dims must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")

    @property
    def in_dim(self) -> int:
        return sum(self.part_dims)

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


def _glorot(stream: RngStream, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return bound * (2.0 * stream.uniforms(shape) - 1.0)


class Mlp:
    """MLP parameters plus the forward pass on the autodiff graph.

    Weights are Glorot-uniform in [-sqrt(6/(fan_in+fan_out)), +...], biases
    zero; both reproducible from the config seed. The first layer's weight is
    stored split by input part (same init law, fan_in = total input width).
    """

    def __init__(self, config: MlpConfig):
        self.config = config
        stream = RngStream(config.seed).child(7)
        h0 = config.widths[0]
        self.first_weights = [
            ad.param(_glorot(stream, config.in_dim, h0, (d, h0)))
            for d in config.part_dims
        ]
        self.first_bias = ad.param(np.zeros(h0))
        self.layers = []
        for fan_in, fan_out in zip(config.widths[:-1], config.widths[1:]):
            W = ad.param(_glorot(stream, fan_in, fan_out, (fan_in, fan_out)))
            b = ad.param(np.zeros(fan_out))
            self.layers.append((W, b))
        self._act = _ACTIVATIONS[config.activation]

    def parameters(self) -> list:
        params = list(self.first_weights) + [self.first_bias]
        for W, b in self.layers:
            params.extend((W, b))
        return params

    def forward(self, parts) -> ad.Node:
        """parts: one (m, d_part) array/Node per input part, same row count."""
        if len(parts) != len(self.first_weights):
            raise ValueError(
                f"expected {len(self.first_weights)} input parts, got {len(parts)}"
            )
        h = ad.matmul(parts[0], self.first_weights[0])
        for part, W in zip(parts[1:], self.first_weights[1:]):
            h = ad.add(h, ad.matmul(part, W))
        h = self._act(ad.add_rowvec(h, self.first_bias))
        for i, (W, b) in enumerate(self.layers):
            h = ad.add_rowvec(ad.matmul(h, W), b)
            if i < len(self.layers) - 1:
                h = self._act(h)
        return h


class ImplicitGenerator:
    """Noise-fed sampler: forward(cond_parts + [noise]) is one sample per row.

    Deterministic given (parameters, conditioning, noise); differentiable with
    respect to parameters and any conditioning part that is itself a graph
    node (e.g. samples produced by an upstream generator).
    """

    def __init__(self, cond_dims, noise_dim: int, out_dim: int,
                 hidden=(64, 64), activation: str = "tanh", seed: int = 0):
        self.noise_dim = int(noise_dim)
        self.cond_dims = tuple(int(d) for d in cond_dims)
        cfg = MlpConfig(
            part_dims=self.cond_dims + (self.noise_dim,),
            widths=tuple(hidden) + (int(out_dim),),
            activation=activation,
            seed=seed,
        )
        self.mlp = Mlp(cfg)

    @property
    def out_dim(self) -> int:
        return self.mlp.config.out_dim

    def parameters(self) -> list:
        return self.mlp.parameters()

    def sample(self, cond_parts, noise) -> ad.Node:
        """cond_parts: list of (m, d_i) conditioning blocks; noise: (m, noise_dim)."""
        noise = ad.as_node(noise)
        if noise.value.ndim != 2 or noise.value.shape[1] != self.noise_dim:
            raise ValueError(
                f"noise must be (m, {self.noise_dim}), got {noise.value.shape}"
            )
        return self.mlp.forward(list(cond_parts) + [noise])


class ExplicitConditional:
    """Softmax conditional over a finite label set: forward(x) -> simplex rows."""

    def __init__(self, cond_dims, n_labels: int, hidden=(64, 64),
                 activation: str = "tanh", seed: int = 0):
        self.n_labels = int(n_labels)
        cfg = MlpConfig(
            part_dims=tuple(int(d) for d in cond_dims),
            widths=tuple(hidden) + (self.n_labels,),
            activation=activation,
            seed=seed,
        )
        self.mlp = Mlp(cfg)

    def parameters(self) -> list:
        return self.mlp.parameters()

    def forward(self, parts) -> ad.Node:
        return ad.softmax_rows(self.mlp.forward(parts))


def compose_explicit_marginal(transition_probs: ad.Node, mix_probs: ad.Node) -> ad.Node:
    """Mix transition rows by mix weights: rows of both are simplex vectors.

    transition_probs: (m*n, n), n consecutive rows per observation, row j of
    block i being the conditional given label j at x_i. mix_probs: (m, n).
    Returns the (m, n) marginal sum_j mix[i, j] * transition[i*n + j, :],
    itself a simplex row per observation (a convex combination).
    """
    m, n = mix_probs.value.shape
    if transition_probs.value.shape != (m * n, n):
        raise ValueError(
            f"transition rows {transition_probs.value.shape} do not match mix {mix_probs.value.shape}"
        )
    mix_flat = ad.reshape(mix_probs, (m * n, 1))
    weighted = ad.mul(transition_probs, ad.matmul(mix_flat, ad.constant(np.ones((1, n)))))
    # Sum each block of n consecutive rows with a constant selector matrix.
    sel = np.kron(np.eye(m), np.ones((1, n)))
    return ad.matmul(ad.constant(sel), weighted)


# ------------------------------------------------------------- checkpointing
#
# Checkpoint layout (JSON, "cot-checkpoint-v1"):
#   {"format": "cot-checkpoint-v1",
#    "kind": "implicit" | "explicit",
#    "config": {...constructor arguments...},
#    "tensors": [{"name": str, "shape": [...], "data": [flat float64 list]}]}


def _tensor_entries(model):
    names = [f"W0_part{i}" for i in range(len(model.mlp.first_weights))] + ["b0"]
    nodes = list(model.mlp.first_weights) + [model.mlp.first_bias]
    for li, (W, b) in enumerate(model.mlp.layers, start=1):
        names += [f"W{li}", f"b{li}"]
        nodes += [W, b]
    return names, nodes


def save_checkpoint(path, model) -> None:
    if isinstance(model, ImplicitGenerator):
        kind = "implicit"
        config = {
            "cond_dims": list(model.cond_dims),
            "noise_dim": model.noise_dim,
            "out_dim": model.out_dim,
            "hidden": list(model.mlp.config.widths[:-1]),
            "activation": model.mlp.config.activation,
            "seed": model.mlp.config.seed,
        }
    elif isinstance(model, ExplicitConditional):
        kind = "explicit"
        config = {
            "cond_dims": list(model.mlp.config.part_dims),
            "n_labels": model.n_labels,
            "hidden": list(model.mlp.config.widths[:-1]),
            "activation": model.mlp.config.activation,
            "seed": model.mlp.config.seed,
        }
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    names, nodes = _tensor_entries(model)
    payload = {
        "format": "cot-checkpoint-v1",
        "kind": kind,
        "config": config,
        "tensors": [
            {"name": name, "shape": list(node.value.shape),
             "data": node.value.reshape(-1).tolist()}
            for name, node in zip(names, nodes)
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "cot-checkpoint-v1":
        raise ValueError(f"unrecognized checkpoint format in {path}")
    cfg = payload["config"]
    if payload["kind"] == "implicit":
        model = ImplicitGenerator(
            cond_dims=cfg["cond_dims"], noise_dim=cfg["noise_dim"],
            out_dim=cfg["out_dim"], hidden=tuple(cfg["hidden"]),
            activation=cfg["activation"], seed=cfg["seed"],
        )
    else:
        model = ExplicitConditional(
            cond_dims=cfg["cond_dims"], n_labels=cfg["n_labels"],
            hidden=tuple(cfg["hidden"]), activation=cfg["activation"],
            seed=cfg["seed"],
        )
    _, nodes = _tensor_entries(model)
    for entry, node in zip(payload["tensors"], nodes):
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != node.value.shape:
            raise ValueError(f"tensor {entry['name']} shape mismatch in {path}")
        node.value = arr
    return model
