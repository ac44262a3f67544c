"""Finite-difference verification of every layer family's backward pass.

Runs at reduced width (16 nodes, 8 channels) so a full sweep over all
parameters stays fast.  Used by the CLI ``grad-check`` command and the
acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, grad_check, mul
from .layers import BatchNormNodes, NonLocalBlock, SemGConv, VanillaGConv
from .skeleton import DEFAULT_NODE_GROUPS, adjacency, build_skeleton, normalize_adjacency
from .training import pose_loss

TOLERANCE = 1e-4
_CHANNELS = 8
_BATCH = 2


@dataclass(frozen=True)
class GradCheckRow:
    name: str
    seed: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _layer_case(layer, x_shape: tuple[int, ...], rng: np.random.Generator,
                train: bool = False):
    x = Tensor(rng.standard_normal(x_shape), requires_grad=True)
    params = [p for _, p in layer.named_parameters()]
    # Nudge learnable logits and the zero output map off their all-zero
    # init so the check exercises a generic point.
    for p in params:
        if not p.data.any():
            p.data = rng.standard_normal(p.data.shape) * 0.1
    # Project with fixed random weights: a plain sum is blind to directions
    # the layer's output cannot move in (batch norm output sums to beta).
    probe = Tensor(rng.standard_normal(x_shape[:-1] + (layer_out_dim(layer),)))

    def f(*_):
        return mul(layer.forward(x, train=train), probe).sum()

    return f, [x] + params


def layer_out_dim(layer) -> int:
    return getattr(layer, "out_dim", getattr(layer, "channels", 0))


def run_grad_checks(seeds=range(5)) -> list[GradCheckRow]:
    g = build_skeleton()
    adj = adjacency(g)
    norm = normalize_adjacency(adj)
    k = g.num_joints
    rows = []
    for seed in seeds:
        rng = np.random.default_rng([seed, 0xC0FFEE])
        cases = {
            "vanilla_gconv": _layer_case(
                VanillaGConv(_CHANNELS, _CHANNELS, norm, rng, activation=True),
                (_BATCH, k, _CHANNELS), rng),
            "semgconv": _layer_case(
                SemGConv(_CHANNELS, _CHANNELS, adj, rng, activation=True),
                (_BATCH, k, _CHANNELS), rng),
            "semgconv_channelwise": _layer_case(
                SemGConv(_CHANNELS, _CHANNELS, adj, rng, channelwise=True,
                         activation=True),
                (_BATCH, k, _CHANNELS), rng),
            "nonlocal": _layer_case(
                NonLocalBlock(_CHANNELS, DEFAULT_NODE_GROUPS, k, rng),
                (_BATCH, k, _CHANNELS), rng),
            "batch_norm": _layer_case(
                BatchNormNodes(_CHANNELS), (_BATCH, k, _CHANNELS), rng,
                train=True),
        }
        for name, (f, inputs) in cases.items():
            rows.append(GradCheckRow(name, seed, grad_check(f, inputs)))

        pred = Tensor(rng.standard_normal((_BATCH, k, 3)), requires_grad=True)
        gt = rng.standard_normal((_BATCH, k, 3))

        def loss_f(*_):
            return pose_loss(pred, gt, g, use_bone=True)

        rows.append(GradCheckRow("pose_loss", seed, grad_check(loss_f, [pred])))
    return rows


def format_table(rows: list[GradCheckRow]) -> str:
    lines = [f"{'operation':24s} {'seed':>4s} {'max rel err':>12s}  result"]
    for row in rows:
        verdict = "PASS" if row.passed else "FAIL"
        lines.append(f"{row.name:24s} {row.seed:4d} {row.max_rel_error:12.3e}  "
                     f"< {TOLERANCE:g}: {verdict}")
    return "\n".join(lines)
