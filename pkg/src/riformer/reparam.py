"""Fuse the affine branch into its preceding normalization layer.

The training-time first sub-block computes

    Affine(LN(x; gamma, beta); s, t) - LN(x; gamma, beta)

which, because the affine map is per-channel and per-location, equals a single
normalization with modified parameters:

    gamma'_i = gamma_i * (s_i - 1)
    beta'_i  = beta_i  * (s_i - 1) + t_i

`switch_to_deploy` applies this block-wise and drops the affine coefficients;
`verify_equivalence` certifies the transformation numerically on random probes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .models import CaptureSet, ModelWeights, forward
from .tensor import Tensor


@dataclass
class FusedNorm:
    gamma_prime: np.ndarray
    beta_prime: np.ndarray


@dataclass
class EquivalenceReport:
    samples: int
    max_abs_diff: float
    mean_abs_diff: float
    tolerance: float
    passed: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def fuse_affine(gamma, beta, s, t) -> FusedNorm:
    gamma, beta, s, t = (np.asarray(v, dtype=np.float32) for v in (gamma, beta, s, t))
    if not (gamma.shape == beta.shape == s.shape == t.shape) or gamma.ndim != 1:
        raise T.ShapeError("fuse_affine expects equal-length per-channel vectors")
    return FusedNorm(gamma_prime=gamma * (s - 1.0),
                     beta_prime=beta * (s - 1.0) + t)


def switch_to_deploy(model: ModelWeights) -> ModelWeights:
    """Return the deploy-form model; the source model is left untouched."""
    if model.spec.mixer_kind != "affine":
        raise ValueError(f"only affine models can be fused, "
                         f"got {model.spec.mixer_kind!r}")
    if model.deploy:
        raise ValueError("model is already in deploy form")
    out = model.clone()
    out.deploy = True
    for stage_blocks in out.blocks:
        for bw in stage_blocks:
            fused = fuse_affine(bw.norm1_gamma.data, bw.norm1_beta.data,
                                bw.affine_s.data, bw.affine_t.data)
            bw.norm1_gamma = Tensor(fused.gamma_prime, requires_grad=True)
            bw.norm1_beta = Tensor(fused.beta_prime, requires_grad=True)
            bw.affine_s = None
            bw.affine_t = None
    return out


def verify_equivalence(train_model: ModelWeights, deploy_model: ModelWeights,
                       n_probes: int = 100, tol: float = 1e-5,
                       seed: int = 0) -> EquivalenceReport:
    """Compare logits and every block output on random inputs."""
    if train_model.spec.to_dict() != deploy_model.spec.to_dict():
        raise ValueError("models must share a spec")
    if train_model.spec.drop_path_rate != 0.0:
        raise ValueError("equivalence requires drop_path disabled")
    rng = np.random.default_rng(seed)
    res = train_model.spec.input_resolution
    all_layers = frozenset(range(train_model.spec.total_blocks))
    max_diff = 0.0
    sum_diff = 0.0
    count = 0
    for _ in range(n_probes):
        x = Tensor(rng.normal(0.0, 1.0,
                              (1, train_model.spec.in_channels, res, res)
                              ).astype(np.float32))
        cap_a = CaptureSet.for_layers(all_layers)
        cap_b = CaptureSet.for_layers(all_layers)
        la = forward(train_model, x, capture=cap_a)
        lb = forward(deploy_model, x, capture=cap_b)
        diffs = [np.abs(la.data - lb.data)]
        for i in all_layers:
            diffs.append(np.abs(cap_a.block_out[i].data - cap_b.block_out[i].data))
        for d in diffs:
            max_diff = max(max_diff, float(d.max()))
            sum_diff += float(d.sum())
            count += d.size
    mean_diff = sum_diff / count if count else 0.0
    return EquivalenceReport(samples=n_probes, max_abs_diff=max_diff,
                             mean_abs_diff=mean_diff, tolerance=tol,
                             passed=max_diff <= tol)
