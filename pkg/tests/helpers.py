"""Shared test utilities: finite-difference gradient checking and tiny specs."""
import numpy as np

import riformer.tensor as T
from riformer import Tape, Tensor
from riformer.models import ModelSpec, StageSpec


def tiny_spec(mixer_kind="affine", **overrides):
    """A 5-block model small enough for per-test training and forwards."""
    stages = [
        StageSpec(depth=1, dim=4, patch_size=7, stride=4),
        StageSpec(depth=1, dim=8, patch_size=3, stride=2),
        StageSpec(depth=2, dim=8, patch_size=3, stride=2),
        StageSpec(depth=1, dim=8, patch_size=3, stride=2),
    ]
    overrides.setdefault("num_classes", 4)
    overrides.setdefault("input_resolution", 32)
    spec = ModelSpec(stages=stages, mixer_kind=mixer_kind, **overrides)
    spec.validate()
    return spec


def check_gradients(make_loss, params, rng, h=1e-3, tol=1e-3, samples=6,
                    wseed=None):
    """Compare analytic gradients against central finite differences.

    Two calling modes:
      * `wseed is None`: `make_loss` returns a scalar loss Tensor directly.
      * `wseed` given: `make_loss` returns an output Tensor; the loss is a
        fixed random-weighted sum of (output - baseline output). Centering on
        the baseline keeps every finite-difference evaluation at h-scale
        magnitude, so float32 rounding of the scalar does not swamp the
        difference quotient.

    Probes the largest-gradient coordinates of each parameter (best
    signal-to-noise) plus a random sample of the rest, and compares the
    probed gradient vectors at relative L2 error `tol`.
    """
    if wseed is not None:
        make_out = make_loss
        center = Tensor(make_out().data.copy())
        w = Tensor(np.random.default_rng(wseed)
                   .normal(0.0, 1.0, center.shape).astype(np.float32))

        def make_loss():
            return T.tsum(T.mul(T.sub(make_out(), center), w))

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = make_loss()
        tape.backward(loss)

    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = min(samples, flat.size)
        top = np.argsort(-np.abs(gflat))[:max(n // 2, 1)]
        rest = np.setdiff1d(np.arange(flat.size), top)
        extra = rng.choice(rest, size=min(n - top.size, rest.size),
                           replace=False) if rest.size else []
        coords = np.concatenate([top, np.asarray(extra, dtype=top.dtype)])
        n = coords.size
        analytic = np.empty(n)
        numeric = np.empty(n)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            lp = make_loss().item()
            flat[i] = orig - h
            lm = make_loss().item()
            flat[i] = orig
            numeric[j] = (lp - lm) / (2.0 * h)
            analytic[j] = gflat[i]
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        assert denom > 0, "all probed gradient entries were exactly zero"
        rel = np.linalg.norm(analytic - numeric) / denom
        assert rel <= tol, (f"gradient mismatch over {n} probed coordinates: "
                            f"relative error {rel:.3g} (analytic {analytic}, "
                            f"numeric {numeric})")
