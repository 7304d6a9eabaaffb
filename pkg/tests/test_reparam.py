"""Branch fusion: symbolic identity, end-to-end equivalence, error contracts."""
import numpy as np
import pytest

import riformer.tensor as T
from riformer import (Tensor, build_model, forward, fuse_affine,
                      switch_to_deploy, verify_equivalence)
from riformer.models import affine_mixer
from helpers import tiny_spec


def test_fuse_tabulated_values():
    fused = fuse_affine([2.0], [0.5], [3.0], [0.1])
    assert fused.gamma_prime[0] == pytest.approx(4.0, abs=0)
    assert fused.beta_prime[0] == pytest.approx(1.1, abs=1e-7)


def test_fuse_identity_init_gives_zero_branch():
    fused = fuse_affine([1.0, 1.0], [0.0, 0.0], [1.0, 1.0], [0.0, 0.0])
    np.testing.assert_array_equal(fused.gamma_prime, [0.0, 0.0])
    np.testing.assert_array_equal(fused.beta_prime, [0.0, 0.0])


def test_fuse_s_zero_negates_norm():
    fused = fuse_affine([1.0], [0.0], [0.0], [0.0])
    np.testing.assert_array_equal(fused.gamma_prime, [-1.0])
    np.testing.assert_array_equal(fused.beta_prime, [0.0])


def test_fuse_shape_mismatch_rejected():
    with pytest.raises(T.ShapeError):
        fuse_affine([1.0, 2.0], [0.0], [1.0], [0.0])


@pytest.mark.parametrize("seed", range(5))
def test_symbolic_identity_on_random_vectors(seed):
    # Affine(gamma*xhat+beta; s,t) - (gamma*xhat+beta) == gamma'*xhat + beta'
    rng = np.random.default_rng(seed)
    c = 6
    xhat = rng.normal(0, 1, (1, c, 3, 3)).astype(np.float32)
    gamma = rng.normal(1, 0.3, c).astype(np.float32)
    beta = rng.normal(0, 0.3, c).astype(np.float32)
    s = rng.normal(1, 0.5, c).astype(np.float32)
    t = rng.normal(0, 0.5, c).astype(np.float32)

    normed = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    branch = affine_mixer(Tensor(normed), Tensor(s), Tensor(t)).data
    fused = fuse_affine(gamma, beta, s, t)
    expect = (fused.gamma_prime[None, :, None, None] * xhat
              + fused.beta_prime[None, :, None, None])
    np.testing.assert_allclose(branch, expect, atol=1e-5)


def randomized_affine_model(seed):
    model = build_model(tiny_spec("affine"), seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for stage_blocks in model.blocks:
        for bw in stage_blocks:
            c = bw.affine_s.size
            bw.affine_s.data = rng.normal(1, 0.5, c).astype(np.float32)
            bw.affine_t.data = rng.normal(0, 0.5, c).astype(np.float32)
            bw.norm1_gamma.data = rng.normal(1, 0.3, c).astype(np.float32)
            bw.norm1_beta.data = rng.normal(0, 0.3, c).astype(np.float32)
            # O(1) layer scales so the fused branch contributes visibly
            bw.layer_scale_1.data = rng.normal(0.5, 0.2, c).astype(np.float32)
            bw.layer_scale_2.data = rng.normal(0.5, 0.2, c).astype(np.float32)
    return model


def test_end_to_end_equivalence():
    model = randomized_affine_model(0)
    deploy = switch_to_deploy(model)
    report = verify_equivalence(model, deploy, n_probes=20, tol=1e-5, seed=0)
    assert report.passed, f"max diff {report.max_abs_diff}"


def test_fusion_is_parameter_local():
    model = randomized_affine_model(1)
    deploy = switch_to_deploy(model)
    train_params = dict(model.named_parameters())
    for name, p in deploy.named_parameters():
        if "norm_reparam" in name or ".mixer." in name:
            continue
        assert np.array_equal(p.data, train_params[name].data), name


def test_deploy_param_count_drops_by_two_dim_per_block():
    model = build_model(tiny_spec("affine"), seed=0)
    deploy = switch_to_deploy(model)
    expect = sum(st.depth * 2 * st.dim for st in model.spec.stages)
    assert model.num_params() - deploy.num_params() == expect


def test_source_model_untouched_by_fusion():
    model = randomized_affine_model(2)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    switch_to_deploy(model)
    for name, p in model.named_parameters():
        assert np.array_equal(p.data, before[name])
    assert not model.deploy


def test_double_fuse_rejected():
    deploy = switch_to_deploy(build_model(tiny_spec("affine"), seed=0))
    with pytest.raises(ValueError):
        switch_to_deploy(deploy)


def test_non_affine_fuse_rejected():
    with pytest.raises(ValueError):
        switch_to_deploy(build_model(tiny_spec("pooling"), seed=0))


def test_perturbed_fusion_fails_verification():
    model = randomized_affine_model(3)
    deploy = switch_to_deploy(model)
    deploy.blocks[0][0].norm1_beta.data[0] += 1e-3
    report = verify_equivalence(model, deploy, n_probes=5, tol=1e-5, seed=0)
    assert not report.passed


def test_equivalence_requires_matching_spec_and_no_droppath():
    a = build_model(tiny_spec("affine"), seed=0)
    b = switch_to_deploy(build_model(tiny_spec("affine", num_classes=5), seed=0))
    with pytest.raises(ValueError):
        verify_equivalence(a, b, n_probes=1)
    c = build_model(tiny_spec("affine", drop_path_rate=0.1), seed=0)
    d = switch_to_deploy(c)
    with pytest.raises(ValueError):
        verify_equivalence(c, d, n_probes=1)


def test_scalar_case_exact_at_tol_zero():
    # one channel, one spatial cell: both forms reduce to the same two
    # float32 multiply-adds, so even tol=0 passes
    rng = np.random.default_rng(0)
    xhat = rng.normal(0, 1, (1, 1, 1, 1)).astype(np.float32)
    gamma, beta, s, t = (np.array([v], np.float32)
                         for v in (1.25, 0.5, 2.0, 0.25))
    normed = gamma * xhat + beta
    branch = (s * normed + t) - normed
    fused = fuse_affine(gamma, beta, s, t)
    expect = fused.gamma_prime * xhat + fused.beta_prime
    assert float(np.abs(branch - expect).max()) == 0.0
