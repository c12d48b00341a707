import numpy as np
import pytest

from splat4d import sh

import oracles


@pytest.mark.parametrize("deg", [0, 1, 2])
def test_basis_matches_closed_forms(rng, deg):
    d = rng.normal(size=(30, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    h = rng.normal(size=(30, sh.num_coeffs(deg), 3))
    ours = np.maximum(np.einsum("nk,nkc->nc", sh.sh_basis(d, deg), h) + 0.5, 0)
    ref = np.array([oracles.sh_eval(h[i], d[i]) for i in range(30)])
    assert np.allclose(ours, ref, atol=1e-12)


def test_basis_grad_fd(rng):
    d = rng.normal(size=(5, 3))
    g = sh.sh_basis_grad(d, 2)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (sh.sh_basis(d + e, 2) - sh.sh_basis(d - e, 2)) / (2 * h)
        assert np.allclose(fd, g[..., j], atol=1e-8)


def test_dc_round_trip():
    rgb = np.array([[0.2, 0.5, 0.9]])
    basis = sh.sh_basis(np.array([[0.0, 0, 1]]), 0)
    assert np.allclose(basis[0, 0] * sh.rgb_to_dc(rgb) + 0.5, rgb)
