import numpy as np
import pytest

from dreamphys.scene import Scene


def random_scene(rng, n=20, degree=0, lo=0.3, hi=0.7) -> Scene:
    centers = lo + (hi - lo) * rng.random((n, 3))
    opacities = 0.05 + 0.9 * rng.random(n)
    scales = np.exp(rng.uniform(-4.5, -2.5, size=(n, 3)))
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = rng.uniform(-0.8, 0.8, size=(n, (degree + 1) ** 2, 3))
    return Scene(centers, opacities, scales, q, sh, sh_degree=degree)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
