import numpy as np
import pytest

from contactworld import splat, tokens


@pytest.fixture
def identity_camera():
    return splat.CameraModel(position=np.zeros(3), rotation_cw=np.eye(3),
                             fx=100.0, fy=100.0, cx=32.0, cy=32.0,
                             width=64, height=64, x_min=0.05)


@pytest.fixture
def splat_cfg():
    return splat.SplatConfig(m_max=10.0, gamma=2.0, r_min=2.0, r_max=6.0,
                             tau_depth=1.0)


@pytest.fixture
def toy_vocab():
    return tokens.FactorizedVocab.of(16, 2)


def make_grid(vocab, rng, n_frames=4, h=4, w=4, t_hist=2):
    toks = rng.integers(0, vocab.v, size=(n_frames, h * w))
    return tokens.TokenGrid(tokens=toks, t_hist=t_hist, h=h, w=w, vocab=vocab)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
