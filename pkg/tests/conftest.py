import numpy as np
import pytest

from facemap import cnn

TINY_ARCH = """\
input 12 12 3
tap pool2
conv name=c1 out=4 k=3x3 stride=1 pad=1
relu name=r1
maxpool name=p1 k=2 stride=2
conv name=c2 out=6 k=3x3 stride=2 pad=0
relu name=r2
maxpool name=pool2 k=2 stride=1
"""

# small net whose input side matches attribute-map handling (even tinier)
MICRO_ARCH = """\
input 16 16 3
tap pool1
conv name=c1 out=5 k=3x3 stride=1 pad=1
relu name=r1
maxpool name=pool1 k=2 stride=2
"""


@pytest.fixture
def tiny_net():
    model = cnn.parse_arch(TINY_ARCH)
    cnn.init_weights(model, seed=1)
    return model


@pytest.fixture
def micro_net():
    model = cnn.parse_arch(MICRO_ARCH)
    cnn.init_weights(model, seed=2)
    return model


def random_net(rng, in_hw=10, channels=3):
    """A random small conv net for oracle comparisons."""
    k1 = int(rng.integers(1, 4))
    k2 = int(rng.integers(1, 4))
    s1 = int(rng.integers(1, 3))
    text = (
        f"input {in_hw} {in_hw} {channels}\n"
        "tap c2\n"
        f"conv name=c1 out={int(rng.integers(2, 6))} k={k1}x{k1} stride={s1} pad={int(rng.integers(0, 2))}\n"
        "relu name=r1\n"
        f"conv name=c2 out={int(rng.integers(2, 6))} k={k2}x{k2} stride=1 pad=0\n"
    )
    model = cnn.parse_arch(text)
    cnn.init_weights(model, seed=int(rng.integers(0, 2 ** 31)))
    return model


def naive_conv(x, w, b, stride, pad):
    """Six-nested-loop direct cross-correlation, the independent oracle."""
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    H, W, _ = x.shape
    oc, ic, kh, kw = w.shape
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    out = np.zeros((oh, ow, oc))
    for i in range(oh):
        for j in range(ow):
            for o in range(oc):
                acc = 0.0
                for c in range(ic):
                    for a in range(kh):
                        for bb in range(kw):
                            acc += x[i * stride + a, j * stride + bb, c] * w[o, c, a, bb]
                out[i, j, o] = acc + b[o]
    return out
