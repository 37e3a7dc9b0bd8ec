import numpy as np
import pytest

from gradclust.model import LayerSpec, Model, mlp


def random_mlp(rng, sizes=(5, 7, 3), loss="xent", bias=True, activation="relu"):
    return Model.init(mlp(list(sizes), activation, bias), rng, loss)


def random_conv(rng, in_shape=(4, 4, 2), kernel=(2, 2), channels=3, classes=3, bias=True):
    conv = LayerSpec.conv(in_shape, kernel, channels, "relu", bias)
    head = LayerSpec.fc(conv.output_size, classes, "identity", bias)
    return Model.init((conv, head), rng, "xent")


def finite_difference(model, x, y, h=1e-6):
    """Central differences of one example's loss with respect to theta."""
    from gradclust.model import forward

    theta = model.theta
    out = np.empty(theta.size)
    for j in range(theta.size):
        e = np.zeros(theta.size)
        e[j] = h
        lp, _ = forward(model.with_theta(theta + e), x[None], np.atleast_1d(y))
        lm, _ = forward(model.with_theta(theta - e), x[None], np.atleast_1d(y))
        out[j] = (lp[0] - lm[0]) / (2 * h)
    return out


def direct_conv_forward(x, W, b, in_shape, kernel):
    """Sliding-window loops without patch extraction; output ``(H', W', O)``."""
    H, Wd, C = in_shape
    kh, kw = kernel
    img = x.reshape(H, Wd, C)
    Wk = W.reshape(kh, kw, C, -1)
    out = np.zeros((H - kh + 1, Wd - kw + 1, Wk.shape[-1]))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for o in range(Wk.shape[-1]):
                out[i, j, o] = np.sum(img[i:i + kh, j:j + kw, :] * Wk[:, :, :, o])
    if b is not None:
        out += b
    return out


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


# (criterion number, passed, detail) collected by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
