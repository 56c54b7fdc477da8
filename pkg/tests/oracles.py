"""Independent reference implementations used by the unit and acceptance tests.

Everything here is written with plain loops or closed forms so that it shares
no code path with the package under test.
"""

import math

import numpy as np
import torch

from portrait_stylize import ttn
from portrait_stylize.facial import ExpressionRegressor, facial_perception_loss
from portrait_stylize.networks import PatchDiscriminator, StubFeatureExtractor, seeded


def tv_oracle(img, norm="l2"):
    """img: C x H x W nested floats."""
    c, h, w = img.shape
    vals = []
    for k in range(c):
        for i in range(h):
            for j in range(w):
                du = img[k, i, j + 1] - img[k, i, j] if j + 1 < w else 0.0
                dv = img[k, i + 1, j] - img[k, i, j] if i + 1 < h else 0.0
                vals.append(du + dv)
    total = math.sqrt(sum(v * v for v in vals)) if norm == "l2" else sum(abs(v) for v in vals)
    return total / (h * w * c)


def conv_oracle(x, weight, bias, stride):
    """Zero-padded 3x3 convolution, x: C x H x W."""
    cin, h, w = x.shape
    cout = weight.shape[0]
    padded = np.zeros((cin, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = x
    oh, ow = (h - 1) // stride + 1, (w - 1) // stride + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                acc = bias[o]
                for ci in range(cin):
                    for a in range(3):
                        for b in range(3):
                            acc += weight[o, ci, a, b] * padded[ci, i * stride + a, j * stride + b]
                out[o, i, j] = acc
    return out


def stub_features_oracle(extractor, x):
    convs = [m for m in extractor.net if isinstance(m, torch.nn.Conv2d)]
    for conv in convs:
        x = np.tanh(conv_oracle(x, conv.weight.double().numpy(), conv.bias.double().numpy(), conv.stride[0]))
    return x


def guided_filter_oracle(guide, src, r, eps):
    h, w = guide.shape

    def box(a):
        out = np.zeros_like(a)
        for i in range(h):
            for j in range(w):
                win = a[max(i - r, 0):i + r + 1, max(j - r, 0):j + r + 1]
                out[i, j] = win.sum() / win.size
        return out

    mi, mp = box(guide), box(src)
    a = (box(guide * src) - mi * mp) / (box(guide * guide) - mi * mi + eps)
    b = mp - a * mi
    return box(a) * guide + box(b)


def perception_oracle(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def total_oracle(parts, con, per, tv):
    return parts["sty"] + con * parts["con"] + per * parts["per"] + tv * parts["tv"]



def _objective_parts():
    with seeded(0):
        disc = ttn.StyleDiscriminator(4)
        # 8x8 inputs are too small for the default depth
        disc.surface = PatchDiscriminator(3, 4, n_layers=2)
        disc.texture = PatchDiscriminator(3, 4, n_layers=2)
        regressor = ExpressionRegressor(3, width=4, input_size=16)
    extractor = StubFeatureExtractor(seed=1, width=4, depth=2)
    for m in (disc, regressor, extractor):
        m.requires_grad_(False)
    return disc, regressor, extractor


def make_objective(dtype):
    disc, regressor, extractor = (m.to(dtype) for m in _objective_parts())
    rng = np.random.default_rng(3)
    source = torch.tensor(rng.uniform(-1, 1, size=(1, 3, 8, 8)), dtype=dtype)
    real = torch.tensor(rng.uniform(-1, 1, size=(1, 3, 8, 8)), dtype=dtype)
    alpha = torch.tensor([[0.2, 0.4, 0.7]], dtype=dtype)
    tex_w = ttn.texture_weights(torch.Generator().manual_seed(0))

    def objective(generated):
        _, sty = ttn.style_adversarial_losses(disc, real, generated, tex_w, r=2, eps=0.2)
        parts = {"sty": sty, "con": ttn.content_loss(source, generated, extractor),
                 "per": facial_perception_loss(regressor(generated), alpha), "tv": ttn.tv_loss(generated)}
        return ttn.total_loss(parts)

    return objective


def directional_gradient_errors(probes=20, seed=11, h=1e-6):
    """Relative errors between the float32 autograd gradient of the full
    objective and float64 central differences along random unit directions."""
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-0.9, 0.9, size=(1, 3, 8, 8))
    x32 = torch.tensor(x0, dtype=torch.float32, requires_grad=True)
    make_objective(torch.float32)(x32).backward()
    grad = x32.grad.double().numpy()
    f64 = make_objective(torch.float64)
    errors = []
    for _ in range(probes):
        v = rng.normal(size=x0.shape)
        v /= np.linalg.norm(v)
        with torch.no_grad():
            fp = f64(torch.from_numpy(x0 + h * v)).item()
            fm = f64(torch.from_numpy(x0 - h * v)).item()
        numeric = (fp - fm) / (2 * h)
        analytic = float((grad * v).sum())
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return errors
