"""Hand-built two-layer CNN and a from-scratch numpy Grad-CAM oracle for it."""

import numpy as np
import torch
import torch.nn as nn

K1 = np.array([
    [[[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]]],
    [[[0.5, 0.5, 0.5], [0.0, 0.0, 0.0], [-0.5, -0.5, -0.5]]],
])                                              # (2, 1, 3, 3)
B1 = np.array([0.1, -0.2])
K2 = np.array([
    [[[0.2, -0.1], [0.3, 0.1]], [[-0.4, 0.2], [0.1, 0.5]]],
    [[[0.1, 0.1], [-0.2, 0.3]], [[0.3, -0.3], [0.2, 0.1]]],
    [[[-0.5, 0.2], [0.4, 0.0]], [[0.1, 0.2], [-0.1, 0.3]]],
])                                              # (3, 2, 2, 2)
B2 = np.array([0.05, 0.0, -0.05])
FC_W = np.array([[0.7, -0.3, 0.5], [-0.2, 0.9, 0.4]])
FC_B = np.array([0.1, -0.1])


class ToyCNN(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 2, 3)
        self.act1 = nn.ReLU()
        self.conv2 = nn.Conv2d(2, 3, 2)
        self.act2 = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(3, 2)
        with torch.no_grad():
            for mod, w, b in ((self.conv1, K1, B1), (self.conv2, K2, B2), (self.fc, FC_W, FC_B)):
                mod.weight.copy_(torch.tensor(w))
                mod.bias.copy_(torch.tensor(b))
        self.double()

    def forward(self, x):
        x = self.act2(self.conv2(self.act1(self.conv1(x))))
        return self.fc(self.pool(x).flatten(1))


# ---- from-scratch symbolic execution in numpy -------------------------------

def correlate(x, k, b):
    """Valid cross-correlation: x (Cin, H, W), k (Cout, Cin, kh, kw)."""
    cout, cin, kh, kw = k.shape
    h, w = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    out = np.zeros((cout, h, w))
    for o in range(cout):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = np.sum(x[:, i:i + kh, j:j + kw] * k[o]) + b[o]
    return out


def correlate_backward_input(grad_out, k, in_shape):
    gin = np.zeros(in_shape)
    cout, cin, kh, kw = k.shape
    for o in range(cout):
        for i in range(grad_out.shape[1]):
            for j in range(grad_out.shape[2]):
                gin[:, i:i + kh, j:j + kw] += grad_out[o, i, j] * k[o]
    return gin


def bilinear(src, out_h, out_w):
    """Half-pixel-centre bilinear resize with edge clamping."""
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y = max((i + 0.5) * in_h / out_h - 0.5, 0.0)
        y0 = int(np.floor(y)); y1 = min(y0 + 1, in_h - 1); ly = y - y0
        for j in range(out_w):
            x = max((j + 0.5) * in_w / out_w - 0.5, 0.0)
            x0 = int(np.floor(x)); x1 = min(x0 + 1, in_w - 1); lx = x - x0
            out[i, j] = ((1 - ly) * ((1 - lx) * src[y0, x0] + lx * src[y0, x1])
                         + ly * ((1 - lx) * src[y1, x0] + lx * src[y1, x1]))
    return out


def symbolic_cam(image, cls, layer):
    z1 = correlate(image, K1, B1)
    a1 = np.maximum(z1, 0)
    z2 = correlate(a1, K2, B2)
    a2 = np.maximum(z2, 0)
    h2, w2 = a2.shape[1:]
    g_a2 = np.broadcast_to(FC_W[cls][:, None, None] / (h2 * w2), a2.shape)
    if layer == "act2":
        acts, grads = a2, g_a2
    else:
        g_z2 = g_a2 * (z2 > 0)
        acts, grads = a1, correlate_backward_input(g_z2, K2, a1.shape)
    weights = grads.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, acts, axes=1), 0)
    peak = raw.max()
    norm = raw / peak if peak > 0 else np.zeros_like(raw)
    return bilinear(norm, image.shape[1], image.shape[2]), peak


IMAGE = np.random.default_rng(0).normal(size=(1, 9, 9))
