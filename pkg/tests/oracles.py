"""Independent reference implementations shared by unit and acceptance tests."""

import math

import numpy as np
import torch


def l1_mean_loop(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    total, count = 0.0, 0
    for x, y in zip(a.ravel(), b.ravel()):
        total += abs(x - y)
        count += 1
    return total / count


def bce_loop(p, t, eps=1e-7):
    p, t = np.asarray(p, np.float64).ravel(), np.asarray(t, np.float64).ravel()
    vals = []
    for pi, ti in zip(p, t):
        pi = min(max(pi, eps), 1 - eps)
        vals.append(-(ti * math.log(pi) + (1 - ti) * math.log(1 - pi)))
    return sum(vals) / len(vals)


def adversarial_loop(d_real, d_fake, eps=1e-7):
    r = [math.log(min(max(v, eps), 1 - eps)) for v in np.ravel(d_real)]
    f = [math.log(1 - min(max(v, eps), 1 - eps)) for v in np.ravel(d_fake)]
    return -(sum(r) / len(r) + sum(f) / len(f))


def margin_loss_loop(emb, weights, label, s, m):
    """Cross-entropy of scaled cosines with cos(theta + m) on the target (theta < pi - m)."""
    logits = []
    for j, w in enumerate(weights):
        c = float(np.dot(emb, w))
        if j == label:
            theta = math.acos(max(-1.0, min(1.0, c)))
            c = math.cos(theta + m) if theta + m <= math.pi else c - math.sin(math.pi - m) * m
        logits.append(s * c)
    mx = max(logits)
    lse = mx + math.log(sum(math.exp(v - mx) for v in logits))
    return lse - logits[label]


def central_fd_gradient(fn, inputs, eps=1e-6):
    """Numerical gradient of scalar ``fn(*inputs)`` for each float64 tensor input."""
    grads = []
    for k, x in enumerate(inputs):
        g = torch.zeros_like(x)
        flat = x.detach().clone().reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            args = [t.detach() for t in inputs]
            flat[i] = orig + eps
            args[k] = flat.view_as(x).clone()
            up = float(fn(*args))
            flat[i] = orig - eps
            args[k] = flat.view_as(x).clone()
            down = float(fn(*args))
            flat[i] = orig
            g.view(-1)[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def gradient_relative_error(fn, inputs, eps=1e-6):
    """Max over inputs of ||analytic - numeric|| / max(||numeric||, ||analytic||, 1e-12)."""
    xs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    analytic = torch.autograd.grad(out, xs, allow_unused=True)
    analytic = [torch.zeros_like(x) if a is None else a for a, x in zip(analytic, xs)]
    numeric = central_fd_gradient(fn, inputs, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = max(float(n.norm()), float(a.norm()), 1e-12)
        worst = max(worst, float((a - n).norm()) / denom)
    return worst
