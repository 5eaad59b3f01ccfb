"""Straight-line reference implementations used as test oracles.

Nothing here imports the code under test except for plain data types.
"""

import math

import numpy as np


# ---- classifier ---------------------------------------------------------

def _mlp(t, prefix, x, eps=1e-5):
    """Affine, layer norm, ReLU, affine. Returns (output, relu-active mask)."""
    z = x @ t[prefix + ".W1"] + t[prefix + ".b1"]
    h = z.shape[1]
    mean = z.sum(axis=1, keepdims=True) / h
    var = ((z - mean) ** 2).sum(axis=1, keepdims=True) / h
    y = t[prefix + ".ln_g"] * (z - mean) / np.sqrt(var + eps) + t[prefix + ".ln_b"]
    return np.where(y > 0, y, 0.0) @ t[prefix + ".W2"] + t[prefix + ".b2"], y > 0


def classifier_forward(t, m, n, F, teacher=None):
    """Per-level probabilities and the list of ReLU masks touched on the way."""
    probs, masks, prev = [], [], []
    for li in range(n):
        x = F
        if li:
            hin = np.concatenate(prev, axis=1)
            g, mg = _mlp(t, f"l{li}.gamma", hin)
            b, mb = _mlp(t, f"l{li}.beta", hin)
            x = g * F + b
            masks += [mg, mb]
        z, mz = _mlp(t, f"l{li}.base", x)
        masks.append(mz)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        P = e / e.sum(axis=1, keepdims=True)
        probs.append(P)
        if teacher is None:
            prev.append(P)
        else:
            prev.append(np.eye(m)[teacher[:, li]])
    return probs, masks


def classifier_loss(t, m, n, F, Y):
    """Mean over samples of the summed per-level cross-entropy, with teacher forcing."""
    probs, masks = classifier_forward(t, m, n, F, Y)
    total = 0.0
    for li, P in enumerate(probs):
        total -= np.log(P[np.arange(len(F)), Y[:, li]]).sum()
    return total / len(F), masks


# ---- pose scoring -------------------------------------------------------

def reprojection_error(R, t, fx, fy, cx, cy, pixel, candidates, penalty=1e6, eps=1e-6):
    """min over candidates of the pixel distance, scalar loops only."""
    best = math.inf
    for X in candidates:
        xc = [sum(R[i][j] * X[j] for j in range(3)) + t[i] for i in range(3)]
        if xc[2] <= eps:
            e = penalty
        else:
            u = fx * xc[0] / xc[2] + cx
            v = fy * xc[1] / xc[2] + cy
            e = math.sqrt((u - pixel[0]) ** 2 + (v - pixel[1]) ** 2)
        best = min(best, e)
    return best


def kernel_sum(errors, tau, slope=0.5):
    return sum(1.0 / (1.0 + math.exp(-slope * (e - tau))) for e in errors)


def world_to_camera(quat, translation):
    """(R, t) with x_cam = R x_world + t from a camera-to-world quaternion pose."""
    x, y, z, w = quat
    Rcw = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ]
    R = [[Rcw[j][i] for j in range(3)] for i in range(3)]
    t = [-sum(R[i][j] * translation[j] for j in range(3)) for i in range(3)]
    return R, t


def project(R, t, fx, fy, cx, cy, X):
    xc = [sum(R[i][j] * X[j] for j in range(3)) + t[i] for i in range(3)]
    return fx * xc[0] / xc[2] + cx, fy * xc[1] / xc[2] + cy, xc[2]


def finite_difference_errors(tensors, grads, m, n, F, Y, h=1e-5):
    """Per-tensor relative error between ``grads`` and central differences.

    Coordinates whose +-h perturbation flips a ReLU are skipped: the loss is
    not differentiable there and the difference quotient is meaningless.
    Returns ({name: relative error}, skipped coordinate count).
    """
    errors, skipped = {}, 0
    _, base_masks = classifier_loss(tensors, m, n, F, Y)
    for key, arr in tensors.items():
        num, ana = [], []
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp, mp = classifier_loss(tensors, m, n, F, Y)
            arr[idx] = old - h
            lm, mm = classifier_loss(tensors, m, n, F, Y)
            arr[idx] = old
            if any(not np.array_equal(a, b) for a, b in zip(mp, base_masks)) or any(
                not np.array_equal(a, b) for a, b in zip(mm, base_masks)
            ):
                skipped += 1
                continue
            num.append((lp - lm) / (2 * h))
            ana.append(grads[key][idx])
        num, ana = np.array(num), np.array(ana)
        scale = max(np.linalg.norm(num), np.linalg.norm(ana))
        errors[key] = 0.0 if scale < 1e-10 else float(np.linalg.norm(num - ana) / scale)
    return errors, skipped
