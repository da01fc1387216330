"""Shared oracles for the test suite.

These deliberately re-derive results through the slowest, most literal route
available (nested scalar loops, central finite differences) so they stay
independent of the vectorized implementations they check.
"""

import numpy as np

from pruneseg import autograd as ag


def central_diff(f, arrays, index, h=1e-4):
    """Gradient of scalar f(arrays) w.r.t. arrays[index] by central differences."""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    src = base[index].reshape(-1)
    for i in range(src.size):
        orig = src[i]
        src[i] = orig + h
        up = f(base)
        src[i] = orig - h
        down = f(base)
        src[i] = orig
        flat[i] = (up - down) / (2 * h)
    return grad


def assert_grads_close(build, arrays, rtol=1e-4, h=1e-4):
    """build(list of Tensors) -> scalar Tensor; checks every input's gradient.

    Relative error uses |fd| + 1e-8 in the denominator, elementwise.
    """
    tensors = [ag.parameter(a, dtype=np.float64) for a in arrays]
    with ag.Tape():
        loss = build(tensors)
        grads = ag.backward(loss)

    def f(vals):
        with ag.no_grad():
            return build([ag.tensor(v, dtype=np.float64) for v in vals]).item()

    for i, t in enumerate(tensors):
        fd = central_diff(f, [a.astype(np.float64) for a in arrays], i, h=h)
        an = grads.get(t)
        an = np.zeros_like(fd) if an is None else an
        err = np.abs(an - fd) / (np.abs(fd) + 1e-8)
        assert err.max() < rtol, (
            f"input {i}: max rel err {err.max():.3e} (analytic {an.ravel()[:4]}, "
            f"fd {fd.ravel()[:4]})")


def nested_loop_conv3(x, kernel, bias=None, stride=(1, 1, 1), pad=(0, 0, 0)):
    """Direct convolution with explicit scalar loops; the conv3 oracle."""
    n, cin, d, h, w = x.shape
    cout, _, k1, k2, k3 = kernel.shape
    s1, s2, s3 = stride
    p1, p2, p3 = pad
    do = (d + 2 * p1 - k1) // s1 + 1
    ho = (h + 2 * p2 - k2) // s2 + 1
    wo = (w + 2 * p3 - k3) // s3 + 1
    out = np.zeros((n, cout, do, ho, wo), dtype=np.float64)
    for b in range(n):
        for co in range(cout):
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for ci in range(cin):
                            for a in range(k1):
                                for bb in range(k2):
                                    for c in range(k3):
                                        zi = od * s1 + a - p1
                                        yi = oh * s2 + bb - p2
                                        xi = ow * s3 + c - p3
                                        if 0 <= zi < d and 0 <= yi < h and 0 <= xi < w:
                                            acc += float(kernel[co, ci, a, bb, c]) * \
                                                float(x[b, ci, zi, yi, xi])
                        if bias is not None:
                            acc += float(bias[co])
                        out[b, co, od, oh, ow] = acc
    return out


def brute_force_nsd(pred_mask, gt_mask, spacing, tolerance_mm):
    """All-pairs boundary-distance surface agreement; the nsd_score oracle.

    Uses the same 6-connectivity boundary rule as the implementation but
    measures every boundary-to-boundary distance explicitly.
    """
    from pruneseg.metrics import boundary_voxels

    p_any = bool(np.asarray(pred_mask).any())
    g_any = bool(np.asarray(gt_mask).any())
    if not p_any and not g_any:
        return 1.0
    if p_any != g_any:
        return 0.0
    sp = np.asarray(spacing, dtype=np.float64)
    pb = boundary_voxels(pred_mask) * sp
    gb = boundary_voxels(gt_mask) * sp
    hits = 0
    for q in pb:
        best = np.inf
        for r in gb:
            dd = q - r
            best = min(best, float(np.sqrt(dd @ dd)))
        if best <= tolerance_mm:
            hits += 1
    for r in gb:
        best = np.inf
        for q in pb:
            dd = r - q
            best = min(best, float(np.sqrt(dd @ dd)))
        if best <= tolerance_mm:
            hits += 1
    return hits / (len(pb) + len(gb))
