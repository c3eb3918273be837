"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, brute force), kept
separate from the library code paths it checks.
"""

import numpy as np


def conv3d_naive(x, w, stride=1, padding=0):
    """Direct 7-loop cross-correlation."""
    N, C, D, H, W = x.shape
    K, _, kd, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2))
    D2, H2, W2 = x.shape[2:]
    od = (D2 - kd) // stride + 1
    oh = (H2 - kh) // stride + 1
    ow = (W2 - kw) // stride + 1
    out = np.zeros((N, K, od, oh, ow))
    for n in range(N):
        for k in range(K):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        acc = 0.0
                        for c in range(C):
                            patch = x[
                                n,
                                c,
                                z * stride : z * stride + kd,
                                y * stride : y * stride + kh,
                                xx * stride : xx * stride + kw,
                            ]
                            acc += float(np.sum(patch * w[k, c]))
                        out[n, k, z, y, xx] = acc
    return out


def upsample2x_naive(x):
    """Reference align-corners-false trilinear doubling via explicit sampling."""
    N, C, D, H, W = x.shape
    out = np.zeros((N, C, 2 * D, 2 * H, 2 * W))

    def sample(vol, z, y, xx):
        z0 = int(np.floor(z))
        y0 = int(np.floor(y))
        x0 = int(np.floor(xx))
        acc = 0.0
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    wz = (1 - abs(z - (z0 + dz)))
                    wy = (1 - abs(y - (y0 + dy)))
                    wx = (1 - abs(xx - (x0 + dx)))
                    if wz <= 0 or wy <= 0 or wx <= 0:
                        continue
                    zi = min(max(z0 + dz, 0), vol.shape[0] - 1)
                    yi = min(max(y0 + dy, 0), vol.shape[1] - 1)
                    xi = min(max(x0 + dx, 0), vol.shape[2] - 1)
                    acc += wz * wy * wx * vol[zi, yi, xi]
        return acc

    for n in range(N):
        for c in range(C):
            for z in range(2 * D):
                for y in range(2 * H):
                    for xx in range(2 * W):
                        zs = (z + 0.5) / 2 - 0.5
                        ys = (y + 0.5) / 2 - 0.5
                        xs = (xx + 0.5) / 2 - 0.5
                        zs = min(max(zs, 0.0), D - 1.0)
                        ys = min(max(ys, 0.0), H - 1.0)
                        xs = min(max(xs, 0.0), W - 1.0)
                        out[n, c, z, y, xx] = sample(x[n, c], zs, ys, xs)
    return out


def finite_diff_grad(f, x, h=1e-5):
    """Central finite differences of scalar-valued f at x (same shape as x)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_param_grads(loss_fn, params, h=1e-5, max_coords=50, rng=None, tol=1e-4):
    """Compare analytic grads of loss_fn() against central differences.

    ``params`` maps name -> Tensor. Gradients must already be populated.
    Checks a random coordinate subsample per parameter; returns the worst
    relative error seen and the offending name.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    worst = (0.0, None)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6)
            if err > worst[0]:
                worst = (err, f"{name}[{i}] fd={fd:.3e} ad={gflat[i]:.3e}")
            assert err < tol, (
                f"gradient mismatch for {name}[{i}]: fd={fd:.6e} ad={gflat[i]:.6e} "
                f"rel={err:.2e}"
            )
    return worst


def expm_taylor_naive(a, order=30):
    """High-order plain Taylor series without scaling (small-norm oracle)."""
    x = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, order + 1):
        term = term @ a / k
        x = x + term
    return x


def jacobi_svd(a, sweeps=60, tol=1e-14):
    """One-sided Jacobi SVD. Returns (U, s, Vt) with a = U @ diag(s) @ Vt.

    Operates on columns of a working copy; rotations accumulate into V.
    Independent of numpy.linalg.svd.
    """
    a = np.asarray(a, dtype=np.float64)
    transposed = False
    if a.shape[0] < a.shape[1]:
        a = a.T
        transposed = True
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                off = max(off, abs(gamma) / max(np.sqrt(alpha * beta), 1e-300))
                if abs(gamma) < tol * np.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up = u[:, p].copy()
                uq = u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if off < tol:
            break
    sing = np.sqrt(np.sum(u * u, axis=0))
    keep = sing > 1e-300
    uu = np.zeros_like(u)
    uu[:, keep] = u[:, keep] / sing[keep]
    order = np.argsort(-sing)
    sing = sing[order]
    uu = uu[:, order]
    vv = v[:, order]
    if transposed:
        return vv, sing, uu.T
    return uu, sing, vv.T


def polar_factor_svd(a):
    """Exact U V^T of a via the Jacobi oracle (zero singulars dropped)."""
    u, s, vt = jacobi_svd(a)
    keep = s > 1e-12 * max(s[0], 1e-300)
    return u[:, keep] @ vt[keep]


def flood_fill_components(mask):
    """6-connected components via explicit BFS. Returns list of voxel lists."""
    mask = np.asarray(mask).astype(bool)
    visited = np.zeros_like(mask, dtype=bool)
    comps = []
    dims = mask.shape
    for start in zip(*np.nonzero(mask)):
        if visited[start]:
            continue
        stack = [start]
        visited[start] = True
        comp = []
        while stack:
            v = stack.pop()
            comp.append(v)
            z, y, x = v
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nz, ny, nx = z + dz, y + dy, x + dx
                if 0 <= nz < dims[0] and 0 <= ny < dims[1] and 0 <= nx < dims[2]:
                    if mask[nz, ny, nx] and not visited[nz, ny, nx]:
                        visited[nz, ny, nx] = True
                        stack.append((nz, ny, nx))
        comps.append(sorted(comp))
    return comps


def inner_distance_argmax(comp_voxels, shape):
    """Most interior voxel of a component by exhaustive distance-to-outside.

    Distance of voxel v = min Euclidean distance to any voxel outside the
    component (the volume border counts as outside). Ties break to the
    lexicographically smallest voxel.
    """
    comp = set(comp_voxels)
    outside = []
    for z in range(-1, shape[0] + 1):
        for y in range(-1, shape[1] + 1):
            for x in range(-1, shape[2] + 1):
                if (z, y, x) not in comp:
                    outside.append((z, y, x))
    outside = np.array(outside, dtype=float)
    best = None
    best_d = -1.0
    for v in sorted(comp):
        d = np.min(np.sum((outside - np.array(v, dtype=float)) ** 2, axis=1))
        if d > best_d + 1e-12:
            best_d = d
            best = v
    return best, np.sqrt(best_d)


def nsd_naive(pred, gt, tol=1.0):
    """Two-sided surface dice by exhaustive pairwise boundary distances."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)

    def boundary(mask):
        pts = []
        dims = mask.shape
        for z, y, x in zip(*np.nonzero(mask)):
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nz, ny, nx = z + dz, y + dy, x + dx
                if not (0 <= nz < dims[0] and 0 <= ny < dims[1] and 0 <= nx < dims[2]) or not mask[nz, ny, nx]:
                    pts.append((z, y, x))
                    break
        return np.array(pts, dtype=float).reshape(-1, 3)

    bp = boundary(pred)
    bg = boundary(gt)
    if len(bp) == 0 and len(bg) == 0:
        return 1.0
    if len(bp) == 0 or len(bg) == 0:
        return 0.0

    def within(a, b):
        count = 0
        for p in a:
            d = np.sqrt(np.min(np.sum((b - p) ** 2, axis=1)))
            if d <= tol:
                count += 1
        return count

    return (within(bp, bg) + within(bg, bp)) / (len(bp) + len(bg))


def adam_reference(param, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam trace over a list of gradients."""
    p = np.array(param, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(p.copy())
    return out
