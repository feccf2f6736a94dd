"""Hot numeric kernels.

Every kernel exists twice: a loop version compiled by numba when available
(``*_loop``) and a vectorized numpy version (``*_numpy``). The public name
binds to the loop version when numba is enabled and to the numpy version
otherwise, so both paths are exercised by the test-suite and compared by
``benchmarks/bench_kernels.py``.

Kinematics kernels have no separate numpy twin: their loop bodies are plain
numpy and run uncompiled when numba is disabled.
"""
import numpy as np

from ._jit import NUMBA_ENABLED, jit


# ---------------------------------------------------------------------------
# nearest neighbours


@jit
def nearest_indices_loop(source, target):
    n = source.shape[0]
    m = target.shape[0]
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        tx = target[i, 0]
        ty = target[i, 1]
        tz = target[i, 2]
        best = np.inf
        besti = 0
        for j in range(n):
            dx = source[j, 0] - tx
            dy = source[j, 1] - ty
            dz = source[j, 2] - tz
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                besti = j
        out[i] = besti
    return out


def nearest_indices_numpy(source, target, chunk=256):
    source = np.ascontiguousarray(source, dtype=np.float64)
    target = np.ascontiguousarray(target, dtype=np.float64)
    out = np.empty(len(target), dtype=np.int64)
    sx, sy, sz = source[:, 0], source[:, 1], source[:, 2]
    for start in range(0, len(target), chunk):
        t = target[start:start + chunk]
        dx = sx[None, :] - t[:, 0:1]
        dy = sy[None, :] - t[:, 1:2]
        dz = sz[None, :] - t[:, 2:3]
        d = dx * dx + dy * dy + dz * dz
        # argmin returns the first minimum: lowest index wins ties
        out[start:start + chunk] = np.argmin(d, axis=1)
    return out


# ---------------------------------------------------------------------------
# farthest point sampling


@jit
def farthest_point_loop(points, k, start):
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = start
    for s in range(k):
        chosen[s] = cur
        dist[cur] = -1.0
        px = points[cur, 0]
        py = points[cur, 1]
        pz = points[cur, 2]
        best = -1.0
        besti = 0
        for j in range(n):
            dj = dist[j]
            if dj >= 0.0:
                dx = points[j, 0] - px
                dy = points[j, 1] - py
                dz = points[j, 2] - pz
                d = dx * dx + dy * dy + dz * dz
                if d < dj:
                    dj = d
                    dist[j] = d
            if dj > best:
                best = dj
                besti = j
        cur = besti
    return chosen


def farthest_point_numpy(points, k, start):
    points = np.asarray(points, dtype=np.float64)
    chosen = np.empty(k, dtype=np.int64)
    dist = np.full(len(points), np.inf)
    cur = start
    for s in range(k):
        chosen[s] = cur
        dist[cur] = -1.0
        diff = points - points[cur]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        live = dist >= 0.0
        dist[live] = np.minimum(dist[live], d[live])
        cur = int(np.argmax(dist))
    return chosen


# ---------------------------------------------------------------------------
# mesh / plane intersection


@jit
def plane_segments_loop(vertices, faces, origin, normal):
    nv = vertices.shape[0]
    d = np.empty(nv)
    for i in range(nv):
        d[i] = ((vertices[i, 0] - origin[0]) * normal[0]
                + (vertices[i, 1] - origin[1]) * normal[1]
                + (vertices[i, 2] - origin[2]) * normal[2])
    nf = faces.shape[0]
    out = np.empty((nf, 2, 3))
    count = 0
    for f in range(nf):
        a = faces[f, 0]
        b = faces[f, 1]
        c = faces[f, 2]
        sa = d[a] >= 0.0
        sb = d[b] >= 0.0
        sc = d[c] >= 0.0
        if sa == sb and sb == sc:
            continue
        slot = 0
        for e in range(3):
            if e == 0:
                i, j, si, sj = a, b, sa, sb
            elif e == 1:
                i, j, si, sj = b, c, sb, sc
            else:
                i, j, si, sj = c, a, sc, sa
            if si != sj:
                t = d[i] / (d[i] - d[j])
                for k in range(3):
                    out[count, slot, k] = vertices[i, k] + t * (vertices[j, k] - vertices[i, k])
                slot += 1
        count += 1
    return out[:count]


def plane_segments_numpy(vertices, faces, origin, normal):
    d = (vertices - origin) @ normal
    side = d[faces] >= 0.0
    crossing = ~(side.all(axis=1) | (~side).all(axis=1))
    tri = faces[crossing]
    s = side[crossing]
    dv = d[tri]
    pts = np.empty((len(tri), 2, 3))
    slot = np.zeros(len(tri), dtype=np.int64)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        hit = s[:, i] != s[:, j]
        di = dv[hit, i]
        t = di / (di - dv[hit, j])
        vi = vertices[tri[hit, i]]
        vj = vertices[tri[hit, j]]
        rows = np.nonzero(hit)[0]
        pts[rows, slot[rows]] = vi + t[:, None] * (vj - vi)
        slot[rows] += 1
    return pts


# ---------------------------------------------------------------------------
# even-odd polygon fill on a pixel grid


@jit
def fill_even_odd_loop(segments, u0, w0, h, nu, nw):
    """Fill pixels whose centers lie inside the closed contours.

    ``segments`` is (m, 2, 2) in (u, w). Pixel (i, j) has its center at
    (u0 + (j + 0.5) h, w0 + (i + 0.5) h). Returns a (nw, nu) bool image.
    """
    m = segments.shape[0]
    counts = np.zeros(nw, dtype=np.int64)
    for s in range(m):
        wa = segments[s, 0, 1]
        wb = segments[s, 1, 1]
        lo = min(wa, wb)
        hi = max(wa, wb)
        i0 = int(np.ceil((lo - w0) / h - 0.5))
        i1 = int(np.ceil((hi - w0) / h - 0.5))
        i0 = max(i0, 0)
        i1 = min(i1, nw)
        for i in range(i0, i1):
            counts[i] += 1
    offsets = np.zeros(nw + 1, dtype=np.int64)
    for i in range(nw):
        offsets[i + 1] = offsets[i] + counts[i]
    xs = np.empty(offsets[nw])
    fillpos = offsets[:nw].copy()
    for s in range(m):
        ua = segments[s, 0, 0]
        wa = segments[s, 0, 1]
        ub = segments[s, 1, 0]
        wb = segments[s, 1, 1]
        lo = min(wa, wb)
        hi = max(wa, wb)
        i0 = int(np.ceil((lo - w0) / h - 0.5))
        i1 = int(np.ceil((hi - w0) / h - 0.5))
        i0 = max(i0, 0)
        i1 = min(i1, nw)
        for i in range(i0, i1):
            wc = w0 + (i + 0.5) * h
            xs[fillpos[i]] = ua + (wc - wa) * (ub - ua) / (wb - wa)
            fillpos[i] += 1
    img = np.zeros((nw, nu), dtype=np.bool_)
    for i in range(nw):
        row = np.sort(xs[offsets[i]:offsets[i + 1]])
        for p in range(0, row.shape[0] - 1, 2):
            j0 = int(np.ceil((row[p] - u0) / h - 0.5))
            j1 = int(np.ceil((row[p + 1] - u0) / h - 0.5))
            j0 = max(j0, 0)
            j1 = min(j1, nu)
            for j in range(j0, j1):
                img[i, j] = True
    return img


def fill_even_odd_numpy(segments, u0, w0, h, nu, nw):
    img = np.zeros((nw, nu), dtype=bool)
    if len(segments) == 0:
        return img
    ua, wa = segments[:, 0, 0], segments[:, 0, 1]
    ub, wb = segments[:, 1, 0], segments[:, 1, 1]
    lo = np.minimum(wa, wb)
    hi = np.maximum(wa, wb)
    i0 = np.clip(np.ceil((lo - w0) / h - 0.5).astype(np.int64), 0, nw)
    i1 = np.clip(np.ceil((hi - w0) / h - 0.5).astype(np.int64), 0, nw)
    n_rows = np.maximum(i1 - i0, 0)
    if n_rows.sum() == 0:
        return img
    seg = np.repeat(np.arange(len(segments)), n_rows)
    first = np.repeat(np.cumsum(n_rows) - n_rows, n_rows)
    rows = i0[seg] + np.arange(len(seg)) - first
    wc = w0 + (rows + 0.5) * h
    x = ua[seg] + (wc - wa[seg]) * (ub[seg] - ua[seg]) / (wb[seg] - wa[seg])
    order = np.lexsort((x, rows))
    rows, x = rows[order], x[order]
    # rank of each crossing within its row
    row_start = np.searchsorted(rows, rows, side="left")
    rank = np.arange(len(rows)) - row_start
    row_count = np.bincount(rows, minlength=nw)
    even = (rank % 2 == 0) & (rank + 1 < row_count[rows])
    starts = np.nonzero(even)[0]
    r = rows[starts]
    j0 = np.clip(np.ceil((x[starts] - u0) / h - 0.5).astype(np.int64), 0, nu)
    j1 = np.clip(np.ceil((x[starts + 1] - u0) / h - 0.5).astype(np.int64), 0, nu)
    diff = np.zeros((nw, nu + 1), dtype=np.int64)
    np.add.at(diff, (r, j0), 1)
    np.add.at(diff, (r, j1), -1)
    return np.cumsum(diff[:, :nu], axis=1) > 0


# ---------------------------------------------------------------------------
# inside/outside voxelization by vertical ray parity


@jit
def parity_voxelize_loop(vertices, faces, origin, h, nx, ny, nz, jx, jy):
    nf = faces.shape[0]
    # pass 1: count crossings
    total = 0
    for f in range(nf):
        ax = vertices[faces[f, 0], 0]
        ay = vertices[faces[f, 0], 1]
        bx = vertices[faces[f, 1], 0]
        by = vertices[faces[f, 1], 1]
        cx = vertices[faces[f, 2], 0]
        cy = vertices[faces[f, 2], 1]
        i0 = max(int(np.ceil((min(ax, bx, cx) - origin[0] - jx) / h - 0.5)), 0)
        i1 = min(int(np.floor((max(ax, bx, cx) - origin[0] - jx) / h - 0.5)), nx - 1)
        j0 = max(int(np.ceil((min(ay, by, cy) - origin[1] - jy) / h - 0.5)), 0)
        j1 = min(int(np.floor((max(ay, by, cy) - origin[1] - jy) / h - 0.5)), ny - 1)
        det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
        if det == 0.0:
            continue
        for i in range(i0, i1 + 1):
            px = origin[0] + (i + 0.5) * h + jx
            for j in range(j0, j1 + 1):
                py = origin[1] + (j + 0.5) * h + jy
                l1 = ((bx - px) * (cy - py) - (cx - px) * (by - py)) / det
                l2 = ((cx - px) * (ay - py) - (ax - px) * (cy - py)) / det
                l3 = 1.0 - l1 - l2
                if l1 >= 0.0 and l2 >= 0.0 and l3 >= 0.0:
                    total += 1
    cols = np.empty(total, dtype=np.int64)
    zs = np.empty(total)
    k = 0
    for f in range(nf):
        a = faces[f, 0]
        b = faces[f, 1]
        c = faces[f, 2]
        ax = vertices[a, 0]
        ay = vertices[a, 1]
        bx = vertices[b, 0]
        by = vertices[b, 1]
        cx = vertices[c, 0]
        cy = vertices[c, 1]
        i0 = max(int(np.ceil((min(ax, bx, cx) - origin[0] - jx) / h - 0.5)), 0)
        i1 = min(int(np.floor((max(ax, bx, cx) - origin[0] - jx) / h - 0.5)), nx - 1)
        j0 = max(int(np.ceil((min(ay, by, cy) - origin[1] - jy) / h - 0.5)), 0)
        j1 = min(int(np.floor((max(ay, by, cy) - origin[1] - jy) / h - 0.5)), ny - 1)
        det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
        if det == 0.0:
            continue
        for i in range(i0, i1 + 1):
            px = origin[0] + (i + 0.5) * h + jx
            for j in range(j0, j1 + 1):
                py = origin[1] + (j + 0.5) * h + jy
                l1 = ((bx - px) * (cy - py) - (cx - px) * (by - py)) / det
                l2 = ((cx - px) * (ay - py) - (ax - px) * (cy - py)) / det
                l3 = 1.0 - l1 - l2
                if l1 >= 0.0 and l2 >= 0.0 and l3 >= 0.0:
                    cols[k] = i * ny + j
                    zs[k] = l1 * vertices[a, 2] + l2 * vertices[b, 2] + l3 * vertices[c, 2]
                    k += 1
    order = np.argsort(cols)
    cols = cols[order]
    zs = zs[order]
    grid = np.zeros((nx, ny, nz), dtype=np.bool_)
    p = 0
    while p < total:
        q = p
        while q < total and cols[q] == cols[p]:
            q += 1
        zz = np.sort(zs[p:q])
        i = cols[p] // ny
        j = cols[p] % ny
        for r in range(0, q - p - 1, 2):
            k0 = max(int(np.ceil((zz[r] - origin[2]) / h - 0.5)), 0)
            k1 = min(int(np.ceil((zz[r + 1] - origin[2]) / h - 0.5)), nz)
            for kk in range(k0, k1):
                grid[i, j, kk] = True
        p = q
    return grid


def parity_voxelize_numpy(vertices, faces, origin, h, nx, ny, nz, jx, jy, chunk=256):
    px = origin[0] + (np.arange(nx) + 0.5) * h + jx
    py = origin[1] + (np.arange(ny) + 0.5) * h + jy
    gx, gy = np.meshgrid(px, py, indexing="ij")
    gx = gx.ravel()
    gy = gy.ravel()
    tri = vertices[faces]
    all_cols = []
    all_z = []
    for start in range(0, len(tri), chunk):
        t = tri[start:start + chunk]
        ax, ay, az = t[:, 0, 0:1], t[:, 0, 1:2], t[:, 0, 2:3]
        bx, by, bz = t[:, 1, 0:1], t[:, 1, 1:2], t[:, 1, 2:3]
        cx, cy, cz = t[:, 2, 0:1], t[:, 2, 1:2], t[:, 2, 2:3]
        det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
        ok = det != 0.0
        det = np.where(ok, det, 1.0)
        l1 = ((bx - gx) * (cy - gy) - (cx - gx) * (by - gy)) / det
        l2 = ((cx - gx) * (ay - gy) - (ax - gx) * (cy - gy)) / det
        l3 = 1.0 - l1 - l2
        hit = (l1 >= 0.0) & (l2 >= 0.0) & (l3 >= 0.0) & ok
        ti, ci = np.nonzero(hit)
        z = l1[ti, ci] * az[ti, 0] + l2[ti, ci] * bz[ti, 0] + l3[ti, ci] * cz[ti, 0]
        all_cols.append(ci)
        all_z.append(z)
    cols = np.concatenate(all_cols)
    zs = np.concatenate(all_z)
    grid = np.zeros((nx, ny, nz), dtype=bool)
    if len(cols) == 0:
        return grid
    order = np.lexsort((zs, cols))
    cols, zs = cols[order], zs[order]
    start = np.searchsorted(cols, cols, side="left")
    rank = np.arange(len(cols)) - start
    count = np.bincount(cols, minlength=nx * ny)
    even = (rank % 2 == 0) & (rank + 1 < count[cols])
    s = np.nonzero(even)[0]
    k0 = np.clip(np.ceil((zs[s] - origin[2]) / h - 0.5).astype(np.int64), 0, nz)
    k1 = np.clip(np.ceil((zs[s + 1] - origin[2]) / h - 0.5).astype(np.int64), 0, nz)
    diff = np.zeros((nx * ny, nz + 1), dtype=np.int64)
    np.add.at(diff, (cols[s], k0), 1)
    np.add.at(diff, (cols[s], k1), -1)
    return (np.cumsum(diff[:, :nz], axis=1) > 0).reshape(nx, ny, nz)


# ---------------------------------------------------------------------------
# serial-chain kinematics (product of exponentials, body form)


@jit
def screw_exp(w, v, theta):
    """Homogeneous transform of a unit-rotation screw (w, v) moved by theta."""
    k = np.zeros((3, 3))
    k[0, 1] = -w[2]
    k[0, 2] = w[1]
    k[1, 0] = w[2]
    k[1, 2] = -w[0]
    k[2, 0] = -w[1]
    k[2, 1] = w[0]
    k2 = k @ k
    s = np.sin(theta)
    c = np.cos(theta)
    out = np.eye(4)
    out[:3, :3] += s * k + (1.0 - c) * k2
    g = theta * np.eye(3) + (1.0 - c) * k + (theta - s) * k2
    out[:3, 3] = g @ v
    return out


@jit
def chain_pose(home, body_screws, q):
    t = home.copy()
    for i in range(body_screws.shape[0]):
        t = t @ screw_exp(body_screws[i, :3], body_screws[i, 3:], q[i])
    return t


@jit
def body_jacobian(body_screws, q):
    n = body_screws.shape[0]
    jb = np.empty((6, n))
    acc = np.eye(4)
    for i in range(n - 1, -1, -1):
        r = np.ascontiguousarray(acc[:3, :3])
        p = acc[:3, 3]
        w = r @ body_screws[i, :3]
        v = r @ body_screws[i, 3:]
        jb[0, i] = w[0]
        jb[1, i] = w[1]
        jb[2, i] = w[2]
        jb[3, i] = p[1] * w[2] - p[2] * w[1] + v[0]
        jb[4, i] = p[2] * w[0] - p[0] * w[2] + v[1]
        jb[5, i] = p[0] * w[1] - p[1] * w[0] + v[2]
        acc = acc @ screw_exp(body_screws[i, :3], body_screws[i, 3:], -q[i])
    return jb


@jit
def manipulability_from_body(jb, rows, length_scale):
    sub = np.empty((rows.shape[0], jb.shape[1]))
    for a in range(rows.shape[0]):
        r = rows[a]
        for c in range(jb.shape[1]):
            val = jb[r, c]
            if r >= 3:
                val = val / length_scale
            sub[a, c] = val
    det = np.linalg.det(sub @ sub.T)
    if det <= 1e-12:
        return 0.0
    return np.sqrt(det)


@jit
def manipulability_and_gradient(body_screws, q, rows, length_scale, eps):
    m0 = manipulability_from_body(body_jacobian(body_screws, q), rows, length_scale)
    n = q.shape[0]
    grad = np.empty(n)
    qp = q.copy()
    for i in range(n):
        qp[i] = q[i] + eps
        mi = manipulability_from_body(body_jacobian(body_screws, qp), rows, length_scale)
        grad[i] = (mi - m0) / eps
        qp[i] = q[i]
    return m0, grad


@jit
def hybrid_jacobian(pose, jb):
    """Rotate a body Jacobian into base axes: rows are (omega, tip velocity)."""
    r = np.ascontiguousarray(pose[:3, :3])
    out = np.empty_like(jb)
    out[:3, :] = r @ np.ascontiguousarray(jb[:3, :])
    out[3:, :] = r @ np.ascontiguousarray(jb[3:, :])
    return out


@jit
def resolve_rates(home, body_screws, q, twist, null_gain, eps, damping, rows, length_scale):
    """Damped least-squares joint rates plus a manipulability-ascent null-space term."""
    pose = chain_pose(home, body_screws, q)
    jb = body_jacobian(body_screws, q)
    j = hybrid_jacobian(pose, jb)
    jt = np.ascontiguousarray(j.T)
    lam2 = damping * damping
    if q.shape[0] >= 6:
        jpinv = jt @ np.linalg.inv(j @ jt + lam2 * np.eye(6))
    else:  # short test rigs: same damped inverse from the joint side
        jpinv = np.linalg.inv(jt @ j + lam2 * np.eye(q.shape[0])) @ jt
    dq = jpinv @ twist
    m = manipulability_from_body(jb, rows, length_scale)
    if null_gain != 0.0:
        _, grad = manipulability_and_gradient(body_screws, q, rows, length_scale, eps)
        proj = np.eye(q.shape[0]) - jpinv @ j
        dq = dq + proj @ (null_gain * grad)
    return dq, m


# voxel coverage: mark the 27-neighborhood of each index where ``ref`` is set


@jit
def cover_dilated_loop(idx, ref, covered):
    nx, ny, nz = ref.shape
    count = 0
    for p in range(idx.shape[0]):
        i0, j0, k0 = idx[p, 0], idx[p, 1], idx[p, 2]
        for i in range(i0 - 1, i0 + 2):
            if i < 0 or i >= nx:
                continue
            for j in range(j0 - 1, j0 + 2):
                if j < 0 or j >= ny:
                    continue
                for k in range(k0 - 1, k0 + 2):
                    if k < 0 or k >= nz:
                        continue
                    if ref[i, j, k] and not covered[i, j, k]:
                        covered[i, j, k] = True
                        count += 1
    return count


_NEIGHBORS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)])


def cover_dilated_numpy(idx, ref, covered):
    shape = np.array(ref.shape)
    # collapse duplicates first; pixels are finer than voxels
    padded = shape + 2
    # indices more than one voxel outside the grid reach nothing
    idx = idx[np.all((idx >= -1) & (idx <= shape), axis=1)]
    base = np.unique(np.ravel_multi_index((idx + 1).T, padded))
    base = np.stack(np.unravel_index(base, padded), axis=1) - 1
    nb = (base[:, None, :] + _NEIGHBORS[None, :, :]).reshape(-1, 3)
    nb = nb[np.all((nb >= 0) & (nb < shape), axis=1)]
    flat = np.unique(np.ravel_multi_index(nb.T, ref.shape))
    new = flat[ref.ravel()[flat] & ~covered.ravel()[flat]]
    covered.ravel()[new] = True
    return len(new)


if NUMBA_ENABLED:
    nearest_indices = nearest_indices_loop
    farthest_point = farthest_point_loop
    plane_segments = plane_segments_loop
    fill_even_odd = fill_even_odd_loop
    parity_voxelize = parity_voxelize_loop
    cover_dilated = cover_dilated_loop
else:
    nearest_indices = nearest_indices_numpy
    farthest_point = farthest_point_numpy
    plane_segments = plane_segments_numpy
    fill_even_odd = fill_even_odd_numpy
    parity_voxelize = parity_voxelize_numpy
    cover_dilated = cover_dilated_numpy
