"""Independent brute-force oracles used by the unit and acceptance suites.

These deliberately avoid the library's vectorized code paths: scalar loops
with explicit stencils for the determinant, all-pairs distances for surface
metrics, exactly-rounded summation for aggregates.
"""

import math

import numpy as np

from gradreg.deform import DeformationField


def jacobian_det_oracle(phi: DeformationField) -> np.ndarray:
    """Scalar-loop cofactor expansion over explicit difference stencils."""
    nx, ny, nz = phi.dims
    vals = phi.values
    out = np.empty((nx, ny, nz))

    def diff(a, axis, x, y, z):
        p = [x, y, z]
        n = phi.dims[axis]
        if p[axis] == 0:
            hi = p.copy()
            hi[axis] = 1
            return vals[(a,) + tuple(hi)] - vals[(a,) + tuple(p)]
        if p[axis] == n - 1:
            lo = p.copy()
            lo[axis] = n - 2
            return vals[(a,) + tuple(p)] - vals[(a,) + tuple(lo)]
        hi = p.copy()
        hi[axis] += 1
        lo = p.copy()
        lo[axis] -= 1
        return (vals[(a,) + tuple(hi)] - vals[(a,) + tuple(lo)]) / 2.0

    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                d = [[diff(a, b, x, y, z) for b in range(3)] for a in range(3)]
                out[x, y, z] = (
                    d[0][0] * (d[1][1] * d[2][2] - d[1][2] * d[2][1])
                    - d[0][1] * (d[1][0] * d[2][2] - d[1][2] * d[2][0])
                    + d[0][2] * (d[1][0] * d[2][1] - d[1][1] * d[2][0])
                )
    return out


def hinge_jac_oracle(phi_ab: DeformationField, phi_ba: DeformationField) -> float:
    """Accumulate max(0, -det)/N over both fields from the determinant oracle."""
    n = float(np.prod(phi_ab.dims))
    acc = 0.0
    for phi in (phi_ab, phi_ba):
        det = jacobian_det_oracle(phi)
        for value in det.ravel():
            acc += max(0.0, -value) / n
    return acc


def boundary_voxels_oracle(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with an unlabeled 6-neighbor or on a volume face."""
    pts = []
    dims = mask.shape
    for p in np.argwhere(mask):
        x, y, z = p
        if (x in (0, dims[0] - 1) or y in (0, dims[1] - 1)
                or z in (0, dims[2] - 1)):
            pts.append(p)
            continue
        for axis in range(3):
            for d in (-1, 1):
                q = p.copy()
                q[axis] += d
                if not mask[tuple(q)]:
                    pts.append(p)
                    break
            else:
                continue
            break
    return np.asarray(pts, dtype=np.float64)


def hd95_oracle(a_labels: np.ndarray, b_labels: np.ndarray, label: int,
                spacing) -> float:
    """All-pairs distance-matrix version of the 95th-percentile surface distance."""
    scale = np.asarray(spacing, dtype=np.float64)
    pa = boundary_voxels_oracle(a_labels == label) * scale
    pb = boundary_voxels_oracle(b_labels == label) * scale

    dmat = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))

    def directed(dists):
        ordered = np.sort(dists)
        rank = math.ceil(0.95 * len(ordered))
        return float(ordered[rank - 1])

    return max(directed(dmat.min(axis=1)), directed(dmat.min(axis=0)))


def dice_oracle(a_labels: np.ndarray, b_labels: np.ndarray, label: int) -> float:
    na = nb = inter = 0
    for idx in np.ndindex(a_labels.shape):
        pa = a_labels[idx] == label
        pb = b_labels[idx] == label
        na += pa
        nb += pb
        inter += pa and pb
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * inter / (na + nb)


def dice30_oracle(scores) -> float:
    ordered = sorted(float(s) for s in scores)
    k = math.ceil(0.3 * len(ordered))
    return math.fsum(ordered[:k]) / k


def sdlogj_oracle(phi: DeformationField) -> float:
    det = jacobian_det_oracle(phi)
    logs = [math.log(max(d, 1e-9)) for d in det.ravel()]
    mean = math.fsum(logs) / len(logs)
    var = math.fsum((x - mean) ** 2 for x in logs) / len(logs)
    return math.sqrt(var)
