"""Deformation-field algebra and its reverse-mode adjoints.

The deformation is parameterized by per-axis spatial gradients: a raw field is
squashed into (0, 2) by a scaled sigmoid and integrated by cumulative sum, so a
zero field maps to the identity transformation and positive gradients keep
warped voxels ordered along every axis.  Fields carry absolute sample
coordinates in voxel units; warping is backward trilinear sampling with
coordinates clamped to the volume extent.

Every differentiable stage has an exact vector-Jacobian product (``vjp_*``)
used by the optimizer; the adjoints treat clamped sample coordinates as
constant (zero gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .volume import LabelVolume, Volume

# Numeric bounds keeping the squashed gradient inside the open interval (0, 2)
# even when the sigmoid saturates in double precision.
_G_MIN = np.nextafter(0.0, 1.0)
_G_MAX = np.nextafter(2.0, 0.0)


@dataclass
class PreActivationField:
    """Unbounded 3-channel parameter field, possibly on a coarse control grid.

    ``values`` has shape (3, mx, my, mz); control point j along an axis sits at
    image coordinate j*stride.  Control dims must equal ceil(image_dim/stride).
    """

    values: np.ndarray
    stride: int = 1

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ValueError(f"field values must have shape (3, mx, my, mz), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field values must be finite")
        if int(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        self.values = arr
        self.stride = int(self.stride)

    @property
    def control_dims(self) -> tuple[int, int, int]:
        return self.values.shape[1:]


@dataclass
class GradientField:
    """Per-axis deformation gradient, every value strictly inside (0, 2)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ValueError(f"gradient field must have shape (3, nx, ny, nz), got {arr.shape}")
        if not (np.all(arr > 0.0) and np.all(arr < 2.0)):
            raise ValueError("gradient values must lie strictly inside (0, 2)")
        self.values = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape[1:]


@dataclass
class DeformationField:
    """Absolute sample coordinates in voxel units, shape (3, nx, ny, nz)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ValueError(f"deformation field must have shape (3, nx, ny, nz), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("deformation coordinates must be finite")
        self.values = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape[1:]


def control_dims_for(image_dims, stride: int) -> tuple[int, int, int]:
    """Control-grid shape for an image: ceil division per axis."""
    return tuple(-(-int(n) // int(stride)) for n in image_dims)


# ---------------------------------------------------------------------------
# trilinear sampling core


def _line_setup(coords: np.ndarray, size: int):
    """Clamp coordinates to [0, size-1] and split into cell index + offset."""
    s = np.clip(coords, 0.0, float(size - 1))
    i0 = np.floor(s).astype(np.intp)
    np.clip(i0, 0, max(size - 2, 0), out=i0)
    f = s - i0
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, f


def _sample_trilinear(values: np.ndarray, cx, cy, cz) -> np.ndarray:
    """Sample (C, nx, ny, nz) channel data at clamped fractional coordinates."""
    nx, ny, nz = values.shape[1:]
    ix0, ix1, fx = _line_setup(cx, nx)
    iy0, iy1, fy = _line_setup(cy, ny)
    iz0, iz1, fz = _line_setup(cz, nz)
    flat = values.reshape(values.shape[0], -1)
    out = None
    for ia, wa in ((ix0, 1.0 - fx), (ix1, fx)):
        for ib, wb in ((iy0, 1.0 - fy), (iy1, fy)):
            wab = wa * wb
            base = ia * ny + ib
            for ic, wc in ((iz0, 1.0 - fz), (iz1, fz)):
                term = (wab * wc) * flat[:, base * nz + ic]
                out = term if out is None else out + term
    return out


def _sample_vjp_fused(values: np.ndarray | None, shape, coords,
                      upstream: np.ndarray,
                      want_values_grad: bool, want_coords_grad: bool):
    """One 8-corner sweep for both adjoints of trilinear sampling.

    Returns (values_grad, coords_grad); either entry is None when not
    requested (``values`` itself is only needed for the coordinate gradient).
    The coordinate gradient is zero wherever the clamp to [0, n-1] is active.
    """
    nx, ny, nz = shape[1:]
    ix0, ix1, fx = _line_setup(coords[0], nx)
    iy0, iy1, fy = _line_setup(coords[1], ny)
    iz0, iz1, fz = _line_setup(coords[2], nz)
    flat_values = values.reshape(shape[0], -1) if values is not None else None
    out_shape = upstream.shape[1:]
    if want_coords_grad:
        gx = np.zeros(out_shape)
        gy = np.zeros(out_shape)
        gz = np.zeros(out_shape)
    if want_values_grad:
        idx_parts = []
        w_parts = []
    for ia, wa, sa in ((ix0, 1.0 - fx, -1.0), (ix1, fx, 1.0)):
        for ib, wb, sb in ((iy0, 1.0 - fy, -1.0), (iy1, fy, 1.0)):
            wab = wa * wb
            base = ia * ny + ib
            for ic, wc, sc in ((iz0, 1.0 - fz, -1.0), (iz1, fz, 1.0)):
                idx = base * nz + ic
                if want_coords_grad:
                    dotted = (upstream * flat_values[:, idx]).sum(axis=0)
                    gx += (sa * (wb * wc)) * dotted
                    gy += (sb * (wa * wc)) * dotted
                    gz += (sc * wab) * dotted
                if want_values_grad:
                    idx_parts.append(np.broadcast_to(idx, out_shape).ravel())
                    w_parts.append(np.broadcast_to(wab * wc, out_shape).ravel())
    values_grad = None
    if want_values_grad:
        all_idx = np.concatenate(idx_parts)
        all_w = np.concatenate(w_parts)
        n_vox = nx * ny * nz
        values_grad = np.empty(shape)
        flat_up = upstream.reshape(shape[0], -1)
        for ch in range(shape[0]):
            values_grad[ch] = np.bincount(
                all_idx, weights=all_w * np.tile(flat_up[ch], 8), minlength=n_vox
            ).reshape(nx, ny, nz)
    coords_grad = None
    if want_coords_grad:
        dims = (nx, ny, nz)
        coords_grad = np.stack((gx, gy, gz))
        for axis in range(3):
            inside = (coords[axis] >= 0.0) & (coords[axis] <= dims[axis] - 1.0)
            coords_grad[axis] *= inside
    return values_grad, coords_grad


def _sample_vjp_coords(values: np.ndarray, coords: np.ndarray,
                       upstream: np.ndarray) -> np.ndarray:
    """Gradient of a trilinear sample w.r.t. the three sample coordinates."""
    return _sample_vjp_fused(values, values.shape, coords, upstream, False, True)[1]


def _sample_vjp_values(shape, coords, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of trilinear sampling w.r.t. the sampled channel data."""
    return _sample_vjp_fused(None, shape, coords, upstream, True, False)[0]


def _grid_coords(image_dims, stride: int):
    """Broadcastable control-space coordinates of every image voxel."""
    nx, ny, nz = image_dims
    s = float(stride)
    cx = (np.arange(nx, dtype=np.float64) / s)[:, None, None]
    cy = (np.arange(ny, dtype=np.float64) / s)[None, :, None]
    cz = (np.arange(nz, dtype=np.float64) / s)[None, None, :]
    return cx, cy, cz


# ---------------------------------------------------------------------------
# forward stages


def upsample(delta: PreActivationField, image_dims) -> PreActivationField:
    """Trilinearly interpolate a coarse control field to full resolution.

    Exact at control points; the trailing partial cell (when stride does not
    divide the image dims) extends the last control value.
    """
    image_dims = tuple(int(n) for n in image_dims)
    expected = control_dims_for(image_dims, delta.stride)
    if delta.control_dims != expected:
        raise ValueError(
            f"control dims {delta.control_dims} inconsistent with image dims "
            f"{image_dims} at stride {delta.stride} (expected {expected})"
        )
    if delta.stride == 1:
        return PreActivationField(delta.values, stride=1)
    cx, cy, cz = _grid_coords(image_dims, delta.stride)
    full = _sample_trilinear(delta.values, cx, cy, cz)
    return PreActivationField(full, stride=1)


def activate(x: PreActivationField) -> GradientField:
    """Squash a full-resolution field into (0, 2): g = 2*sigmoid(x)."""
    if x.stride != 1:
        raise ValueError("activate expects a full-resolution field (stride 1)")
    g = 2.0 * expit(x.values)
    np.clip(g, _G_MIN, _G_MAX, out=g)
    return GradientField(g)


def integrate(g: GradientField) -> DeformationField:
    """Cumulative sum of per-axis gradients; all-ones input gives the identity.

    Phi_x(i, y, z) = sum_{k<=i} g_x(k, y, z) - 1, and analogously per axis.
    """
    phi = np.empty_like(g.values)
    for axis in range(3):
        phi[axis] = np.cumsum(g.values[axis], axis=axis)
    phi -= 1.0
    return DeformationField(phi)


def identity_field(dims) -> DeformationField:
    """The identity transformation Phi(p) = p."""
    nx, ny, nz = (int(n) for n in dims)
    grids = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    return DeformationField(np.stack(grids))


def warp(img: Volume, phi: DeformationField) -> Volume:
    """Backward trilinear warp: out(p) = img(Phi(p)), coordinates clamped."""
    if img.dims != phi.dims:
        raise ValueError(f"image dims {img.dims} != field dims {phi.dims}")
    out = _sample_trilinear(img.data, phi.values[0], phi.values[1], phi.values[2])
    return Volume(out, spacing_mm=img.spacing_mm, dtype=img.dtype)


def warp_labels(l: LabelVolume, phi: DeformationField) -> LabelVolume:
    """Nearest-neighbor warp of a label volume; .5 ties round toward -inf."""
    if l.dims != phi.dims:
        raise ValueError(f"label dims {l.dims} != field dims {phi.dims}")
    idx = []
    for axis, n in enumerate(l.dims):
        s = np.clip(phi.values[axis], 0.0, float(n - 1))
        nearest = np.ceil(s - 0.5).astype(np.intp)
        idx.append(np.clip(nearest, 0, n - 1))
    out = l.labels[idx[0], idx[1], idx[2]]
    return LabelVolume(out, spacing_mm=l.spacing_mm, label_names=l.label_names)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """Composition (outer o inner)(p) = outer(inner(p)) by trilinear sampling."""
    if outer.dims != inner.dims:
        raise ValueError(f"field dims mismatch: {outer.dims} vs {inner.dims}")
    vals = _sample_trilinear(
        outer.values, inner.values[0], inner.values[1], inner.values[2]
    )
    return DeformationField(vals)


# ---------------------------------------------------------------------------
# finite differences (voxel units): central interior, one-sided at borders


def _sl(axis: int, s: slice) -> tuple:
    idx = [slice(None)] * 3
    idx[axis] = s
    return tuple(idx)


def axis_gradient(f: np.ndarray, axis: int) -> np.ndarray:
    """d f / d axis with central differences interior, one-sided at borders."""
    out = np.empty_like(f)
    out[_sl(axis, slice(1, -1))] = (
        f[_sl(axis, slice(2, None))] - f[_sl(axis, slice(None, -2))]
    ) / 2.0
    out[_sl(axis, slice(0, 1))] = f[_sl(axis, slice(1, 2))] - f[_sl(axis, slice(0, 1))]
    out[_sl(axis, slice(-1, None))] = (
        f[_sl(axis, slice(-1, None))] - f[_sl(axis, slice(-2, -1))]
    )
    return out


def axis_gradient_adjoint(u: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of axis_gradient as a linear map."""
    g = np.zeros_like(u)
    g[_sl(axis, slice(2, None))] += u[_sl(axis, slice(1, -1))] / 2.0
    g[_sl(axis, slice(None, -2))] -= u[_sl(axis, slice(1, -1))] / 2.0
    g[_sl(axis, slice(0, 1))] -= u[_sl(axis, slice(0, 1))]
    g[_sl(axis, slice(1, 2))] += u[_sl(axis, slice(0, 1))]
    g[_sl(axis, slice(-1, None))] += u[_sl(axis, slice(-1, None))]
    g[_sl(axis, slice(-2, -1))] -= u[_sl(axis, slice(-1, None))]
    return g


def jacobian_matrix(phi: DeformationField) -> np.ndarray:
    """All nine partials d Phi_a / d axis_b, shape (3, 3, nx, ny, nz)."""
    if min(phi.dims) < 3:
        raise ValueError(f"jacobian requires dims >= 3 per axis, got {phi.dims}")
    d = np.empty((3, 3) + phi.dims)
    for a in range(3):
        for b in range(3):
            d[a, b] = axis_gradient(phi.values[a], b)
    return d


def det3x3(d: np.ndarray) -> np.ndarray:
    """First-row cofactor expansion of per-voxel 3x3 matrices."""
    return (
        d[0, 0] * (d[1, 1] * d[2, 2] - d[1, 2] * d[2, 1])
        - d[0, 1] * (d[1, 0] * d[2, 2] - d[1, 2] * d[2, 0])
        + d[0, 2] * (d[1, 0] * d[2, 1] - d[1, 1] * d[2, 0])
    )


def cofactor_matrix(d: np.ndarray) -> np.ndarray:
    """Cofactor matrix C with d det / d d[a, b] = C[a, b]."""
    c = np.empty_like(d)
    c[0, 0] = d[1, 1] * d[2, 2] - d[1, 2] * d[2, 1]
    c[0, 1] = -(d[1, 0] * d[2, 2] - d[1, 2] * d[2, 0])
    c[0, 2] = d[1, 0] * d[2, 1] - d[1, 1] * d[2, 0]
    c[1, 0] = -(d[0, 1] * d[2, 2] - d[0, 2] * d[2, 1])
    c[1, 1] = d[0, 0] * d[2, 2] - d[0, 2] * d[2, 0]
    c[1, 2] = -(d[0, 0] * d[2, 1] - d[0, 1] * d[2, 0])
    c[2, 0] = d[0, 1] * d[1, 2] - d[0, 2] * d[1, 1]
    c[2, 1] = -(d[0, 0] * d[1, 2] - d[0, 2] * d[1, 0])
    c[2, 2] = d[0, 0] * d[1, 1] - d[0, 1] * d[1, 0]
    return c


def jacobian_det(phi: DeformationField) -> Volume:
    """Determinant of the finite-difference Jacobian, as a 1-channel Volume."""
    det = det3x3(jacobian_matrix(phi))
    return Volume(det[np.newaxis], dtype="f32")


def jacobian_det_vjp(phi: DeformationField, upstream_det: np.ndarray) -> np.ndarray:
    """Backpropagate a per-voxel determinant gradient to the field coordinates."""
    d = jacobian_matrix(phi)
    c = cofactor_matrix(d)
    grad = np.zeros_like(phi.values)
    for a in range(3):
        for b in range(3):
            grad[a] += axis_gradient_adjoint(upstream_det * c[a, b], b)
    return grad


# ---------------------------------------------------------------------------
# vector-Jacobian products of the forward stages


def vjp_activate(x_values: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of activate: 2*sigma(x)*(1-sigma(x)) * upstream."""
    s = expit(x_values)
    return (2.0 * s * (1.0 - s)) * upstream


def vjp_integrate(upstream: np.ndarray) -> np.ndarray:
    """Adjoint of the inclusive prefix sum: per-axis reverse suffix sum."""
    grad = np.empty_like(upstream)
    for axis in range(3):
        flipped = np.flip(upstream[axis], axis=axis)
        grad[axis] = np.flip(np.cumsum(flipped, axis=axis), axis=axis)
    return grad


def vjp_warp(img: Volume, phi: DeformationField, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of warp w.r.t. the deformation coordinates."""
    return _sample_vjp_coords(img.data, phi.values, upstream)


def vjp_warp_image(phi: DeformationField, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of warp w.r.t. the sampled image data."""
    return _sample_vjp_values(upstream.shape, phi.values, upstream)


def vjp_warp_both(img: Volume, phi: DeformationField,
                  upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of warp w.r.t. (image data, deformation coordinates) in one pass."""
    return _sample_vjp_fused(img.data, img.data.shape, phi.values, upstream,
                             True, True)


def vjp_compose(outer: DeformationField, inner: DeformationField,
                upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of compose w.r.t. (outer, inner) coordinate fields."""
    return _sample_vjp_fused(outer.values, outer.values.shape, inner.values,
                             upstream, True, True)


def vjp_upsample(upstream: np.ndarray, stride: int, control_dims) -> np.ndarray:
    """Adjoint of upsample: scatter full-resolution gradients to control points."""
    if stride == 1:
        return upstream.copy()
    image_dims = upstream.shape[1:]
    cx, cy, cz = _grid_coords(image_dims, stride)
    coords = (
        np.broadcast_to(cx, image_dims),
        np.broadcast_to(cy, image_dims),
        np.broadcast_to(cz, image_dims),
    )
    return _sample_vjp_values((3,) + tuple(control_dims), coords, upstream)


# ---------------------------------------------------------------------------
# serialization helpers


def field_to_volume(phi: DeformationField,
                    spacing_mm=(1.0, 1.0, 1.0)) -> Volume:
    """Pack coordinates into a 3-channel f32 Volume for file output."""
    return Volume(phi.values, spacing_mm=spacing_mm, dtype="f32")


def volume_to_field(v: Volume) -> DeformationField:
    """Interpret a 3-channel Volume as absolute voxel-unit coordinates."""
    if v.channels != 3:
        raise ValueError(f"deformation volume must have 3 channels, got {v.channels}")
    return DeformationField(v.data)
