"""Trilinear/nearest resampling kernels shared by augmentation and preprocessing.

Coordinate convention is align-corners: output index j maps to input coordinate
j * (n_in - 1) / (n_out - 1), so same-size resizes are exact identities.
Out-of-volume samples are zero.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def resize_to(volume: np.ndarray, out_shape: tuple[int, int, int], order: int = 1) -> np.ndarray:
    """Resample ``volume`` to ``out_shape``; order 1 = trilinear, 0 = nearest."""
    volume = np.asarray(volume, dtype=np.float32)
    if tuple(volume.shape) == tuple(out_shape):
        return volume.copy()
    axes = []
    for n_in, n_out in zip(volume.shape, out_shape):
        if n_out == 1:
            axes.append(np.full(1, (n_in - 1) / 2.0))
        else:
            axes.append(np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1))
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    out = ndimage.map_coordinates(volume, coords, order=order, mode="constant", cval=0.0)
    return out.reshape(out_shape).astype(np.float32)


def rotation_matrix(angles_deg: np.ndarray) -> np.ndarray:
    """Rotation about the three volume axes, composed Rx @ Ry @ Rz."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def apply_affine(volume: np.ndarray, angles_deg=(0.0, 0.0, 0.0),
                 translation=(0.0, 0.0, 0.0), order: int = 1) -> np.ndarray:
    """Rotate about the volume center, then translate. Zero padding outside the
    field of view. ``order=0`` gives nearest-neighbor resampling."""
    volume = np.asarray(volume, dtype=np.float32)
    rot = rotation_matrix(angles_deg)
    center = (np.asarray(volume.shape, dtype=np.float64) - 1) / 2.0
    t = np.asarray(translation, dtype=np.float64)
    # output voxel o samples input at R^T (o - c - t) + c
    matrix = rot.T
    offset = center - matrix @ (center + t)
    out = ndimage.affine_transform(volume, matrix, offset=offset, order=order,
                                   mode="constant", cval=0.0)
    return out.astype(np.float32)
