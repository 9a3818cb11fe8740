"""Synthetic truth images and smooth inhomogeneity fields for self-contained runs."""
from __future__ import annotations

import numpy as np

from .geometry import GridSpec, diff_x1
from .image_model import ImageVolume


def _centers(grid):
    axes = [grid.cell_centers(a) for a in range(grid.dim)]
    return np.meshgrid(*axes, indexing="ij")


def _unit(grid, coords):
    """Coordinates rescaled to [0, 1] over the domain."""
    return [(c - o) / e for c, o, e in zip(coords, grid.origin, grid.extent)]


def _window(u, power_x1=1.0, power_perp=1.0):
    """Sine window vanishing on the boundary, steeper along the phase-encoding axis.

    A fast falloff along axis 1 keeps the compressed edge of a distorted
    image away from the last cells, where the model is least accurate.
    """
    w = np.sin(np.pi * np.clip(u[0], 0, 1)) ** power_x1
    for ui in u[1:]:
        w = w * np.sin(np.pi * np.clip(ui, 0, 1)) ** power_perp
    return w


def gaussian_blobs(grid: GridSpec, amplitude: float = 1000.0) -> ImageVolume:
    """A few overlapping anisotropic Gaussians tapered to zero at the boundary."""
    u = _unit(grid, _centers(grid))
    if grid.dim == 2:
        blobs = [((0.5, 0.5), (0.22, 0.16), 1.0), ((0.35, 0.62), (0.08, 0.11), 0.6),
                 ((0.66, 0.40), (0.10, 0.06), 0.8), ((0.55, 0.28), (0.05, 0.09), 0.5)]
    else:
        blobs = [((0.5, 0.5, 0.5), (0.22, 0.16, 0.2), 1.0), ((0.35, 0.62, 0.45), (0.08, 0.11, 0.1), 0.6),
                 ((0.66, 0.40, 0.6), (0.10, 0.06, 0.09), 0.8), ((0.55, 0.28, 0.35), (0.05, 0.09, 0.08), 0.5)]
    img = np.zeros(grid.m)
    for center, width, weight in blobs:
        q = sum(((ui - c) / w) ** 2 for ui, c, w in zip(u, center, width))
        img += weight * np.exp(-0.5 * q)
    return ImageVolume(grid, amplitude * img * _window(u, 0.5, 0.5))


def smooth_checkerboard(grid: GridSpec, amplitude: float = 1000.0, tiles: int = 4) -> ImageVolume:
    """Sinusoidal checker pattern under a smooth window vanishing at the boundary."""
    u = _unit(grid, _centers(grid))
    pattern = np.ones(grid.m)
    for ui in u:
        pattern = pattern * np.cos(np.pi * tiles * ui)
    return ImageVolume(grid, amplitude * _window(u, 2.0, 0.5) * (1.0 + 0.5 * pattern))


def textured_head(grid: GridSpec, amplitude: float = 1000.0) -> ImageVolume:
    """Blobs on top of a checker-textured ellipsoid; the default phantom."""
    blob = gaussian_blobs(grid, amplitude).data
    checker = smooth_checkerboard(grid, amplitude).data
    return ImageVolume(grid, 0.6 * blob + 0.6 * checker)


PHANTOMS = {
    "blobs": gaussian_blobs,
    "checker": smooth_checkerboard,
    "head": textured_head,
}


def make_phantom(name: str, grid: GridSpec, amplitude: float = 1000.0) -> ImageVolume:
    try:
        return PHANTOMS[name](grid, amplitude)
    except KeyError:
        raise ValueError(f"unknown phantom {name!r}; choose from {sorted(PHANTOMS)}") from None


def bump_field(grid: GridSpec, max_slope: float = 0.5) -> np.ndarray:
    """Product of sine half-waves on the face grid, scaled so ``max|D1 b| == max_slope``."""
    x1 = (grid.face_coords() - grid.origin[0]) / grid.extent[0]
    parts = [np.sin(np.pi * x1)]
    for a in range(1, grid.dim):
        parts.append(np.sin(np.pi * (grid.cell_centers(a) - grid.origin[a]) / grid.extent[a]))
    b = parts[0].reshape((-1,) + (1,) * (grid.dim - 1))
    for a in range(1, grid.dim):
        shape = [1] * grid.dim
        shape[a] = -1
        b = b * parts[a].reshape(shape)
    slope = np.max(np.abs(diff_x1(b, grid)))
    return b * (max_slope / slope)
