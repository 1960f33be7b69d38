"""Near-field MUSIC localization over a 2-D Cartesian grid.

The receive response at each grid point follows the piecewise-far-field
model (planar within a subarray, spherical across subarrays), so the
pseudo-spectrum resolves range as well as angle once several subarrays
observe the scene from sufficiently different positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import ArrayGeometry


@dataclass(frozen=True)
class GridSpec:
    """Rectangular search grid: inclusive ranges with fixed steps (meters)."""

    x0: float
    dx: float
    x1: float
    y0: float
    dy: float
    y1: float

    def __post_init__(self) -> None:
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError("grid steps must be positive")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError("grid ranges must be nonempty")

    @property
    def x_axis(self) -> np.ndarray:
        n = int(np.floor((self.x1 - self.x0) / self.dx + 1e-9)) + 1
        return self.x0 + self.dx * np.arange(n)

    @property
    def y_axis(self) -> np.ndarray:
        n = int(np.floor((self.y1 - self.y0) / self.dy + 1e-9)) + 1
        return self.y0 + self.dy * np.arange(n)

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """Parse "x0:dx:x1,y0:dy:y1" (the y part defaults to the x part)."""
        parts = text.split(",")
        if len(parts) == 1:
            parts = [parts[0], parts[0]]
        if len(parts) != 2:
            raise ValueError(f"bad grid spec {text!r}")
        xs = [float(v) for v in parts[0].split(":")]
        ys = [float(v) for v in parts[1].split(":")]
        if len(xs) != 3 or len(ys) != 3:
            raise ValueError(f"bad grid spec {text!r}")
        return cls(x0=xs[0], dx=xs[1], x1=xs[2], y0=ys[0], dy=ys[1], y1=ys[2])


@dataclass
class MusicConfig:
    """Search configuration: grid, snapshot count and model order."""

    grid: GridSpec
    snapshots: int = 256
    assumed_sources: Optional[int] = None  # None: number of scene objects


@dataclass
class MusicResult:
    """Normalized spectrum surface with peak and -3 dB range-lobe width."""

    spectrum: np.ndarray  # shape (len(y_axis), len(x_axis)), max value 1
    x_axis: np.ndarray
    y_axis: np.ndarray
    peak_location: tuple[float, float]
    peak_index: tuple[int, int]
    mainlobe_width: float
    flagged_cells: list[tuple[int, int]] = field(default_factory=list)


def sample_covariance(snapshots: np.ndarray) -> np.ndarray:
    """Hermitian sample covariance (1/L) Y Y^H of column snapshots."""
    if snapshots.ndim != 2 or snapshots.shape[1] < 1:
        raise ValueError("snapshots must be a nonempty N x L matrix")
    cov = snapshots @ snapshots.conj().T / snapshots.shape[1]
    return 0.5 * (cov + cov.conj().T)


def noise_subspace(cov: np.ndarray, assumed_sources: int) -> np.ndarray:
    """Orthonormal basis of the noise subspace: smallest eigenvectors of cov."""
    n = cov.shape[0]
    if not 0 <= assumed_sources < n:
        raise ValueError(f"assumed_sources must lie in [0, {n}), got {assumed_sources}")
    _, vecs = np.linalg.eigh(0.5 * (cov + cov.conj().T))
    return vecs[:, : n - assumed_sources]


def _receive_responses_grid(
    geometry: ArrayGeometry, x: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked receive responses for flat coordinate arrays.

    Returns (G, degenerate) where G has shape (ncells, N) and `degenerate`
    marks cells coinciding with a reference antenna.
    """
    refs = geometry.reference_positions("rx")
    m = geometry.m_antennas
    lam, d = geometry.wavelength, geometry.d
    dx = x[:, None] - refs[None, :, 0]
    dy = y[:, None] - refs[None, :, 1]
    dist = np.hypot(dx, dy)
    degenerate = np.any(dist <= 0.0, axis=1)
    safe = np.where(dist > 0.0, dist, 1.0)
    sin_angle = np.clip(dx / safe, -1.0, 1.0)
    two_pi = 2.0 * np.pi / lam
    phase = -two_pi * (
        dist[:, :, None] + d * sin_angle[:, :, None] * np.arange(m)[None, None, :]
    )
    g = np.exp(1j * phase).reshape(x.size, -1)
    return g, degenerate


def _pseudo_spectrum(
    geometry: ArrayGeometry,
    noise_basis: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    chunk: int = 8192,
) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized 1/||E^H g||^2 values for flat coordinates."""
    values = np.zeros(x.size)
    degenerate = np.zeros(x.size, dtype=bool)
    for start in range(0, x.size, chunk):
        sl = slice(start, min(start + chunk, x.size))
        g, bad = _receive_responses_grid(geometry, x[sl], y[sl])
        proj = g.conj() @ noise_basis
        denom = np.sum(np.abs(proj) ** 2, axis=1) + 1e-18
        vals = 1.0 / denom
        vals[bad] = 0.0
        values[sl] = vals
        degenerate[sl] = bad
    return values, degenerate


def music_spectrum(
    noise_basis: np.ndarray, geometry: ArrayGeometry, grid: GridSpec
) -> MusicResult:
    """Evaluate the MUSIC pseudo-spectrum over the grid and locate the peak.

    The surface is normalized to a maximum of one; ties at the peak break
    toward the lowest linear index (row-major over y then x). Cells that
    coincide with an antenna are zeroed and flagged. The mainlobe width is
    the -3 dB extent of a fine range cut through the peak at its angle.
    """
    xs, ys = grid.x_axis, grid.y_axis
    gx, gy = np.meshgrid(xs, ys)
    values, degenerate = _pseudo_spectrum(geometry, noise_basis, gx.ravel(), gy.ravel())
    peak_flat = int(np.argmax(values))
    peak_val = values[peak_flat]
    if peak_val <= 0.0:
        raise ValueError("spectrum is identically zero on the grid")
    spectrum = (values / peak_val).reshape(len(ys), len(xs))
    iy, ix = divmod(peak_flat, len(xs))
    x_pk, y_pk = float(xs[ix]), float(ys[iy])
    width = _range_lobe_width(noise_basis, geometry, x_pk, y_pk)
    flagged = [
        (int(i // len(xs)), int(i % len(xs))) for i in np.nonzero(degenerate)[0]
    ]
    return MusicResult(
        spectrum=spectrum,
        x_axis=xs,
        y_axis=ys,
        peak_location=(x_pk, y_pk),
        peak_index=(iy, ix),
        mainlobe_width=width,
        flagged_cells=flagged,
    )


def _range_lobe_width(
    noise_basis: np.ndarray,
    geometry: ArrayGeometry,
    x_pk: float,
    y_pk: float,
    extent: float = 5.0,
    step: float = 0.002,
) -> float:
    """-3 dB width of the spectrum along the range axis at the peak angle."""
    r_pk = float(np.hypot(x_pk, y_pk))
    if r_pk == 0.0:
        return 0.0
    theta = np.arctan2(x_pk, y_pk)
    radii = np.arange(max(step, r_pk - extent), r_pk + extent + step, step)
    x = radii * np.sin(theta)
    y = radii * np.cos(theta)
    vals, _ = _pseudo_spectrum(geometry, noise_basis, x, y)
    i_max = int(np.argmax(vals))
    threshold = 10.0 ** (-0.3) * vals[i_max]
    lo = i_max
    while lo > 0 and vals[lo - 1] >= threshold:
        lo -= 1
    hi = i_max
    while hi < vals.size - 1 and vals[hi + 1] >= threshold:
        hi += 1
    r_lo = radii[lo]
    if lo > 0:
        frac = (vals[lo] - threshold) / max(vals[lo] - vals[lo - 1], 1e-300)
        r_lo = radii[lo] - frac * step
    r_hi = radii[hi]
    if hi < vals.size - 1:
        frac = (vals[hi] - threshold) / max(vals[hi] - vals[hi + 1], 1e-300)
        r_hi = radii[hi] + frac * step
    return float(r_hi - r_lo)


def save_spectrum_csv(result: MusicResult, path: str) -> None:
    """Write (x, y, value) rows, y-major to match the stored surface."""
    with open(path, "w") as f:
        f.write("x,y,value\n")
        for iy, y in enumerate(result.y_axis):
            for ix, x in enumerate(result.x_axis):
                f.write(f"{x:.6f},{y:.6f},{result.spectrum[iy, ix]:.9e}\n")


def save_spectrum_grid(result: MusicResult, path: str) -> None:
    """Compact binary dump: int64 nx, ny; float64 x0, y0, dx, dy; row-major data."""
    nx, ny = result.x_axis.size, result.y_axis.size
    dx = result.x_axis[1] - result.x_axis[0] if nx > 1 else 0.0
    dy = result.y_axis[1] - result.y_axis[0] if ny > 1 else 0.0
    with open(path, "wb") as f:
        f.write(struct.pack("<qq", nx, ny))
        f.write(
            struct.pack("<dddd", result.x_axis[0], result.y_axis[0], float(dx), float(dy))
        )
        result.spectrum.astype("<f8").tofile(f)


def load_spectrum_grid(path: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a binary grid dump; returns (x_axis, y_axis, spectrum)."""
    with open(path, "rb") as f:
        nx, ny = struct.unpack("<qq", f.read(16))
        x0, y0, dx, dy = struct.unpack("<dddd", f.read(32))
        data = np.fromfile(f, dtype="<f8", count=nx * ny).reshape(ny, nx)
    return x0 + dx * np.arange(nx), y0 + dy * np.arange(ny), data
