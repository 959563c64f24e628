"""Geodesic shooting on bandlimited velocity fields, flows, warping and Jacobians.

All dynamics run in voxel units. Spectral arrays may carry leading batch
axes; operators built from an array of ``alpha`` values broadcast over them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fourier_field import (
    FrequencyLattice,
    OperatorCoeffs,
    padded_transform,
    spectral_to_spatial,
)
from .kernels import sample


class DivergenceError(FloatingPointError):
    def __init__(self, what, step):
        super().__init__(f"{what} produced non-finite values at step {step}")
        self.step = step


class GridMismatchError(ValueError):
    pass


@dataclass
class Image:
    intensities: np.ndarray
    spacing: tuple = None

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=float)
        if self.spacing is None:
            self.spacing = (1.0,) * self.intensities.ndim
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def full_dims(self):
        return self.intensities.shape[-len(self.spacing):]


@dataclass
class DeformationField:
    """Position map ``phi(x)`` in voxel coordinates, shape ``(..., d, *full_dims)``."""

    map: np.ndarray
    spacing: tuple = None

    def __post_init__(self):
        self.map = np.asarray(self.map, dtype=float)
        d = self.d
        if self.spacing is None:
            self.spacing = (1.0,) * d
        if self.map.shape[-d - 1] != d:
            raise ValueError(f"position map of shape {self.map.shape} is not {d}-D")

    @property
    def d(self):
        return len(self.spacing) if self.spacing is not None else _guess_d(self.map)

    @property
    def full_dims(self):
        return self.map.shape[-self.d:]

    @classmethod
    def identity(cls, full_dims, spacing=None):
        return cls(identity_grid(full_dims), spacing)

    @property
    def displacement(self):
        return self.map - identity_grid(self.full_dims)


def _guess_d(arr):
    for d in (2, 3):
        if arr.ndim >= d + 1 and arr.shape[-d - 1] == d:
            return d
    raise ValueError(f"cannot infer dimension of position map {arr.shape}")


def identity_grid(full_dims):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in full_dims], indexing="ij"))


def jacobian_symbol(lattice: FrequencyLattice) -> np.ndarray:
    """Central-difference derivative multipliers ``i sin(2 pi xi_j / N_j)``, shape ``(d, *dims)``."""
    out = np.empty((lattice.d,) + lattice.dims, dtype=complex)
    for j, (xi, big) in enumerate(zip(lattice.frequencies, lattice.full_dims)):
        out[j] = np.broadcast_to(1j * np.sin(2.0 * np.pi * xi / big), lattice.dims)
    return out


def metric_energy(v, op: OperatorCoeffs):
    """``<Lv, Lv>`` summed over components and the full lattice (per batch item)."""
    d = op.lattice.d
    return np.sum(op.L**2 * np.abs(v) ** 2, axis=tuple(range(-d - 1, 0)))


def momentum_energy(v, op: OperatorCoeffs):
    """``<Lv, v>``, the quantity EPDiff conserves exactly in continuous time."""
    d = op.lattice.d
    return np.sum(op.L * np.abs(v) ** 2, axis=tuple(range(-d - 1, 0)))


class _Shooter:
    """Precomputed transforms and symbols for one lattice."""

    def __init__(self, lattice: FrequencyLattice):
        self.lattice = lattice
        self.d = d = lattice.d
        self.tr = padded_transform(lattice)
        D = jacobian_symbol(lattice)
        self.D = D
        self.D_row = D.reshape((d, 1) + lattice.dims)  # D_i for Dv[i, j] = D_i v_j
        self.D_col = D.reshape((1, d) + lattice.dims)  # D_j for Du[i, j] = D_j u_i

    def grad_v(self, v):
        """``Dv[..., i, j] = D_i v_j``."""
        return self.D_row * np.expand_dims(v, -self.d - 2)

    def grad_u(self, u):
        """``Du[..., i, j] = D_j u_i`` (Jacobian of a displacement)."""
        return self.D_col * np.expand_dims(u, -self.d - 1)

    def epdiff_rhs(self, v, op):
        d, tr = self.d, self.tr
        m = op.L * v
        V = tr.to_spatial(v)
        Mm = tr.to_spatial(m)
        DV = tr.to_spatial(self.grad_v(v))
        # (Dv)^T m and the divergence of m (x) v
        t1 = np.sum(DV * np.expand_dims(Mm, -d - 2), axis=-d - 1)
        prod = np.expand_dims(Mm, -d - 1) * np.expand_dims(V, -d - 2)
        t2 = np.sum(self.D_col * tr.to_spectral(prod), axis=-d - 1)
        return -op.K * (tr.to_spectral(t1) + t2)

    def flow_rhs(self, u, v, V=None):
        d, tr = self.d, self.tr
        if V is None:
            V = tr.to_spatial(v)
        DU = tr.to_spatial(self.grad_u(u))
        return -v - tr.to_spectral(np.sum(DU * np.expand_dims(V, -d - 2), axis=-d - 1))


_shooters: dict = {}


def shooter(lattice) -> _Shooter:
    s = _shooters.get(lattice)
    if s is None:
        s = _shooters[lattice] = _Shooter(lattice)
    return s


def epdiff_rhs(v, op: OperatorCoeffs):
    """``-K[(Dv)^T star Lv + div(Lv (x) v)]``."""
    return shooter(op.lattice).epdiff_rhs(v, op)


@dataclass
class VelocityTrajectory:
    """EPDiff solution at ``t = 0, 1/T, ..., 1``.

    ``stages[n]`` keeps the four RK4 stage inputs of step ``n`` so flows
    integrated against this trajectory reproduce a joint RK4 solve.
    """

    steps: np.ndarray
    stages: np.ndarray
    op: OperatorCoeffs

    @property
    def T(self):
        return self.steps.shape[0] - 1

    @property
    def dt(self):
        return 1.0 / self.T


def _finite(x):
    return bool(np.all(np.isfinite(x)))


def integrate_epdiff(v0, op: OperatorCoeffs, T: int = 10) -> VelocityTrajectory:
    if T < 1:
        raise ValueError("T must be >= 1")
    op.lattice.check(v0, "initial velocity")
    sh = shooter(op.lattice)
    h = 1.0 / T
    v = np.asarray(v0, dtype=complex)
    steps = [v]
    stages = []
    for n in range(T):
        k1 = sh.epdiff_rhs(v, op)
        s2 = v + 0.5 * h * k1
        k2 = sh.epdiff_rhs(s2, op)
        s3 = v + 0.5 * h * k2
        k3 = sh.epdiff_rhs(s3, op)
        s4 = v + h * k3
        k4 = sh.epdiff_rhs(s4, op)
        stages.append(np.stack([v, s2, s3, s4]))
        v = v + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not _finite(v):
            raise DivergenceError("EPDiff integration", n + 1)
        steps.append(v)
    return VelocityTrajectory(np.stack(steps), np.stack(stages), op)


def integrate_flow(traj: VelocityTrajectory, return_path=False):
    """Displacement ``u(1)`` of ``phi = Id + u`` from ``du/dt = -v - Du v``, ``u(0) = 0``."""
    sh = shooter(traj.op.lattice)
    h = traj.dt
    u = np.zeros_like(traj.steps[0])
    path = [u]
    for n in range(traj.T):
        s1, s2, s3, s4 = traj.stages[n]
        k1 = sh.flow_rhs(u, s1)
        k2 = sh.flow_rhs(u + 0.5 * h * k1, s2)
        k3 = sh.flow_rhs(u + 0.5 * h * k2, s3)
        k4 = sh.flow_rhs(u + h * k3, s4)
        u = u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not _finite(u):
            raise DivergenceError("flow integration", n + 1)
        path.append(u)
    if return_path:
        return u, np.stack(path)
    return u


def integrate_inverse_flow(traj: VelocityTrajectory):
    """Displacement of ``phi^-1``.

    Runs the flow of the time-reversed, negated velocity ``w(s) = -v(1 - s)``,
    whose endpoint is the inverse of ``phi(1)``: ``du/ds = v + Du v`` with the
    trajectory traversed from ``t = 1`` back to ``t = 0``.
    """
    sh = shooter(traj.op.lattice)
    h = traj.dt
    u = np.zeros_like(traj.steps[0])
    for n in reversed(range(traj.T)):
        start, end = traj.steps[n + 1], traj.steps[n]
        mid = 0.5 * (traj.stages[n, 1] + traj.stages[n, 2])
        k1 = -sh.flow_rhs(u, start)
        k2 = -sh.flow_rhs(u + 0.5 * h * k1, mid)
        k3 = -sh.flow_rhs(u + 0.5 * h * k2, mid)
        k4 = -sh.flow_rhs(u + h * k3, end)
        u = u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not _finite(u):
            raise DivergenceError("inverse flow integration", traj.T - n)
    return u


def deformation_from_displacement(u, lattice: FrequencyLattice, spacing=None) -> DeformationField:
    disp = spectral_to_spatial(u, lattice, check=False)
    return DeformationField(identity_grid(lattice.full_dims) + disp, spacing)


def shoot(v0, op: OperatorCoeffs, T: int = 10, inverse=True, spacing=None):
    """Shoot ``v0`` and return ``(phi, phi_inv or None, trajectory)``."""
    traj = integrate_epdiff(v0, op, T)
    lat = op.lattice
    phi = deformation_from_displacement(integrate_flow(traj), lat, spacing)
    phi_inv = None
    if inverse:
        phi_inv = deformation_from_displacement(integrate_inverse_flow(traj), lat, spacing)
    return phi, phi_inv, traj


def warp_image(image, phi: DeformationField) -> Image:
    """``I(phi(x))`` by multilinear interpolation with clamped borders."""
    img = image.intensities if isinstance(image, Image) else np.asarray(image, dtype=float)
    d = phi.d
    if tuple(img.shape[-d:]) != tuple(phi.full_dims):
        raise GridMismatchError(f"image grid {img.shape[-d:]} != deformation grid {phi.full_dims}")
    spacing = image.spacing if isinstance(image, Image) else phi.spacing
    return Image(sample(img, phi.map, d), spacing)


def compose(phi: DeformationField, psi: DeformationField) -> DeformationField:
    """``(phi o psi)(x) = phi(psi(x))``; displacements are treated as periodic."""
    d = phi.d
    disp = phi.displacement
    moved = np.stack(
        [sample(disp.take(i, axis=-d - 1), psi.map, d, wrap=True) for i in range(d)],
        axis=-d - 1,
    )
    return DeformationField(psi.map + moved, psi.spacing)


def jacobian_matrix(phi: DeformationField):
    """``J[..., i, j] = d phi_i / d x_j`` by central differences (one-sided at the border)."""
    d = phi.d
    m = phi.map
    axes = tuple(range(m.ndim - d, m.ndim))
    grads = np.gradient(m, axis=axes)
    # grads[j][..., i, *x] = d phi_i / d x_j
    return np.stack(grads, axis=-d - 1)


def jacobian_determinant(phi: DeformationField) -> np.ndarray:
    J = jacobian_matrix(phi)
    d = phi.d
    if d == 2:
        return J[..., 0, 0, :, :] * J[..., 1, 1, :, :] - J[..., 0, 1, :, :] * J[..., 1, 0, :, :]
    a = lambda i, j: J[..., i, j, :, :, :]  # noqa: E731
    return (
        a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1))
        - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
        + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0))
    )
