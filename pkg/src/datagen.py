"""
Pseudo-spectral solvers that synthesize training and test trajectories.

Both solvers use an integrating-factor RK4 scheme in Fourier space: the linear
viscous term is integrated exactly and the dealiased (2/3-rule) nonlinear
advection plus forcing is stepped explicitly with ``inner_steps`` sub-steps per
saved frame. Trajectory ``i`` draws its randomness from ``(seed, i)`` so
trajectories can be generated in any order or in parallel.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .config import BurgersConfig, Vorticity2DConfig
from .dataio import TrajectoryDataset
from .errors import GridTooSparse, SolverDiverged

logger = logging.getLogger(__name__)

MIN_GRID_POINTS = 8

# ============================================================
# Grids
# ============================================================


@dataclass
class GridSpec:
    """A subset of a regular parent grid, coordinates rescaled to [0, 1)^dim."""

    coords: np.ndarray  # [N, dim]
    indices: np.ndarray  # flat row-major indices into the parent grid
    parent_resolution: Tuple[int, ...]
    keep_fraction: float

    @property
    def n_points(self) -> int:
        return len(self.indices)


def regular_coords(parent_resolution: Sequence[int]) -> np.ndarray:
    """Row-major coordinates of the full regular grid, shape [prod(res), dim]."""
    axes = [np.arange(n) / n for n in parent_resolution]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def subsample_grid(
    parent_resolution: Sequence[int], keep_fraction: float, seed: int
) -> GridSpec:
    """Keep round(pi * size) points of the parent grid, uniformly without replacement."""
    parent_resolution = tuple(int(n) for n in parent_resolution)
    if not 0.0 < keep_fraction <= 1.0:
        raise GridTooSparse(
            f"keep_fraction must lie in (0, 1], got {keep_fraction}",
            keep_fraction=keep_fraction,
        )
    total = int(np.prod(parent_resolution))
    # Python's round() breaks ties to even.
    n_points = int(round(keep_fraction * total))
    if n_points < MIN_GRID_POINTS:
        raise GridTooSparse(
            f"Grid would keep {n_points} points (< {MIN_GRID_POINTS})",
            n_points=n_points,
            keep_fraction=keep_fraction,
        )

    if n_points == total:
        indices = np.arange(total)
    else:
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(total, size=n_points, replace=False))

    unravelled = np.unravel_index(indices, parent_resolution)
    coords = np.stack(
        [idx / n for idx, n in zip(unravelled, parent_resolution)], axis=-1
    )
    return GridSpec(
        coords=coords,
        indices=indices,
        parent_resolution=parent_resolution,
        keep_fraction=keep_fraction,
    )


# ============================================================
# Spectral helpers
# ============================================================


def _resample_periodic(u_hat: np.ndarray, n_in: int, n_out: int) -> np.ndarray:
    """Band-limited resampling of a 1D rfft spectrum onto ``n_out`` points."""
    keep = (min(n_in, n_out) - 1) // 2
    out_hat = np.zeros(n_out // 2 + 1, dtype=np.complex128)
    out_hat[: keep + 1] = u_hat[: keep + 1] * (n_out / n_in)
    return np.fft.irfft(out_hat, n=n_out)


def _if_rk4_step(
    v_hat: np.ndarray,
    t: float,
    dt: float,
    e_full: np.ndarray,
    e_half: np.ndarray,
    nonlinear: Callable[[np.ndarray, float], np.ndarray],
) -> np.ndarray:
    """One integrating-factor RK4 step for v_t = L v + N(v, t) with diagonal L."""
    a = nonlinear(v_hat, t)
    b = nonlinear(e_half * (v_hat + 0.5 * dt * a), t + 0.5 * dt)
    c = nonlinear(e_half * v_hat + 0.5 * dt * b, t + 0.5 * dt)
    d = nonlinear(e_full * v_hat + dt * e_half * c, t + dt)
    return e_full * v_hat + dt / 6.0 * (e_full * a + 2.0 * e_half * (b + c) + d)


def _sinusoid_params(
    rng: np.random.Generator, config: BurgersConfig, n_terms: int
) -> Dict[str, np.ndarray]:
    return {
        "amplitude": rng.uniform(*config.amplitude_range, size=n_terms),
        "frequency": rng.uniform(*config.frequency_range, size=n_terms),
        "wavenumber": rng.choice(np.asarray(config.wavenumber_set), size=n_terms),
        "phase": rng.uniform(*config.phase_range, size=n_terms),
    }


def _sinusoid_field(params: Dict[str, np.ndarray], x: np.ndarray, t: float, length: float):
    arg = (
        params["frequency"][:, None] * t
        + 2.0 * np.pi * params["wavenumber"][:, None] * x[None, :] / length
        + params["phase"][:, None]
    )
    return (params["amplitude"][:, None] * np.sin(arg)).sum(axis=0)


# ============================================================
# Burgers
# ============================================================


def burgers_trajectory(
    config: BurgersConfig, index: int, u0: np.ndarray | None = None
) -> np.ndarray:
    """Integrate u_t + u u_x = nu u_xx + f for one trajectory.

    Returns float64 frames of shape [n_time, n_space]. ``u0`` (given on the
    solver grid) replaces the random initial condition.
    """
    n = config.solver_resolution
    length = config.domain_length
    rng = np.random.default_rng([config.seed, index])
    forcing = _sinusoid_params(rng, config, config.forcing_terms)
    ic = _sinusoid_params(rng, config, max(config.forcing_terms, 1))

    x = length * np.arange(n) / n
    k = 2.0 * np.pi / length * np.fft.rfftfreq(n, d=1.0 / n)
    dealias = np.arange(k.size) < n / 3.0

    if u0 is None:
        u0 = _sinusoid_field(ic, x, 0.0, length)
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.shape != (n,):
        raise ValueError(f"u0 must have shape ({n},), got {u0.shape}")

    def nonlinear(v_hat: np.ndarray, t: float) -> np.ndarray:
        u = np.fft.irfft(v_hat * dealias, n=n)
        adv = -0.5j * k * np.fft.rfft(u * u) * dealias
        if config.forcing_terms:
            adv = adv + np.fft.rfft(_sinusoid_field(forcing, x, t, length))
        return adv

    dt = config.dt_save / config.inner_steps
    linear = -config.viscosity * k**2
    e_full = np.exp(linear * dt)
    e_half = np.exp(linear * dt / 2.0)

    frames = np.empty((config.n_time, config.n_space))
    u_hat = np.fft.rfft(u0)
    t = 0.0
    for step in range(config.n_time):
        frames[step] = _resample_periodic(u_hat, n, config.n_space)
        if not np.all(np.isfinite(frames[step])):
            raise SolverDiverged(index, step=step)
        if step == config.n_time - 1:
            break
        for _ in range(config.inner_steps):
            u_hat = _if_rk4_step(u_hat, t, dt, e_full, e_half, nonlinear)
            t += dt
    return frames


def _burgers_manifest(config: BurgersConfig) -> Dict:
    return {
        "equation": "burgers",
        "config": config.model_dump(),
        "forcing": "sum_j A_j sin(omega_j t + 2 pi l_j x / L + phi_j)",
        "initial_condition": "independent draw from the forcing family at t=0",
        "provenance": {
            "forcing": "artifact-default",
            "initial_condition": "artifact-default",
            "time_stepper": "artifact-default: integrating-factor RK4, 2/3 dealiasing",
        },
    }


def solve_burgers(
    config: BurgersConfig, n_trajectories: int, start_index: int = 0
) -> TrajectoryDataset:
    """Generate Burgers trajectories on the full regular grid."""
    frames = _run_parallel(
        partial(burgers_trajectory, config),
        range(start_index, start_index + n_trajectories),
        config.workers,
        "burgers",
    )
    u = np.stack(frames)[..., None] if frames else np.zeros((0, config.n_time, config.n_space, 1))
    coords = np.broadcast_to(regular_coords((config.n_space,)), (len(frames), config.n_space, 1))
    return TrajectoryDataset(
        u=u.astype(np.float32),
        coords=np.array(coords, dtype=np.float32),
        times=(np.arange(config.n_time) * config.dt_save).astype(np.float32),
        manifest=_burgers_manifest(config),
    )


# ============================================================
# 2D vorticity
# ============================================================


def _vorticity_wavenumbers(n: int):
    kx = 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / n)[:, None]
    ky = 2.0 * np.pi * np.fft.rfftfreq(n, d=1.0 / n)[None, :]
    k2 = kx**2 + ky**2
    k2_safe = np.where(k2 == 0.0, 1.0, k2)
    ix = np.abs(np.fft.fftfreq(n, d=1.0 / n))[:, None]
    iy = np.fft.rfftfreq(n, d=1.0 / n)[None, :]
    dealias = (ix < n / 3.0) & (iy < n / 3.0)
    return kx, ky, k2, k2_safe, dealias


def vorticity_forcing(config: Vorticity2DConfig) -> np.ndarray:
    n = config.n_space
    x, y = np.meshgrid(np.arange(n) / n, np.arange(n) / n, indexing="ij")
    phase = 2.0 * np.pi * (x + y)
    return config.forcing_amplitude * (np.sin(phase) + np.cos(phase))


def gaussian_random_field(config: Vorticity2DConfig, rng: np.random.Generator) -> np.ndarray:
    """Mean-zero periodic field with spectrum sigma (4 pi^2 |k|^2 + tau^2)^(-alpha/2)."""
    n = config.n_space
    kx, ky, k2, _, _ = _vorticity_wavenumbers(n)
    spectrum = config.ic_sigma * (k2 + config.ic_tau**2) ** (-config.ic_alpha / 2.0)
    spectrum[0, 0] = 0.0
    noise_hat = np.fft.rfft2(rng.standard_normal((n, n)))
    return np.fft.irfft2(noise_hat * spectrum * n, s=(n, n))


def vorticity_trajectory(
    config: Vorticity2DConfig, index: int, w0: np.ndarray | None = None
) -> np.ndarray:
    """Integrate w_t + u . grad w = nu lap w + f on the unit torus.

    Returns float64 frames of shape [n_time, n, n] indexed [t, ix, iy].
    """
    n = config.n_space
    rng = np.random.default_rng([config.seed, index])
    kx, ky, k2, k2_safe, dealias = _vorticity_wavenumbers(n)

    if w0 is None:
        w0 = gaussian_random_field(config, rng)
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != (n, n):
        raise ValueError(f"w0 must have shape ({n}, {n}), got {w0.shape}")
    f_hat = np.fft.rfft2(vorticity_forcing(config))

    def nonlinear(w_hat: np.ndarray, t: float) -> np.ndarray:
        w_hat = w_hat * dealias
        psi_hat = np.where(k2 == 0.0, 0.0, w_hat / k2_safe)
        u = np.fft.irfft2(1j * ky * psi_hat, s=(n, n))
        v = np.fft.irfft2(-1j * kx * psi_hat, s=(n, n))
        wx = np.fft.irfft2(1j * kx * w_hat, s=(n, n))
        wy = np.fft.irfft2(1j * ky * w_hat, s=(n, n))
        return -np.fft.rfft2(u * wx + v * wy) * dealias + f_hat

    dt = config.dt_save / config.inner_steps
    linear = -config.viscosity * k2
    e_full = np.exp(linear * dt)
    e_half = np.exp(linear * dt / 2.0)

    w_hat = np.fft.rfft2(w0)
    t = 0.0
    total = config.warmup_frames + config.n_time
    frames = np.empty((config.n_time, n, n))
    for frame in range(total):
        if frame >= config.warmup_frames:
            saved = frame - config.warmup_frames
            frames[saved] = np.fft.irfft2(w_hat, s=(n, n))
            if not np.all(np.isfinite(frames[saved])):
                raise SolverDiverged(index, step=saved)
        if frame == total - 1:
            break
        for _ in range(config.inner_steps):
            w_hat = _if_rk4_step(w_hat, t, dt, e_full, e_half, nonlinear)
            t += dt
    return frames


def _vorticity_manifest(config: Vorticity2DConfig) -> Dict:
    return {
        "equation": "ns2d",
        "config": config.model_dump(),
        "forcing": "A (sin(2 pi (x1 + x2)) + cos(2 pi (x1 + x2)))",
        "initial_condition": "Gaussian random field, power-law spectrum",
        "provenance": {
            "initial_condition": "artifact-default",
            "time_stepper": "artifact-default: integrating-factor RK4, 2/3 dealiasing",
        },
    }


def solve_vorticity2d(
    config: Vorticity2DConfig, n_trajectories: int, start_index: int = 0
) -> TrajectoryDataset:
    """Generate vorticity trajectories flattened row-major to [n_time, n^2, 1]."""
    n = config.n_space
    frames = _run_parallel(
        partial(vorticity_trajectory, config),
        range(start_index, start_index + n_trajectories),
        config.workers,
        "ns2d",
    )
    if frames:
        u = np.stack(frames).reshape(len(frames), config.n_time, n * n, 1)
    else:
        u = np.zeros((0, config.n_time, n * n, 1))
    coords = np.broadcast_to(regular_coords((n, n)), (len(frames), n * n, 2))
    return TrajectoryDataset(
        u=u.astype(np.float32),
        coords=np.array(coords, dtype=np.float32),
        times=(np.arange(config.n_time) * config.dt_save).astype(np.float32),
        manifest=_vorticity_manifest(config),
    )


# ============================================================
# Dataset assembly
# ============================================================


def _run_parallel(fn, indices: Sequence[int], workers: int, label: str) -> List[np.ndarray]:
    indices = list(indices)
    if workers <= 1:
        return [fn(i) for i in tqdm(indices, desc=f"Generating {label}", leave=False)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(
            tqdm(pool.map(fn, indices), total=len(indices), desc=f"Generating {label}", leave=False)
        )


def apply_grids(
    dataset: TrajectoryDataset,
    parent_resolution: Sequence[int],
    keep_fraction: float,
    seed: int,
) -> TrajectoryDataset:
    """Restrict every trajectory to its own random grid (fixed along the trajectory)."""
    if keep_fraction == 1.0:
        return dataset
    grids = [
        subsample_grid(parent_resolution, keep_fraction, seed + i)
        for i in range(dataset.n_trajectories)
    ]
    u = np.stack([dataset.u[i][:, g.indices] for i, g in enumerate(grids)])
    coords = np.stack([g.coords for g in grids]).astype(np.float32)
    manifest = dict(dataset.manifest)
    manifest["grid"] = {
        "parent_resolution": list(parent_resolution),
        "keep_fraction": keep_fraction,
        "seed": seed,
        "n_points": grids[0].n_points if grids else 0,
    }
    return TrajectoryDataset(u=u, coords=coords, times=dataset.times, manifest=manifest)


def generate_dataset(config: BurgersConfig | Vorticity2DConfig) -> TrajectoryDataset:
    """Train + test trajectories with per-trajectory grids and split lists."""
    n_total = config.n_train + config.n_test
    logger.info("Generating %d %s trajectories", n_total, config.equation)
    if isinstance(config, BurgersConfig):
        dataset = solve_burgers(config, n_total)
        parent = (config.n_space,)
    else:
        dataset = solve_vorticity2d(config, n_total)
        parent = (config.n_space, config.n_space)

    dataset = apply_grids(dataset, parent, config.keep_fraction, config.grid_seed)
    dataset.manifest["splits"] = {
        "train": list(range(config.n_train)),
        "test": list(range(config.n_train, n_total)),
    }
    return dataset
