"""
On-disk trajectory container and the samplers used by both training stages.

A dataset directory holds ``manifest.json`` plus one raw little-endian float32
blob per array (``u.bin``, ``coords.bin``, ``times.bin``), row-major.
"""

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .errors import DatasetError, InvalidWindow, NoPairsAvailable

logger = logging.getLogger(__name__)

ARRAY_NAMES = ("u", "coords", "times")
BLOB_DTYPE = np.dtype("<f4")


@dataclass
class FieldSnapshot:
    """Observations (x_i, u(x_i)) of one physical state."""

    coords: np.ndarray  # [N, dim]
    values: np.ndarray  # [N, C]


@dataclass
class StatePair:
    u_t: FieldSnapshot
    u_next: FieldSnapshot
    trajectory: int
    t: int


@dataclass
class PairBatch:
    """A batch of successive states; both frames of a pair share one grid."""

    coords: np.ndarray  # [B, N, dim]
    u_t: np.ndarray  # [B, N, C]
    u_next: np.ndarray  # [B, N, C]
    trajectory: np.ndarray  # [B]
    t: np.ndarray  # [B]

    def __len__(self) -> int:
        return len(self.trajectory)

    def pairs(self) -> List[StatePair]:
        return [
            StatePair(
                u_t=FieldSnapshot(self.coords[i], self.u_t[i]),
                u_next=FieldSnapshot(self.coords[i], self.u_next[i]),
                trajectory=int(self.trajectory[i]),
                t=int(self.t[i]),
            )
            for i in range(len(self))
        ]


@dataclass
class SnapshotBatch:
    coords: np.ndarray  # [B, N, dim]
    values: np.ndarray  # [B, N, C]
    trajectory: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.trajectory)


@dataclass
class TrajectoryDataset:
    """Trajectories on per-trajectory grids plus a JSON manifest."""

    u: np.ndarray  # [n_traj, n_time, N, C]
    coords: np.ndarray  # [n_traj, N, dim]
    times: np.ndarray  # [n_time]
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_trajectories(self) -> int:
        return self.u.shape[0]

    @property
    def n_time(self) -> int:
        return self.u.shape[1]

    @property
    def n_points(self) -> int:
        return self.u.shape[2]

    @property
    def n_channels(self) -> int:
        return self.u.shape[3]

    @property
    def spatial_dim(self) -> int:
        return self.coords.shape[2]

    def validate(self) -> None:
        """Raise ``DatasetError`` unless shapes agree and values are finite."""
        if self.u.ndim != 4 or self.coords.ndim != 3 or self.times.ndim != 1:
            raise DatasetError(
                "Expected u [n_traj, n_time, N, C], coords [n_traj, N, dim], times [n_time]",
                u=self.u.shape,
                coords=self.coords.shape,
                times=self.times.shape,
            )
        n_traj, n_time, n_points, _ = self.u.shape
        if self.coords.shape[:2] != (n_traj, n_points) or self.times.shape[0] != n_time:
            raise DatasetError(
                "Array shapes are inconsistent",
                u=self.u.shape,
                coords=self.coords.shape,
                times=self.times.shape,
            )
        for name in ARRAY_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DatasetError(f"Array '{name}' contains NaN or Inf")
        if self.coords.size and (self.coords.min() < 0.0 or self.coords.max() >= 1.0):
            raise DatasetError("Coordinates must lie in [0, 1)^dim")

    def subset(self, indices: Sequence[int]) -> "TrajectoryDataset":
        indices = np.asarray(indices, dtype=np.int64)
        manifest = copy.deepcopy(self.manifest)
        manifest.pop("splits", None)
        return TrajectoryDataset(
            u=self.u[indices], coords=self.coords[indices], times=self.times, manifest=manifest
        )

    def split(self, name: str) -> "TrajectoryDataset":
        splits = self.manifest.get("splits", {})
        if name not in splits:
            raise DatasetError(f"Dataset has no split named '{name}'", available=sorted(splits))
        return self.subset(splits[name])

    def snapshot(self, trajectory: int, t: int) -> FieldSnapshot:
        return FieldSnapshot(self.coords[trajectory], self.u[trajectory, t])

    def save(self, path: str | Path) -> Path:
        return write_dataset(path, self.u, self.coords, self.times, self.manifest)


# ============================================================
# Reading and writing
# ============================================================


def _array_record(array: np.ndarray, name: str) -> Dict[str, Any]:
    return {"file": f"{name}.bin", "shape": list(array.shape), "dtype": "float32-le"}


def write_dataset(
    path: str | Path,
    trajectories: np.ndarray,
    grids: np.ndarray,
    times: np.ndarray,
    manifest: Dict[str, Any],
) -> Path:
    """Write a dataset directory and return its path."""
    path = Path(path)
    dataset = TrajectoryDataset(
        u=np.asarray(trajectories, dtype=np.float32),
        coords=np.asarray(grids, dtype=np.float32),
        times=np.asarray(times, dtype=np.float32),
    )
    dataset.validate()

    manifest = copy.deepcopy(manifest)
    arrays = {name: _array_record(getattr(dataset, name), name) for name in ARRAY_NAMES}
    for name, declared in manifest.get("arrays", {}).items():
        if name in arrays and list(declared.get("shape", [])) != arrays[name]["shape"]:
            raise DatasetError(
                f"Manifest shape for '{name}' does not match the array",
                declared=declared.get("shape"),
                actual=arrays[name]["shape"],
                path=str(path),
            )
    manifest["arrays"] = arrays

    try:
        path.mkdir(parents=True, exist_ok=True)
        for name in ARRAY_NAMES:
            blob = getattr(dataset, name).astype(BLOB_DTYPE, copy=False)
            (path / f"{name}.bin").write_bytes(np.ascontiguousarray(blob).tobytes())
        tmp = path / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2))
        os.replace(tmp, path / "manifest.json")
    except OSError as e:
        raise DatasetError(f"Failed to write dataset: {e}", path=str(path)) from e

    logger.info("Wrote dataset %s (u shape = %s)", path, dataset.u.shape)
    return path


def read_dataset(path: str | Path) -> TrajectoryDataset:
    """Load a dataset directory; every call returns fresh arrays."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"No dataset at {path} (manifest.json missing)", path=str(path))
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"Unreadable manifest: {e}", path=str(manifest_path)) from e

    loaded = {}
    for name in ARRAY_NAMES:
        record = manifest.get("arrays", {}).get(name)
        if record is None:
            raise DatasetError(f"Manifest does not declare array '{name}'", path=str(path))
        blob_path = path / record["file"]
        shape = tuple(record["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
        try:
            raw = blob_path.read_bytes()
        except OSError as e:
            raise DatasetError(f"Cannot read {blob_path}: {e}", path=str(blob_path)) from e
        if len(raw) != expected:
            raise DatasetError(
                f"Blob size of '{name}' does not match manifest shape",
                path=str(blob_path),
                expected_bytes=expected,
                actual_bytes=len(raw),
            )
        loaded[name] = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(shape).astype(np.float32)

    dataset = TrajectoryDataset(manifest=manifest, **loaded)
    dataset.validate()
    return dataset


# ============================================================
# Views and splits
# ============================================================


def split_indices(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Randomly hold out ``round(fraction * n)`` indices (at least one if n > 1)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_held = int(round(fraction * n))
    if fraction > 0 and n > 1:
        n_held = min(max(n_held, 1), n - 1)
    return np.sort(order[n_held:]), np.sort(order[:n_held])


def slice_subtrajectories(dataset: TrajectoryDataset, window: int) -> TrajectoryDataset:
    """Cut every trajectory into floor(n_time / window) non-overlapping windows."""
    if window < 1 or window > dataset.n_time:
        raise InvalidWindow(
            f"Window {window} must lie in [1, {dataset.n_time}]",
            window=window,
            n_time=dataset.n_time,
        )
    if window == dataset.n_time:
        return dataset

    n_windows = dataset.n_time // window
    n_traj, _, n_points, n_channels = dataset.u.shape
    u = dataset.u[:, : n_windows * window].reshape(
        n_traj * n_windows, window, n_points, n_channels
    )
    coords = np.repeat(dataset.coords, n_windows, axis=0)
    source = np.repeat(np.arange(n_traj), n_windows)

    manifest = copy.deepcopy(dataset.manifest)
    manifest["window"] = window
    manifest["source_index"] = source.tolist()
    manifest["splits"] = {
        name: [i * n_windows + w for i in indices for w in range(n_windows)]
        for name, indices in dataset.manifest.get("splits", {}).items()
    }
    return TrajectoryDataset(u=u, coords=coords, times=dataset.times[:window], manifest=manifest)


# ============================================================
# Samplers
# ============================================================


def _horizon(dataset: TrajectoryDataset, horizon: int | None) -> int:
    return dataset.n_time if horizon is None else min(horizon, dataset.n_time)


def enumerate_pairs(
    dataset: TrajectoryDataset,
    horizon: int | None = None,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """All (trajectory, t) with t + 1 inside the horizon, shape [P, 2]."""
    h = _horizon(dataset, horizon)
    trajs = np.arange(dataset.n_trajectories) if indices is None else np.asarray(indices)
    if h < 2 or len(trajs) == 0:
        raise NoPairsAvailable(
            "Training horizon holds no successive frames", horizon=h, trajectories=len(trajs)
        )
    grid_t, grid_traj = np.meshgrid(np.arange(h - 1), trajs)
    return np.stack([grid_traj.ravel(), grid_t.ravel()], axis=1)


def sample_pairs(
    dataset: TrajectoryDataset,
    batch: int,
    rng: np.random.Generator,
    horizon: int | None = None,
    indices: Sequence[int] | None = None,
) -> PairBatch:
    """Draw ``batch`` pairs uniformly over (trajectory, t) inside the horizon."""
    candidates = enumerate_pairs(dataset, horizon, indices)
    chosen = candidates[rng.integers(0, len(candidates), size=batch)]
    return gather_pairs(dataset, chosen)


def gather_pairs(dataset: TrajectoryDataset, chosen: np.ndarray) -> PairBatch:
    chosen = np.asarray(chosen, dtype=np.int64).reshape(-1, 2)
    traj, t = chosen[:, 0], chosen[:, 1]
    return PairBatch(
        coords=dataset.coords[traj],
        u_t=dataset.u[traj, t],
        u_next=dataset.u[traj, t + 1],
        trajectory=traj,
        t=t,
    )


def sample_snapshots(
    dataset: TrajectoryDataset,
    batch: int,
    rng: np.random.Generator,
    horizon: int | None = None,
    indices: Sequence[int] | None = None,
) -> SnapshotBatch:
    """Draw single frames uniformly over (trajectory, t < horizon)."""
    h = _horizon(dataset, horizon)
    trajs = np.arange(dataset.n_trajectories) if indices is None else np.asarray(indices)
    if h < 1 or len(trajs) == 0:
        raise NoPairsAvailable("No frames available", horizon=h, trajectories=len(trajs))
    traj = trajs[rng.integers(0, len(trajs), size=batch)]
    t = rng.integers(0, h, size=batch)
    return SnapshotBatch(
        coords=dataset.coords[traj], values=dataset.u[traj, t], trajectory=traj, t=t
    )


# ============================================================
# Normalization
# ============================================================


@dataclass
class NormStats:
    """Per-channel affine normalization fitted on the training split."""

    mean: np.ndarray  # [C]
    std: np.ndarray  # [C]
    constant_channels: List[bool] = field(default_factory=list)

    def apply(self, u: np.ndarray) -> np.ndarray:
        return ((u - self.mean) / self.std).astype(np.float32)

    def invert(self, u: np.ndarray) -> np.ndarray:
        return (u * self.std + self.mean).astype(np.float32)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant_channels": list(self.constant_channels),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormStats":
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float32),
            std=np.asarray(data["std"], dtype=np.float32),
            constant_channels=list(data.get("constant_channels", [])),
        )

    @classmethod
    def identity(cls, n_channels: int) -> "NormStats":
        return cls(
            mean=np.zeros(n_channels, dtype=np.float32),
            std=np.ones(n_channels, dtype=np.float32),
            constant_channels=[False] * n_channels,
        )


def fit_normalization(u: np.ndarray) -> NormStats:
    flat = u.reshape(-1, u.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    constant = [bool(s == 0.0) for s in std]
    std = np.where(std == 0.0, 1.0, std)
    for c, flag in enumerate(constant):
        if flag:
            logger.warning("Channel %d has zero variance; scale set to 1", c)
    return NormStats(
        mean=mean.astype(np.float32), std=std.astype(np.float32), constant_channels=constant
    )


def apply_normalization(dataset: TrajectoryDataset, stats: NormStats) -> TrajectoryDataset:
    manifest = copy.deepcopy(dataset.manifest)
    manifest["normalization"] = stats.to_dict()
    return TrajectoryDataset(
        u=stats.apply(dataset.u), coords=dataset.coords, times=dataset.times, manifest=manifest
    )


def normalize(
    dataset: TrajectoryDataset, train_indices: Sequence[int] | None = None
) -> Tuple[TrajectoryDataset, NormStats]:
    """Normalize with statistics of the training split only."""
    if train_indices is None:
        train_indices = dataset.manifest.get("splits", {}).get(
            "train", range(dataset.n_trajectories)
        )
    stats = fit_normalization(dataset.u[np.asarray(list(train_indices), dtype=np.int64)])
    return apply_normalization(dataset, stats), stats
