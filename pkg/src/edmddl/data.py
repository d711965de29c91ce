"""Snapshot datasets grouped by trajectory, and their on-disk formats.

Binary layout (little-endian)::

    8 bytes   magic  b"EDMDDS01"
    uint32    length of the JSON header in bytes
    header    UTF-8 JSON: d, n_snapshots, n_pairs, trajectory_lengths, system, seed, extra
    float64   snapshot matrix in column order (component 0 of every snapshot, then component 1, ...)

The CSV export has columns ``trajectory, step, x1, ..., xd`` with 17 significant digits.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"EDMDDS01"
CSV_FORMAT = "%.17g"


@dataclass
class TimeSeriesDataset:
    """Trajectories of snapshots; transition pairs never cross trajectories."""

    trajectories: list[np.ndarray]
    system: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        trajs = [np.atleast_2d(np.asarray(t, dtype=float)) for t in self.trajectories]
        if not trajs:
            raise ValueError("dataset needs at least one trajectory")
        d = trajs[0].shape[1]
        for t in trajs:
            if t.ndim != 2 or t.shape[1] != d:
                raise ValueError("all trajectories must share the state dimension")
            if t.shape[0] < 2:
                raise ValueError("every trajectory needs at least two snapshots")
        self.trajectories = trajs
        self._snapshots = None

    @classmethod
    def from_pairs(cls, x, y, **kwargs) -> "TimeSeriesDataset":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if x.shape != y.shape:
            raise ValueError(f"X and Y must have the same shape, got {x.shape} and {y.shape}")
        return cls([np.stack([a, b]) for a, b in zip(x, y)], **kwargs)

    @property
    def d(self) -> int:
        return self.trajectories[0].shape[1]

    @property
    def lengths(self) -> list[int]:
        return [t.shape[0] for t in self.trajectories]

    @property
    def n_pairs(self) -> int:
        return sum(n - 1 for n in self.lengths)

    def __len__(self) -> int:
        return self.n_pairs

    @property
    def snapshots(self) -> np.ndarray:
        if self._snapshots is None:
            self._snapshots = np.concatenate(self.trajectories, axis=0)
        return self._snapshots

    @property
    def pair_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Row indices into :attr:`snapshots` of each pair's first and second element."""
        xs, start = [], 0
        for n in self.lengths:
            xs.append(np.arange(start, start + n - 1))
            start += n
        x_idx = np.concatenate(xs)
        return x_idx, x_idx + 1

    @property
    def X(self) -> np.ndarray:
        return self.snapshots[self.pair_index[0]]

    @property
    def Y(self) -> np.ndarray:
        return self.snapshots[self.pair_index[1]]

    def header(self) -> dict[str, Any]:
        return {
            "format": "edmddl-dataset/1",
            "d": self.d,
            "n_snapshots": int(self.snapshots.shape[0]),
            "n_pairs": self.n_pairs,
            "trajectory_lengths": self.lengths,
            "system": self.system,
            "seed": self.seed,
            "extra": self.extra,
        }

    # -- IO --------------------------------------------------------------
    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        body = np.asfortranarray(self.snapshots).astype("<f8").tobytes(order="F")
        return MAGIC + struct.pack("<I", len(head)) + head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TimeSeriesDataset":
        if blob[:8] != MAGIC:
            raise ValueError("not an edmddl dataset file")
        (n,) = struct.unpack("<I", blob[8:12])
        head = json.loads(blob[12:12 + n].decode())
        flat = np.frombuffer(blob[12 + n:], dtype="<f8")
        snaps = flat.reshape((head["n_snapshots"], head["d"]), order="F").astype(float)
        bounds = np.cumsum([0] + head["trajectory_lengths"])
        trajs = [snaps[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        return cls(trajs, system=head.get("system", {}), seed=head.get("seed"), extra=head.get("extra", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TimeSeriesDataset":
        return cls.from_bytes(Path(path).read_bytes())

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trajectory", "step"] + [f"x{i + 1}" for i in range(self.d)])
        for j, traj in enumerate(self.trajectories):
            for n, row in enumerate(traj):
                w.writerow([j, n] + [CSV_FORMAT % v for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text
