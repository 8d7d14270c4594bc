"""Synthetic in-context-learning sequence datasets.

A task packs N labelled examples and one query into a token matrix

    H = [ x_1 ... x_N  x_q ]   features   (d rows)
        [ y_1 ... y_N  0   ]   labels     (1 row, query slot masked)
        [ 0   ... 0    1   ]   query flag (1 row)

so D = d + 2 and the scalar target y = y(H) sits conceptually in the masked
slot at row index d (0-based), column N.  The read-out row of every dataset
is that label row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linalg import col2_norm, frobenius_norm


@dataclass(frozen=True)
class IclTask:
    """Linear in-context regression: y = <a, x_query> with |a|_2 <= 1 and
    features drawn uniformly from the box [-b_x, b_x]^d."""

    d: int
    N: int
    a: np.ndarray
    b_x: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        object.__setattr__(self, "a", a)
        if a.shape != (self.d,):
            raise ValueError(f"coefficient vector must have shape ({self.d},)")
        if np.linalg.norm(a) > 1.0 + 1e-12:
            raise ValueError("coefficient vector must satisfy |a|_2 <= 1")
        if self.b_x <= 0.0:
            raise ValueError("feature bound must be positive")

    @property
    def D(self) -> int:
        return self.d + 2

    @property
    def read_row(self) -> int:
        """0-based row index of the masked query-label slot."""
        return self.d

    @property
    def label_bound(self) -> float:
        """Exact bound on |<a, x>| over the feature box."""
        return float(self.b_x * np.sum(np.abs(self.a)))

    @property
    def sequence_bound(self) -> float:
        """Bound B with max(col2_norm(H), |y(H)|) <= B for every sample."""
        feat = self.d * self.b_x**2
        col = np.sqrt(feat + max(self.label_bound**2, 1.0))
        return float(max(col, self.label_bound))

    @property
    def lipschitz_witness(self) -> float:
        """y(H) changes by at most |a|_2 per unit Frobenius change of H."""
        return float(np.linalg.norm(self.a))

    def sequence(self, xs: np.ndarray, label_fn: Callable | None = None):
        """Assemble (H, y) from features ``xs`` of shape (d, N+1).

        ``label_fn`` maps a feature column to its label; defaults to the
        task's linear map.
        """
        xs = np.asarray(xs, dtype=np.float64)
        if xs.shape != (self.d, self.N + 1):
            raise ValueError(f"features must have shape ({self.d}, {self.N + 1})")
        if label_fn is None:
            labels = self.a @ xs
        else:
            labels = np.array([label_fn(xs[:, i]) for i in range(self.N + 1)], dtype=np.float64)
        H = np.zeros((self.D, self.N + 1))
        H[: self.d, :] = xs
        H[self.d, : self.N] = labels[: self.N]
        H[self.d + 1, self.N] = 1.0
        return H, float(labels[self.N])


@dataclass
class DataSet:
    """A fixed list of (H, y) samples plus the bound witnesses used by the
    regularity checks."""

    samples: list
    D: int
    N: int
    bound: float
    lipschitz: float
    seed: int | None
    read_row: int
    _stack: tuple | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def stacked(self):
        """(Hs, ys) arrays of shapes (B, D, N+1) and (B,), cached."""
        if self._stack is None:
            Hs = np.stack([H for H, _ in self.samples])
            ys = np.array([y for _, y in self.samples], dtype=np.float64)
            self._stack = (Hs, ys)
        return self._stack

    def to_json(self) -> str:
        return json.dumps(
            {
                "D": self.D,
                "N": self.N,
                "bound": self.bound,
                "lipschitz": self.lipschitz,
                "seed": self.seed,
                "read_row": self.read_row,
                "samples": [{"H": H.tolist(), "y": y} for H, y in self.samples],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DataSet":
        obj = json.loads(text)
        samples = [(np.asarray(s["H"], dtype=np.float64), float(s["y"])) for s in obj["samples"]]
        return cls(
            samples=samples,
            D=obj["D"],
            N=obj["N"],
            bound=obj["bound"],
            lipschitz=obj["lipschitz"],
            seed=obj["seed"],
            read_row=obj["read_row"],
        )

    @classmethod
    def from_samples(cls, samples: Sequence, read_row: int, seed: int | None = None) -> "DataSet":
        """Wrap explicit (H, y) pairs, deriving the bound witnesses by scan."""
        samples = [(np.asarray(H, dtype=np.float64), float(y)) for H, y in samples]
        if not samples:
            raise ValueError("dataset needs at least one sample")
        D, n = samples[0][0].shape
        bound = max(max(col2_norm(H) for H, _ in samples), max(abs(y) for _, y in samples))
        return cls(
            samples=samples,
            D=D,
            N=n - 1,
            bound=bound,
            lipschitz=float("nan"),
            seed=seed,
            read_row=read_row,
        )


def generate(task: IclTask, count: int, seed: int, label_fn: Callable | None = None) -> DataSet:
    """Draw ``count`` i.i.d. sequences for the task, deterministically in the
    seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        xs = rng.uniform(-task.b_x, task.b_x, size=(task.d, task.N + 1))
        samples.append(task.sequence(xs, label_fn=label_fn))
    return DataSet(
        samples=samples,
        D=task.D,
        N=task.N,
        bound=task.sequence_bound,
        lipschitz=task.lipschitz_witness,
        seed=seed,
        read_row=task.read_row,
    )


@dataclass
class RegularityReport:
    bound_hat: float
    lipschitz_hat: float
    bound_ok: bool

    @property
    def passed(self) -> bool:
        return self.bound_ok


def check_regularity(ds: DataSet) -> RegularityReport:
    """Scan a dataset for its sequence bound and a pairwise Lipschitz ratio
    estimate for the target map."""
    b_hat = 0.0
    for H, y in ds.samples:
        b_hat = max(b_hat, col2_norm(H), abs(y))
    k_hat = 0.0
    for i in range(len(ds.samples)):
        Hi, yi = ds.samples[i]
        for j in range(i + 1, len(ds.samples)):
            Hj, yj = ds.samples[j]
            dh = frobenius_norm(Hi - Hj)
            if dh > 0.0:
                k_hat = max(k_hat, abs(yi - yj) / dh)
    bound_ok = (not np.isfinite(ds.bound)) or b_hat <= ds.bound + 1e-12
    return RegularityReport(bound_hat=b_hat, lipschitz_hat=k_hat, bound_ok=bound_ok)
