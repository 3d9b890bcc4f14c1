"""Panel containers, CSV ingestion and state transforms.

A :class:`PanelSample` holds time-ordered paths of (choice, state)
observations in column arrays.  Utility transforms are carried by a
:class:`UtilitySpec`, which also records the discount factor and
whether choice 1 terminates a path (optimal-stopping data such as taxi
shifts) or the process keeps running (the recurrent Monte Carlo
design).  The distinction matters for forward sums: after a structural
termination the future contributes exact zeros, whereas a path that is
simply cut off at the sample edge is censored and its tail is dropped.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import IntegrityError, NumericError, ParseError, ValidationError


@dataclass(frozen=True)
class Observation:
    """One (path, period) row: binary choice ``y`` and state vector ``x``."""

    path_id: int
    t: int
    y: int
    x: np.ndarray

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValidationError(f"choice must be 0 or 1, got {self.y}")
        if self.t < 0:
            raise ValidationError(f"period index must be >= 0, got {self.t}")
        if not np.all(np.isfinite(self.x)):
            raise ValidationError("state vector contains non-finite values")


class PanelSample:
    """Column-array panel of observations, sorted by (path_id, t).

    Parameters
    ----------
    path_id, t, y : int arrays of length n
    x : float array of shape (n, k)
    """

    def __init__(self, path_id, t, y, x, validate: bool = True):
        order = np.lexsort((np.asarray(t), np.asarray(path_id)))
        self.path_id = np.asarray(path_id, dtype=np.int64)[order]
        self.t = np.asarray(t, dtype=np.int64)[order]
        self.y = np.asarray(y, dtype=np.int64)[order]
        self.x = np.atleast_2d(np.asarray(x, dtype=float))[order]
        if validate:
            self._validate()

    def _validate(self):
        n = len(self.path_id)
        if n == 0:
            raise ParseError("no observations")
        if not (len(self.t) == len(self.y) == self.x.shape[0] == n):
            raise IntegrityError("column lengths differ")
        if not np.all(np.isin(self.y, (0, 1))):
            raise IntegrityError("choices must be 0 or 1")
        if np.any(self.t < 0):
            raise IntegrityError("period indices must be >= 0")
        if not np.all(np.isfinite(self.x)):
            raise IntegrityError("state matrix contains non-finite values")
        for start, stop in zip(*self._path_bounds()):
            tt = self.t[start:stop]
            if np.any(np.diff(tt) != 1):
                pid = self.path_id[start]
                raise IntegrityError(
                    f"path {pid}: period index must increase by 1 with no gaps"
                )
        if not (np.any(self.y == 0) and np.any(self.y == 1)):
            raise IntegrityError("sample must contain both choices (some y=0 and some y=1)")

    def _path_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        change = np.flatnonzero(np.diff(self.path_id)) + 1
        starts = np.concatenate(([0], change))
        stops = np.concatenate((change, [len(self.path_id)]))
        return starts, stops

    @property
    def n_obs(self) -> int:
        return len(self.path_id)

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def n_paths(self) -> int:
        return len(np.unique(self.path_id))

    def path_slices(self) -> list[slice]:
        starts, stops = self._path_bounds()
        return [slice(int(a), int(b)) for a, b in zip(starts, stops)]

    def observations(self) -> Iterable[Observation]:
        for i in range(self.n_obs):
            yield Observation(
                int(self.path_id[i]), int(self.t[i]), int(self.y[i]), self.x[i].copy()
            )

    @classmethod
    def from_observations(cls, obs: Sequence[Observation]) -> "PanelSample":
        if not obs:
            raise ParseError("no observations")
        return cls(
            path_id=[o.path_id for o in obs],
            t=[o.t for o in obs],
            y=[o.y for o in obs],
            x=np.vstack([o.x for o in obs]),
        )

    def subset_paths(self, ids: Sequence[int], relabel: bool = True) -> "PanelSample":
        """New panel made of the given paths, in the given order.

        Repeated ids are allowed (bootstrap draws); with ``relabel`` each
        drawn path gets a fresh label so duplicates stay distinct.
        """
        slices = {int(self.path_id[s.start]): s for s in self.path_slices()}
        cols_pid, cols_t, cols_y, cols_x = [], [], [], []
        for new_label, pid in enumerate(ids):
            s = slices[int(pid)]
            cols_pid.append(
                np.full(s.stop - s.start, new_label if relabel else pid, dtype=np.int64)
            )
            cols_t.append(self.t[s])
            cols_y.append(self.y[s])
            cols_x.append(self.x[s])
        return PanelSample(
            np.concatenate(cols_pid),
            np.concatenate(cols_t),
            np.concatenate(cols_y),
            np.vstack(cols_x),
        )

    def to_frame(self) -> pd.DataFrame:
        data = {"path_id": self.path_id, "t": self.t, "y": self.y}
        for j in range(self.k):
            data[f"x{j + 1}"] = self.x[:, j]
        return pd.DataFrame(data)


def write_panel(sample: PanelSample, path) -> None:
    """Write the panel CSV (header path_id,t,y,x1,...,xk)."""
    sample.to_frame().to_csv(path, index=False)


def load_panel(path, schema: dict | None = None) -> PanelSample:
    """Read a panel CSV.

    ``schema`` may remap column names, e.g. ``{"path_id": "shift",
    "t": "trip", "y": "quit", "x": ["inc", "hrs"]}``.  Rows are sorted
    by (path_id, t); malformed rows raise :class:`ParseError` naming
    the 1-based file line (header is line 1).
    """
    df = pd.read_csv(path)
    if df.shape[0] == 0:
        raise ParseError("no observations")
    schema = schema or {}
    pid_col = schema.get("path_id", "path_id")
    t_col = schema.get("t", "t")
    y_col = schema.get("y", "y")
    x_cols = schema.get("x")
    if x_cols is None:
        x_cols = [c for c in df.columns if c not in (pid_col, t_col, y_col)]
    for col in [pid_col, t_col, y_col, *x_cols]:
        if col not in df.columns:
            raise ParseError(f"missing column {col!r}")

    def _numeric(col):
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = np.flatnonzero(vals.isna().to_numpy() & df[col].notna().to_numpy())
        missing = np.flatnonzero(df[col].isna().to_numpy())
        first_bad = min(
            [int(b) for b in bad] + [int(m) for m in missing], default=None
        )
        if first_bad is not None:
            raise ParseError(f"non-numeric value in column {col!r} on line {first_bad + 2}")
        return vals.to_numpy()

    pid = _numeric(pid_col).astype(np.int64)
    t = _numeric(t_col).astype(np.int64)
    y = _numeric(y_col)
    bad_y = np.flatnonzero(~np.isin(y, (0, 1)))
    if bad_y.size:
        raise ParseError(f"choice not in {{0,1}} on line {int(bad_y[0]) + 2}")
    x = np.column_stack([_numeric(c) for c in x_cols])
    dup = pd.DataFrame({"p": pid, "t": t}).duplicated()
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise IntegrityError(
            f"duplicate (path_id, t) = ({pid[i]}, {t[i]}) on line {i + 2}"
        )
    return PanelSample(pid, t, y.astype(np.int64), x)


def build_taxi_states(trips) -> PanelSample:
    """Turn per-trip shift records into a cumulative-state stopping panel.

    ``trips`` is an iterable of (shift_id, trip_revenue, trip_minutes)
    or a DataFrame with those columns.  Each shift becomes one path
    with x = (cumulative revenue, cumulative minutes); every trip has
    y=0 except the last of the shift, which has y=1 (the quit).
    """
    if isinstance(trips, pd.DataFrame):
        df = trips[["shift_id", "trip_revenue", "trip_minutes"]].copy()
    else:
        df = pd.DataFrame(list(trips), columns=["shift_id", "trip_revenue", "trip_minutes"])
    if df.shape[0] == 0:
        raise ParseError("no observations")
    rev = df["trip_revenue"].to_numpy(dtype=float)
    mins = df["trip_minutes"].to_numpy(dtype=float)
    if np.any(rev < 0):
        i = int(np.flatnonzero(rev < 0)[0])
        raise ValidationError(f"negative trip revenue in row {i}")
    if np.any(mins < 0):
        i = int(np.flatnonzero(mins < 0)[0])
        raise ValidationError(f"negative trip minutes in row {i}")

    pid_out, t_out, y_out, x_out = [], [], [], []
    for label, (sid, grp) in enumerate(df.groupby("shift_id", sort=False)):
        n = grp.shape[0]
        if n == 0:  # pandas groupby never yields empty groups; kept for clarity
            warnings.warn(f"shift {sid} has no trips; skipped")
            continue
        cum_rev = np.cumsum(grp["trip_revenue"].to_numpy(dtype=float))
        cum_min = np.cumsum(grp["trip_minutes"].to_numpy(dtype=float))
        pid_out.append(np.full(n, label, dtype=np.int64))
        t_out.append(np.arange(n, dtype=np.int64))
        y = np.zeros(n, dtype=np.int64)
        y[-1] = 1
        y_out.append(y)
        x_out.append(np.column_stack([cum_rev, cum_min]))
    return PanelSample(
        np.concatenate(pid_out),
        np.concatenate(t_out),
        np.concatenate(y_out),
        np.vstack(x_out),
    )


def load_trips(path) -> pd.DataFrame:
    """Read a trips CSV (header shift_id,trip_revenue,trip_minutes)."""
    df = pd.read_csv(path)
    for col in ("shift_id", "trip_revenue", "trip_minutes"):
        if col not in df.columns:
            raise ParseError(f"missing column {col!r}")
    if df.shape[0] == 0:
        raise ParseError("no observations")
    return df


@dataclass(frozen=True)
class UtilitySpec:
    """Known utility transforms W0, W1 plus discount factor.

    ``w0``/``w1`` map an (n, k) state matrix to (n, k0)/(n, k1); either
    block may be empty.  ``terminal_action`` marks stopping data: when
    set to 1, a path whose final choice is 1 ended structurally and its
    unobserved future contributes exact zeros to forward sums.
    """

    w0: Callable[[np.ndarray], np.ndarray]
    w1: Callable[[np.ndarray], np.ndarray]
    beta: float
    k0: int
    k1: int
    names: tuple[str, ...] = ()
    terminal_action: int | None = None

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ValidationError(f"discount factor must lie in (0,1), got {self.beta}")
        if self.k0 < 0 or self.k1 < 0 or self.k0 + self.k1 < 1:
            raise ValidationError("need k0, k1 >= 0 with k0 + k1 >= 1")
        if self.names and len(self.names) != self.k0 + self.k1:
            raise ValidationError("names must have length k0 + k1")

    @property
    def k_theta(self) -> int:
        return self.k0 + self.k1

    def component_names(self) -> tuple[str, ...]:
        if self.names:
            return self.names
        return tuple(
            [f"theta0_{j + 1}" for j in range(self.k0)]
            + [f"theta1_{j + 1}" for j in range(self.k1)]
        )

    def block(self, x: np.ndarray, d: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self.w1(x) if d == 1 else self.w0(x)
        out = np.asarray(out, dtype=float)
        want = self.k1 if d == 1 else self.k0
        if out.ndim != 2 or out.shape != (x.shape[0], want):
            raise ValidationError(
                f"W{d} returned shape {out.shape}, expected ({x.shape[0]}, {want})"
            )
        return out


def apply_transforms(sample: PanelSample, spec: UtilitySpec) -> np.ndarray:
    """Stacked (W0(x), W1(x)) rows, shape (n, k_theta)."""
    w0 = spec.block(sample.x, 0)
    w1 = spec.block(sample.x, 1)
    out = np.hstack([w0, w1])
    bad = ~np.isfinite(out)
    if bad.any():
        i = int(np.flatnonzero(bad.any(axis=1))[0])
        raise NumericError(f"transform produced non-finite values at observation {i}")
    return out


def _empty_block(x: np.ndarray) -> np.ndarray:
    return np.empty((np.atleast_2d(x).shape[0], 0))


def mc_utility_spec(beta: float = 0.9) -> UtilitySpec:
    """Monte Carlo estimation spec: W0 empty (constant absorbed), W1 = (x1, x2)."""
    return UtilitySpec(
        w0=_empty_block,
        w1=lambda x: np.atleast_2d(np.asarray(x, dtype=float))[:, :2],
        beta=beta,
        k0=0,
        k1=2,
        names=("theta1", "theta2"),
    )


def constant_utility_spec(beta: float = 0.9) -> UtilitySpec:
    """W1 = (1,): exercises the constant-direction basis identity b*_1 = 1."""
    return UtilitySpec(
        w0=_empty_block,
        w1=lambda x: np.ones((np.atleast_2d(x).shape[0], 1)),
        beta=beta,
        k0=0,
        k1=1,
        names=("const",),
    )


def taxi_utility_spec(beta: float = 0.5) -> UtilitySpec:
    """Taxi stopping spec: W1 = (income), W0 = (blocks, blocks^2).

    Cumulative time enters in 5-minute blocks; quitting (y=1) ends the
    shift, so the spec marks action 1 as terminal.
    """

    def w0(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = x[:, 1] / 5.0
        return np.column_stack([h, h * h])

    def w1(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x[:, :1]

    return UtilitySpec(
        w0=w0,
        w1=w1,
        beta=beta,
        k0=2,
        k1=1,
        names=("theta_c01", "theta_c02", "theta_u"),
        terminal_action=1,
    )


UTILITY_SPECS = {
    "mc": mc_utility_spec,
    "const": constant_utility_spec,
    "taxi": taxi_utility_spec,
}


def make_utility_spec(name: str, beta: float) -> UtilitySpec:
    try:
        factory = UTILITY_SPECS[name]
    except KeyError:
        raise ValidationError(
            f"unknown utility spec {name!r}; choose from {sorted(UTILITY_SPECS)}"
        ) from None
    return factory(beta)
