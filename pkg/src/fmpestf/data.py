"""Dataset loading, synthetic traffic generation, windowing and splits.

Series files are plain delimited text: one row per timestep, one column per
node per channel in channel-major blocks, preceded by a header row
``#interval_min=<k> channels=<D>``.  Adjacency files are either a dense
``N x N`` matrix or an edge list of ``src dst weight`` lines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

MINUTES_PER_DAY = 24 * 60


class DataFormatError(ValueError):
    """Input file violates the declared format."""


@dataclass
class TrafficGraph:
    """Observation-point graph: nonnegative adjacency with zero diagonal."""

    n_nodes: int
    adjacency: np.ndarray
    node_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataFormatError(f"adjacency must be square, got shape {a.shape}")
        if a.shape[0] != self.n_nodes:
            raise DataFormatError(f"adjacency is {a.shape[0]}x{a.shape[0]} "
                                  f"but n_nodes={self.n_nodes}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise DataFormatError("adjacency entries must be finite and nonnegative")
        # undirected convention: symmetrize, no self loops on load
        a = np.maximum(a, a.T)
        np.fill_diagonal(a, 0.0)
        self.adjacency = a
        if not self.node_ids:
            self.node_ids = [str(i) for i in range(self.n_nodes)]


@dataclass
class SampleWindow:
    """One training example: history block plus the horizon to predict.

    ``history`` is ``[D, N, T]``; ``target`` is ``[N, T']`` in raw units taken
    from channel 0 of the steps immediately after the history range.
    ``slots``/``dows`` index the history steps (time-of-day slot, day-of-week).
    """

    history: np.ndarray
    target: np.ndarray
    slots: np.ndarray
    dows: np.ndarray
    start: int
    slots_per_day: int


@dataclass
class Normalizer:
    """Per-channel z-score statistics fitted on the training portion only."""

    mean: np.ndarray
    std: np.ndarray

    def normalize(self, history: np.ndarray) -> np.ndarray:
        return (history - self.mean[:, None, None]) / self.std[:, None, None]

    def denormalize(self, history: np.ndarray) -> np.ndarray:
        return history * self.std[:, None, None] + self.mean[:, None, None]


@dataclass
class DatasetSplit:
    train: list[SampleWindow]
    val: list[SampleWindow]
    test: list[SampleWindow]
    normalizer: Normalizer
    warnings: list[str] = field(default_factory=list)


def slots_per_day_for(interval_min: int) -> int:
    if interval_min <= 0 or MINUTES_PER_DAY % interval_min != 0:
        raise DataFormatError(f"interval {interval_min} min does not divide a day evenly")
    return MINUTES_PER_DAY // interval_min


def _tokens(line: str) -> list[str]:
    return line.replace(",", " ").split()


def load_series(path, expected_nodes: int | None = None):
    """Read a series file; returns ``(series [D,N,T], interval_min, slots_per_day)``."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DataFormatError(f"{path}: missing '#interval_min=... channels=...' header row")
    header = {}
    for tok in lines[0].lstrip("#").split():
        if "=" not in tok:
            raise DataFormatError(f"{path}: malformed header token {tok!r}")
        key, val = tok.split("=", 1)
        header[key] = val
    try:
        interval_min = int(header["interval_min"])
        channels = int(header["channels"])
    except (KeyError, ValueError) as err:
        raise DataFormatError(f"{path}: header must declare integer interval_min "
                              f"and channels ({err})") from err
    spd = slots_per_day_for(interval_min)

    rows = []
    width = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        toks = _tokens(line)
        if width is None:
            width = len(toks)
            if width % channels != 0:
                raise DataFormatError(f"{path}: line {lineno}: {width} columns is not "
                                      f"a multiple of channels={channels}")
        elif len(toks) != width:
            raise DataFormatError(f"{path}: line {lineno}: ragged row, expected "
                                  f"{width} columns, got {len(toks)}")
        try:
            rows.append([float(t) for t in toks])
        except ValueError as err:
            raise DataFormatError(f"{path}: line {lineno}: non-numeric cell ({err})") from err
    if not rows:
        raise DataFormatError(f"{path}: no data rows")

    n_nodes = width // channels
    if expected_nodes is not None and n_nodes != expected_nodes:
        raise DataFormatError(f"{path}: series has {n_nodes} nodes per row but the "
                              f"adjacency declares {expected_nodes}")
    values = np.asarray(rows, dtype=np.float64)          # [T, D*N]
    series = values.reshape(len(rows), channels, n_nodes).transpose(1, 2, 0)
    if not np.all(np.isfinite(series)):
        raise DataFormatError(f"{path}: series contains non-finite values")
    return series, interval_min, spd


def write_series(path, series: np.ndarray, interval_min: int) -> None:
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3:
        raise DataFormatError(f"series must be [D,N,T], got shape {series.shape}")
    d, n, t = series.shape
    flat = series.transpose(2, 0, 1).reshape(t, d * n)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#interval_min={interval_min} channels={d}\n")
        for row in flat:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def load_adjacency(path, n_nodes: int | None = None) -> TrafficGraph:
    """Read a dense matrix or an edge list; returns a symmetrized graph."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = [(i + 1, _tokens(line)) for i, line in enumerate(fh.read().splitlines())
               if line.strip() and not line.lstrip().startswith("#")]
    if not raw:
        raise DataFormatError(f"{path}: empty adjacency file")
    widths = {len(toks) for _, toks in raw}
    square = widths == {len(raw)}
    if square and widths == {3} and n_nodes is not None and n_nodes != 3:
        square = False  # three edge lines, disambiguated by the node-count hint
    if square:
        mat = []
        for lineno, toks in raw:
            try:
                mat.append([float(t) for t in toks])
            except ValueError as err:
                raise DataFormatError(f"{path}: line {lineno}: non-numeric cell ({err})") from err
        a = np.asarray(mat)
        if n_nodes is not None and a.shape[0] != n_nodes:
            raise DataFormatError(f"{path}: adjacency is {a.shape[0]}x{a.shape[0]}, "
                                  f"expected {n_nodes} nodes")
        return TrafficGraph(a.shape[0], a)
    if widths != {3}:
        raise DataFormatError(f"{path}: expected an NxN matrix or 'src dst weight' "
                              f"edge lines, got row widths {sorted(widths)}")
    edges = []
    for lineno, toks in raw:
        try:
            src, dst, w = int(toks[0]), int(toks[1]), float(toks[2])
        except ValueError as err:
            raise DataFormatError(f"{path}: line {lineno}: bad edge ({err})") from err
        if src < 0 or dst < 0:
            raise DataFormatError(f"{path}: line {lineno}: negative node index")
        edges.append((src, dst, w))
    size = n_nodes if n_nodes is not None else max(max(s, d) for s, d, _ in edges) + 1
    a = np.zeros((size, size))
    for src, dst, w in edges:
        if src >= size or dst >= size:
            raise DataFormatError(f"{path}: edge ({src},{dst}) exceeds {size} nodes")
        a[src, dst] = max(a[src, dst], w)
    return TrafficGraph(size, a)


def write_adjacency(path, adjacency: np.ndarray) -> None:
    a = np.asarray(adjacency, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in a:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def _coupling_graph(n_nodes: int, rng: np.random.Generator) -> np.ndarray:
    """Ring plus a few random chords, symmetric weights in (0, 1]."""
    a = np.zeros((n_nodes, n_nodes))
    for i in range(n_nodes):
        a[i, (i + 1) % n_nodes] = 1.0
    for _ in range(max(1, n_nodes // 2)):
        i, j = rng.integers(0, n_nodes, size=2)
        if i != j:
            a[i, j] = max(a[i, j], 0.4 + 0.4 * rng.random())
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 0.0)
    return a


def _observed_adjacency(true_adj: np.ndarray, rng: np.random.Generator,
                        edge_recall: float) -> np.ndarray:
    """Imperfect road-network view of the coupling graph.

    Drops a seeded fraction of true edges and adds a few spurious ones, so a
    forecaster holding only this matrix cannot see every flow relation.
    """
    n = true_adj.shape[0]
    upper = np.triu(true_adj).copy()
    for i, j in zip(*np.nonzero(upper)):
        if rng.random() > edge_recall:
            upper[i, j] = 0.0
    added = 0
    attempts = 0
    while added < max(1, n // 4) and attempts < 16 * n:
        i, j = rng.integers(0, n, size=2)
        if i < j and true_adj[i, j] == 0.0 and upper[i, j] == 0.0:
            upper[i, j] = 0.4 + 0.4 * rng.random()
            added += 1
        attempts += 1
    observed = upper + upper.T
    if not observed.any():                   # keep at least one edge
        observed[0, 1] = observed[1, 0] = 1.0
    return observed


def synth_series(n_nodes: int, days: int, interval_min: int = 5, seed: int = 0,
                 coupling: float = 0.5, noise: float = 3.0, drift: float = 12.0,
                 weekly_amp: float = 0.15, daily_amp: float = 55.0,
                 spike_rate: float = 0.01, outage_rate: float = 0.025,
                 edge_recall: float = 0.6):
    """Generate a synthetic traffic series plus an observed road graph.

    Each node's flow is a daily sinusoid with a node-specific phase and
    amplitude, modulated over the week, shifted by a slow mean-reverting
    drift, with one-step-lagged spillover from graph neighbours and seeded
    observation noise on top.  The noise includes rare positive bursts
    (``spike_rate`` per step) and sensor outages that zero out short runs of
    observations (``outage_rate`` starts one, mean length ~5 steps), the
    familiar missing-value convention of loop-detector feeds.  Setting
    ``noise`` to 0 disables all three corruption processes.

    Spillover flows through the full coupling graph, but the returned
    :class:`TrafficGraph` holds only an imperfect observation of it
    (``edge_recall`` of the true edges plus a few spurious ones), the way a
    road map under-determines real flow relations.  Fully determined by
    ``seed``.
    """
    if n_nodes < 2:
        raise ValueError(f"synthetic generator needs n_nodes >= 2, got {n_nodes}")
    if days < 2:
        raise ValueError(f"synthetic generator needs days >= 2, got {days}")
    spd = slots_per_day_for(interval_min)
    t_total = days * spd
    rng = np.random.default_rng(seed)

    adjacency = _coupling_graph(n_nodes, rng)
    level = rng.uniform(130.0, 170.0, size=n_nodes)
    amp = daily_amp * rng.uniform(0.8, 1.2, size=n_nodes)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=n_nodes)

    t = np.arange(t_total)
    slots = t % spd
    dows = (t // spd) % 7
    daily = np.sin(2.0 * math.pi * slots[None, :] / spd + phase[:, None])
    week = 1.0 + weekly_amp * np.cos(2.0 * math.pi * dows / 7.0)
    periodic = amp[:, None] * daily * week[None, :]

    if drift > 0.0:
        rho = 0.995
        sigma = drift * math.sqrt(1.0 - rho * rho)
        eps = rng.normal(size=(n_nodes, t_total))
        slow = np.empty((n_nodes, t_total))
        slow[:, 0] = drift * eps[:, 0]
        for step in range(1, t_total):
            slow[:, step] = rho * slow[:, step - 1] + sigma * eps[:, step]
    else:
        slow = np.zeros((n_nodes, t_total))

    centered = periodic + slow
    if coupling > 0.0:
        row_sum = adjacency.sum(axis=1, keepdims=True)
        row_sum[row_sum == 0] = 1.0
        norm_adj = adjacency / row_sum
        lagged = np.concatenate([centered[:, :1], centered[:, :-1]], axis=1)
        centered = centered + coupling * (norm_adj @ lagged)

    if noise > 0.0:
        white = noise * rng.normal(size=(n_nodes, t_total))
        if spike_rate > 0.0:
            bursts = rng.random(size=(n_nodes, t_total)) < spike_rate
            white = white + bursts * rng.exponential(12.0 * noise,
                                                     size=(n_nodes, t_total))
    else:
        white = 0.0
    values = np.maximum(level[:, None] + centered + white, 0.0)
    if noise > 0.0 and outage_rate > 0.0:
        starts = rng.random(size=(n_nodes, t_total)) < outage_rate
        keep_down = rng.random(size=(n_nodes, t_total)) < 0.8  # mean run ~5 steps
        down = np.zeros(n_nodes, dtype=bool)
        for step in range(t_total):
            down = starts[:, step] | (down & keep_down[:, step])
            values[down, step] = 0.0
    series = values[None, :, :]                           # [1, N, T]
    observed = _observed_adjacency(adjacency, rng, edge_recall)
    return series, TrafficGraph(n_nodes, observed)


def make_windows(series: np.ndarray, window: int, horizon: int,
                 slots_per_day: int, stride: int = 1) -> list[SampleWindow]:
    """Slice a series into (history, target) windows with time indices."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3:
        raise DataFormatError(f"series must be [D,N,T], got shape {series.shape}")
    t_total = series.shape[2]
    needed = window + horizon
    if t_total < needed:
        raise DataFormatError(f"series length {t_total} is shorter than the "
                              f"required minimum {needed} (window {window} + horizon {horizon})")
    steps = np.arange(t_total)
    all_slots = steps % slots_per_day
    all_dows = (steps // slots_per_day) % 7
    windows = []
    for start in range(0, t_total - needed + 1, stride):
        windows.append(SampleWindow(
            history=series[:, :, start:start + window].copy(),
            target=series[0, :, start + window:start + needed].copy(),
            slots=all_slots[start:start + window].copy(),
            dows=all_dows[start:start + window].copy(),
            start=start,
            slots_per_day=slots_per_day,
        ))
    return windows


def split_chronological(windows: list[SampleWindow],
                        ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)) -> DatasetSplit:
    """Contiguous train/val/test partition; z-scores histories on train stats.

    Sizes follow floor(r_train*n), floor(r_val*n), remainder-to-test.  Targets
    stay in raw units.
    """
    n = len(windows)
    if n < 5:
        raise ValueError(f"need at least 5 windows to split, got {n}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n_train = int(math.floor(ratios[0] * n))
    n_val = int(math.floor(ratios[1] * n))
    train, val, test = (windows[:n_train],
                        windows[n_train:n_train + n_val],
                        windows[n_train + n_val:])

    stacked = np.stack([w.history for w in train])        # [W, D, N, T]
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    warnings = []
    for ch in range(std.size):
        if std[ch] < 1e-12:
            warnings.append(f"channel {ch} is constant on the train portion; "
                            f"std clamped to 1.0")
            std[ch] = 1.0
    normalizer = Normalizer(mean=mean, std=std)

    def z(ws):
        return [replace(w, history=normalizer.normalize(w.history)) for w in ws]

    return DatasetSplit(train=z(train), val=z(val), test=z(test),
                        normalizer=normalizer, warnings=warnings)
