"""Per-client non-IID datasets for the simulator.

Covers synthetic cluster data, six-channel motion recordings with
sliding-window featurization, CSV ingestion/emission, skewed partitioning
into per-client train/test splits, the shared public set used for
distillation, and uniform data-sharing augmentation. Every operation is a
pure function of its inputs plus a seed, and samples keep provenance indices
into their source pool so disjointness can be audited.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

CHANNEL_NAMES = ("ax", "ay", "az", "gx", "gy", "gz")

# Calibrated once against a centralized 3-layer net at dim 64 (>= 0.90
# held-out accuracy required); see tests/test_data.py.
DEFAULT_NOISE_SIGMA = 0.25


@dataclass(frozen=True)
class RawRecording:
    """One (subject, activity, trial) worth of six-channel motion signals."""

    subject: str
    activity: int
    trial: int
    sample_rate_hz: int
    signals: np.ndarray  # shape (6, T)

    def __post_init__(self) -> None:
        sig = np.asarray(self.signals, dtype=np.float64)
        if sig.ndim != 2 or sig.shape[0] != len(CHANNEL_NAMES):
            raise ValueError(
                f"signals must be ({len(CHANNEL_NAMES)}, T), got {sig.shape}"
            )
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not 0 <= self.activity:
            raise ValueError("activity label must be non-negative")
        object.__setattr__(self, "signals", sig)

    @property
    def num_samples(self) -> int:
        return self.signals.shape[1]


@dataclass(frozen=True)
class Sample:
    features: np.ndarray  # flat (d,)
    label: int


@dataclass(frozen=True)
class LabeledPool:
    """Feature matrix X (n, d), labels y (n,), and provenance indices."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    indices: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"inconsistent pool shapes: X {X.shape}, y {y.shape}")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels out of range")
        idx = self.indices
        if idx is None:
            idx = np.arange(X.shape[0], dtype=np.int64)
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        if idx.shape != y.shape:
            raise ValueError("provenance indices must match pool length")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, positions: np.ndarray) -> "LabeledPool":
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledPool(
            X=self.X[positions],
            y=self.y[positions],
            num_classes=self.num_classes,
            indices=self.indices[positions],
        )

    def class_positions(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.y == label)


@dataclass(frozen=True)
class SharedSet:
    """The public set distillation outputs are computed on."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    indices: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_indices: np.ndarray
    test_indices: np.ndarray
    shared_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]

    @property
    def n_test(self) -> int:
        return self.test_x.shape[0]


@dataclass(frozen=True)
class PartitionPlan:
    num_clients: int
    per_client_train: int = 480
    per_client_test: int = 160
    skew: str = "random-counts"
    alpha: float | None = None
    seed: int = 0
    client_shift: float = 0.0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.per_client_train < 1 or self.per_client_test < 1:
            raise ValueError("per-client sample counts must be positive")
        if self.skew not in ("random-counts", "dirichlet"):
            raise ValueError(f"unknown skew kind {self.skew!r}")
        if self.skew == "dirichlet" and (self.alpha is None or self.alpha <= 0):
            raise ValueError("dirichlet skew needs alpha > 0")
        if self.client_shift < 0:
            raise ValueError("client_shift must be >= 0")


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


def window_features(
    rec: RawRecording,
    window_seconds: float = 1.0,
    stride_seconds: float | None = None,
) -> list[Sample]:
    """Slice a recording into flat feature windows labeled by its activity.

    Each window flattens all six channels channel-major, so a 1-second window
    at R Hz has dimension 6*R. Recordings shorter than one window yield an
    empty list.
    """
    rate = rec.sample_rate_hz
    wlen = int(round(window_seconds * rate))
    if wlen < 1:
        raise ValueError("window must cover at least one sample")
    step = wlen if stride_seconds is None else int(round(stride_seconds * rate))
    if step < 1:
        raise ValueError("stride must cover at least one sample")
    samples = []
    for start in range(0, rec.num_samples - wlen + 1, step):
        feats = rec.signals[:, start : start + wlen].reshape(-1).copy()
        samples.append(Sample(features=feats, label=rec.activity))
    return samples


def pool_from_samples(samples: list[Sample], num_classes: int) -> LabeledPool:
    if not samples:
        raise ValueError("no samples to pool")
    dims = {s.features.shape for s in samples}
    if len(dims) != 1:
        raise ValueError(f"mixed feature dimensions in pool: {sorted(dims)}")
    X = np.stack([s.features for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return LabeledPool(X=X, y=y, num_classes=num_classes)


def pool_from_recordings(
    recordings: list[RawRecording],
    num_classes: int,
    window_seconds: float = 1.0,
    stride_seconds: float | None = None,
) -> LabeledPool:
    samples: list[Sample] = []
    for rec in recordings:
        samples.extend(window_features(rec, window_seconds, stride_seconds))
    return pool_from_samples(samples, num_classes)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


def synth_har(
    num_classes: int = 10,
    samples_per_class: int = 1000,
    dim: int = 64,
    seed: int = 0,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> LabeledPool:
    """Gaussian class clusters: unit-norm mean per class, shared isotropic noise."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    means = stream(seed, "means").standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    rng = stream(seed, "samples")
    blocks = []
    labels = []
    for c in range(num_classes):
        blocks.append(means[c] + noise_sigma * rng.standard_normal((samples_per_class, dim)))
        labels.append(np.full(samples_per_class, c, dtype=np.int64))
    return LabeledPool(X=np.vstack(blocks), y=np.concatenate(labels), num_classes=num_classes)


def synth_recordings(
    num_subjects: int,
    num_classes: int = 10,
    seconds_per_recording: float = 8.0,
    sample_rate_hz: int = 50,
    seed: int = 0,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    trials_per_activity: int = 1,
) -> list[RawRecording]:
    """Six-channel synthetic recordings whose 1 s windows cluster by activity."""
    n_channels = len(CHANNEL_NAMES)
    means = stream(seed, "channel-means").standard_normal((num_classes, n_channels))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    n_samples = int(round(seconds_per_recording * sample_rate_hz))
    recs = []
    for s in range(num_subjects):
        for c in range(num_classes):
            for t in range(trials_per_activity):
                rng = stream(seed, "signal", s, c, t)
                noise = noise_sigma * rng.standard_normal((n_channels, n_samples))
                recs.append(
                    RawRecording(
                        subject=f"s{s:03d}",
                        activity=c,
                        trial=t,
                        sample_rate_hz=sample_rate_hz,
                        signals=means[c][:, None] + noise,
                    )
                )
    return recs


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def _random_composition(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw over weak compositions of ``total`` into ``parts`` counts."""
    if parts == 1:
        return np.array([total], dtype=np.int64)
    bars = np.sort(rng.choice(total + parts - 1, size=parts - 1, replace=False))
    edges = np.concatenate([[-1], bars, [total + parts - 1]])
    return np.diff(edges).astype(np.int64) - 1


def _dirichlet_counts(total: int, parts: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Round Dirichlet proportions to integer counts that sum exactly."""
    props = rng.dirichlet(np.full(parts, alpha))
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - counts.sum()
    if remainder:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def client_label_counts(plan: PartitionPlan, num_classes: int) -> np.ndarray:
    """Per-client class-count matrix (num_clients, num_classes) for the plan."""
    counts = np.zeros((plan.num_clients, num_classes), dtype=np.int64)
    for cid in range(plan.num_clients):
        rng = stream(plan.seed, "counts", cid)
        if plan.skew == "random-counts":
            counts[cid] = _random_composition(plan.per_client_train, num_classes, rng)
        else:
            counts[cid] = _dirichlet_counts(plan.per_client_train, num_classes, plan.alpha, rng)
    return counts


def partition(
    pool: LabeledPool, plan: PartitionPlan
) -> tuple[list[ClientDataset], LabeledPool]:
    """Split a pool into per-client skewed train sets and balanced test sets.

    Returns the clients plus the leftover pool (never assigned to a client),
    from which the shared public set can be drawn disjointly. When
    ``plan.client_shift`` > 0, each client's feature vectors (train and test)
    are translated by a seeded per-client direction of that magnitude,
    modeling per-user feature distribution skew; provenance indices still
    point at the unshifted pool rows.
    """
    c = pool.num_classes
    if plan.per_client_test % c:
        raise ValueError(
            f"per_client_test {plan.per_client_test} not divisible by {c} classes"
        )
    test_per_class = plan.per_client_test // c
    counts = client_label_counts(plan, c)

    need = counts.sum(axis=0) + test_per_class * plan.num_clients
    have = np.array([len(pool.class_positions(k)) for k in range(c)])
    short = need - have
    if (short > 0).any():
        detail = ", ".join(
            f"class {k} short by {int(short[k])}" for k in range(c) if short[k] > 0
        )
        raise ValueError(f"insufficient pool: {detail}")

    # one seeded permutation per class, consumed sequentially client by client
    queues = []
    cursors = np.zeros(c, dtype=np.int64)
    for k in range(c):
        pos = pool.class_positions(k)
        queues.append(pos[stream(plan.seed, "order", k).permutation(len(pos))])

    def take(k: int, n: int) -> np.ndarray:
        start = cursors[k]
        cursors[k] += n
        return queues[k][start : start + n]

    clients = []
    for cid in range(plan.num_clients):
        train_pos = np.sort(np.concatenate([take(k, int(counts[cid, k])) for k in range(c)]))
        test_pos = np.sort(np.concatenate([take(k, test_per_class) for k in range(c)]))
        train_x = pool.X[train_pos].copy()
        test_x = pool.X[test_pos].copy()
        if plan.client_shift > 0:
            direction = stream(plan.seed, "shift", cid).standard_normal(pool.dim)
            direction *= plan.client_shift / np.linalg.norm(direction)
            train_x += direction
            test_x += direction
        clients.append(
            ClientDataset(
                client_id=cid,
                train_x=train_x,
                train_y=pool.y[train_pos].copy(),
                test_x=test_x,
                test_y=pool.y[test_pos].copy(),
                train_indices=pool.indices[train_pos].copy(),
                test_indices=pool.indices[test_pos].copy(),
            )
        )

    leftover_pos = np.sort(np.concatenate([queues[k][cursors[k] :] for k in range(c)]))
    return clients, pool.subset(leftover_pos)


def build_shared_set(
    pool: LabeledPool, size: int = 500, balanced: bool = True, seed: int = 0
) -> SharedSet:
    """Draw the globally shared public set from a pool disjoint from clients."""
    if size < 1:
        raise ValueError("shared set size must be positive")
    c = pool.num_classes
    if balanced:
        quotas = np.full(c, size // c, dtype=np.int64)
        quotas[: size % c] += 1
        picks = []
        for k in range(c):
            pos = pool.class_positions(k)
            if len(pos) < quotas[k]:
                raise ValueError(
                    f"insufficient pool for shared set: class {k} short by {int(quotas[k] - len(pos))}"
                )
            sel = stream(seed, "shared", k).choice(len(pos), size=int(quotas[k]), replace=False)
            picks.append(pos[np.sort(sel)])
        positions = np.sort(np.concatenate(picks))
    else:
        if len(pool) < size:
            raise ValueError(f"insufficient pool for shared set: short by {size - len(pool)}")
        sel = stream(seed, "shared").choice(len(pool), size=size, replace=False)
        positions = np.sort(sel)
    sub = pool.subset(positions)
    return SharedSet(X=sub.X, y=sub.y, num_classes=c, indices=sub.indices)


def apply_data_sharing(
    clients: list[ClientDataset],
    shared_fraction: float,
    global_set: SharedSet,
    seed: int = 0,
) -> list[ClientDataset]:
    """Augment each client's train set with a uniform draw from the global set.

    The global set must be class-balanced; each client gains
    floor(shared_fraction * |global_set|) samples (without replacement).
    Test sets are untouched, and the added samples are cloud data, so they
    are not client-shifted.
    """
    if not 0.0 <= shared_fraction <= 1.0:
        raise ValueError(f"shared_fraction must be in [0, 1], got {shared_fraction}")
    counts = np.bincount(global_set.y, minlength=global_set.num_classes)
    if counts.min() != counts.max():
        raise ValueError("global set must be class-balanced for data sharing")
    k = int(math.floor(shared_fraction * len(global_set)))
    if k == 0:
        return list(clients)
    out = []
    for client in clients:
        sel = stream(seed, "sharing", client.client_id).choice(
            len(global_set), size=k, replace=False
        )
        sel = np.sort(sel)
        out.append(
            ClientDataset(
                client_id=client.client_id,
                train_x=np.vstack([client.train_x, global_set.X[sel]]),
                train_y=np.concatenate([client.train_y, global_set.y[sel]]),
                test_x=client.test_x,
                test_y=client.test_y,
                train_indices=client.train_indices,
                test_indices=client.test_indices,
                shared_indices=global_set.indices[sel].copy(),
            )
        )
    return out


def partition_manifest(
    clients: list[ClientDataset], shared: SharedSet | None = None
) -> dict:
    """JSON-ready manifest mapping clients to source-pool sample indices."""
    manifest: dict = {
        "schema": "perfed/v1-partition",
        "clients": [
            {
                "client_id": c.client_id,
                "train_indices": [int(i) for i in c.train_indices],
                "test_indices": [int(i) for i in c.test_indices],
            }
            for c in clients
        ],
    }
    if shared is not None:
        manifest["shared_indices"] = [int(i) for i in shared.indices]
    return manifest


# ---------------------------------------------------------------------------
# CSV ingestion / emission
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Recording CSV layout: one row per timestep, grouped by recording."""

    columns: tuple[str, ...] = ("subject", "activity", "trial", "t") + CHANNEL_NAMES
    sample_rate_hz: int = 50
    activity_names: tuple[str, ...] | None = None

    def label_for(self, token: str) -> int:
        if self.activity_names is not None:
            try:
                return self.activity_names.index(token)
            except ValueError:
                raise ValueError(f"unknown label string {token!r}") from None
        try:
            return int(token)
        except ValueError:
            raise ValueError(f"unknown label string {token!r}") from None


def load_csv(path, schema: CsvSchema | None = None) -> list[RawRecording]:
    """Parse recordings grouped by (subject, activity, trial), in file order."""
    schema = schema or CsvSchema()
    groups: dict[tuple, list[list[float]]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("line 1: missing header row") from None
        if tuple(header) != schema.columns:
            raise ValueError(
                f"line 1: header {header!r} does not match schema {list(schema.columns)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(schema.columns):
                raise ValueError(
                    f"line {lineno}: expected {len(schema.columns)} fields, got {len(row)}"
                )
            try:
                label = schema.label_for(row[1])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            try:
                trial = int(row[2])
                values = [float(v) for v in row[4:]]
            except ValueError:
                raise ValueError(f"line {lineno}: malformed numeric field") from None
            groups.setdefault((row[0], label, trial), []).append(values)
    recordings = []
    for (subject, activity, trial), rows in groups.items():
        recordings.append(
            RawRecording(
                subject=subject,
                activity=activity,
                trial=trial,
                sample_rate_hz=schema.sample_rate_hz,
                signals=np.array(rows, dtype=np.float64).T,
            )
        )
    return recordings


def write_csv(recordings: list[RawRecording], path, schema: CsvSchema | None = None) -> None:
    schema = schema or CsvSchema()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.columns)
        for rec in recordings:
            label: object = rec.activity
            if schema.activity_names is not None:
                label = schema.activity_names[rec.activity]
            for i in range(rec.num_samples):
                t = i / rec.sample_rate_hz
                writer.writerow(
                    [rec.subject, label, rec.trial, f"{t:.6f}"]
                    + [repr(float(v)) for v in rec.signals[:, i]]
                )
