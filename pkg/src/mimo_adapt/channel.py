"""Correlated MU-MIMO channel tasks and few-shot datasets.

A task is one wireless environment: a pair of exponential antenna
correlation matrices, [R]_ij = rho^|i-j|, on the transmit and receive
sides.  Channels are drawn with the Kronecker model H = R_r^{1/2} G R_t^{1/2}
with G i.i.d. circularly-symmetric complex Gaussian of unit variance.
Everything is a pure function of (config, spec, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TRAIN_RHOS = (0.75, 0.65, 0.55, 0.45, 0.35, 0.25, 0.15, 0.05)
DEFAULT_TEST_RHO = 0.90


@dataclass(frozen=True)
class SystemConfig:
    """MU-MIMO system dimensions and operating point."""

    num_users: int = 4
    tx_antennas: int = 8
    rx_antennas: int = 2
    total_power: float = 1.0
    snr_db: float = 20.0
    streams_per_user: int = 2

    def __post_init__(self):
        if self.num_users * self.streams_per_user > self.tx_antennas:
            raise ValueError(f"K*d = {self.num_users * self.streams_per_user} streams exceed "
                             f"Nt = {self.tx_antennas} transmit antennas")
        if self.total_power <= 0:
            raise ValueError("total_power must be positive")

    @property
    def noise_power(self):
        return self.total_power * 10.0 ** (-self.snr_db / 10.0)

    def noise_power_at(self, snr_db):
        return self.total_power * 10.0 ** (-float(snr_db) / 10.0)

    def to_dict(self):
        return {"num_users": self.num_users, "tx_antennas": self.tx_antennas,
                "rx_antennas": self.rx_antennas, "total_power": self.total_power,
                "snr_db": self.snr_db, "streams_per_user": self.streams_per_user}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def make_correlation(n, rho):
    """Exponential correlation matrix with entries rho^|i-j| (complex dtype, zero imag)."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"correlation coefficient must be in [0, 1), got {rho}")
    if n < 1:
        raise ValueError("matrix order must be at least 1")
    idx = np.arange(n)
    r = rho ** np.abs(idx[:, None] - idx[None, :])
    return r.astype(np.complex128)


def sqrt_psd(a, herm_tol=1e-10):
    """Hermitian square root of a Hermitian PSD matrix, clamping eigenvalues at 0."""
    a = np.asarray(a, dtype=np.complex128)
    dev = float(np.max(np.abs(a - a.conj().T)))
    if dev > herm_tol:
        raise ValueError(f"matrix is not Hermitian (deviation {dev:.3e})")
    w, q = np.linalg.eigh(a)
    w = np.clip(w, 0.0, None)
    return (q * np.sqrt(w)) @ q.conj().T


@dataclass(frozen=True)
class ChannelTask:
    """One environment: correlation coefficients plus its base RNG seed."""

    task_id: str
    rho_tx: float
    rho_rx: float
    seed: int

    def correlation_tx(self, config):
        return make_correlation(config.tx_antennas, self.rho_tx)

    def correlation_rx(self, config):
        return make_correlation(config.rx_antennas, self.rho_rx)

    def sqrt_correlations(self, config):
        return (sqrt_psd(self.correlation_rx(config)), sqrt_psd(self.correlation_tx(config)))

    def to_dict(self):
        return {"task_id": self.task_id, "rho_tx": self.rho_tx,
                "rho_rx": self.rho_rx, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(task_id=d["task_id"], rho_tx=d["rho_tx"], rho_rx=d["rho_rx"], seed=d["seed"])


@dataclass(frozen=True)
class ChannelSample:
    """Per-user channel matrices stacked as (K, Nr, Nt) complex128."""

    h: np.ndarray

    def __post_init__(self):
        if self.h.ndim != 3:
            raise ValueError(f"expected (K, Nr, Nt) channel stack, got shape {self.h.shape}")

    def __len__(self):
        return self.h.shape[0]

    def __getitem__(self, k):
        return self.h[k]


def sample_channels(task, config, n, rng):
    """Draw n channel realizations, returned stacked as (n, K, Nr, Nt)."""
    k, nr, nt = config.num_users, config.rx_antennas, config.tx_antennas
    rr_sqrt, rt_sqrt = task.sqrt_correlations(config)
    g = (rng.standard_normal((n, k, nr, nt)) + 1j * rng.standard_normal((n, k, nr, nt)))
    g *= np.sqrt(0.5)
    return rr_sqrt @ g @ rt_sqrt


def sample_channel(task, config, rng):
    """Draw a single ChannelSample from the task's distribution."""
    return ChannelSample(sample_channels(task, config, 1, rng)[0])


@dataclass(frozen=True)
class TaskDataset:
    """Few-shot support set and held-out query set drawn from one task."""

    task: ChannelTask
    support: list
    query: list
    support_stack: np.ndarray = field(repr=False, default=None)
    query_stack: np.ndarray = field(repr=False, default=None)


def stack_samples(samples):
    return np.stack([s.h for s in samples], axis=0)


def build_dataset(task, config, n_support, n_query, seed):
    """Support/query sets from disjoint RNG substreams derived from seed."""
    if n_support < 1 or n_query < 1:
        raise ValueError("support and query sizes must be at least 1")
    ss_support, ss_query = np.random.SeedSequence(seed).spawn(2)
    supp = sample_channels(task, config, n_support, np.random.Generator(np.random.PCG64(ss_support)))
    query = sample_channels(task, config, n_query, np.random.Generator(np.random.PCG64(ss_query)))
    return TaskDataset(task=task,
                       support=[ChannelSample(h) for h in supp],
                       query=[ChannelSample(h) for h in query],
                       support_stack=supp, query_stack=query)


@dataclass(frozen=True)
class SuiteSpec:
    """Correlation grid for the training tasks plus the held-out testing task."""

    train_rhos: tuple = DEFAULT_TRAIN_RHOS
    test_rho: float = DEFAULT_TEST_RHO
    base_seed: int = 0

    def to_dict(self):
        return {"train_rhos": list(self.train_rhos), "test_rho": self.test_rho,
                "base_seed": self.base_seed}

    @classmethod
    def from_dict(cls, d):
        return cls(train_rhos=tuple(d["train_rhos"]), test_rho=d["test_rho"],
                   base_seed=d["base_seed"])


def make_task_suite(config, spec=None):
    """Training tasks (ordered by decreasing similarity to the test task) plus the test task."""
    spec = spec or SuiteSpec()
    rhos = list(spec.train_rhos) + [spec.test_rho]
    if len(set(rhos)) != len(rhos):
        raise ValueError("task correlation coefficients must be distinct environments")
    seeds = np.random.SeedSequence(spec.base_seed).generate_state(len(rhos))
    order = sorted(range(len(spec.train_rhos)),
                   key=lambda i: abs(spec.train_rhos[i] - spec.test_rho))
    training = [ChannelTask(task_id=f"train{rank + 1}", rho_tx=spec.train_rhos[i],
                            rho_rx=spec.train_rhos[i], seed=int(seeds[i]))
                for rank, i in enumerate(order)]
    testing = ChannelTask(task_id="test", rho_tx=spec.test_rho, rho_rx=spec.test_rho,
                          seed=int(seeds[-1]))
    return training, testing


def suite_to_json(config, training, testing, spec=None):
    doc = {"config": config.to_dict(),
           "tasks": [t.to_dict() for t in training],
           "testing": testing.to_dict()}
    if spec is not None:
        doc["spec"] = spec.to_dict()
    return json.dumps(doc, indent=2)


def suite_from_json(text):
    doc = json.loads(text)
    config = SystemConfig.from_dict(doc["config"])
    training = [ChannelTask.from_dict(d) for d in doc["tasks"]]
    testing = ChannelTask.from_dict(doc["testing"])
    return config, training, testing
