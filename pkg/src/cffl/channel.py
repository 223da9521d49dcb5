"""Saleh-Valenzuela channels for an RIS-assisted cell-free downlink.

BS-RIS links ``G_b`` and RIS-UE links ``v_k^H`` are sums of planar-array
steering vectors. The cascaded channel ``h_k = diag(v_k^H) G`` is what the
estimators learn to recover from noisy pilots ``y_t = phi_t h_k F s + n_t``.

All generators are pure functions of their arguments and an explicit
``numpy.random.Generator``; nothing here touches global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array with ``n1 x n2`` elements."""

    n1: int
    n2: int
    wavelength: float = 1.0
    spacing: float | None = None

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError(f"array dimensions must be >= 1, got {self.n1}x{self.n2}")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if self.spacing is None:
            object.__setattr__(self, "spacing", self.wavelength / 2)
        if self.spacing <= 0:
            raise ValueError("element spacing must be positive")

    @property
    def size(self) -> int:
        return self.n1 * self.n2


@dataclass
class PathSet:
    """Multipath components of one link.

    ``azimuth``/``elevation`` are arrival angles at the receiving array. The
    ``*_tx`` angles are departure angles and are only used for BS-RIS links.
    """

    gains: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    azimuth_tx: np.ndarray | None = None
    elevation_tx: np.ndarray | None = None

    def __post_init__(self):
        self.gains = np.atleast_1d(np.asarray(self.gains, dtype=complex))
        self.azimuth = np.atleast_1d(np.asarray(self.azimuth, dtype=float))
        self.elevation = np.atleast_1d(np.asarray(self.elevation, dtype=float))
        if self.azimuth_tx is not None:
            self.azimuth_tx = np.atleast_1d(np.asarray(self.azimuth_tx, dtype=float))
            self.elevation_tx = np.atleast_1d(np.asarray(self.elevation_tx, dtype=float))
        n = self.gains.size
        if n == 0:
            raise ValueError("a path set needs at least one path")
        if self.azimuth.size != n or self.elevation.size != n:
            raise ValueError("gains and angles must have the same length")
        if not np.all(np.isfinite(self.gains)):
            raise ValueError("path gains must be finite")

    def __len__(self):
        return self.gains.size


@dataclass
class PilotConfig:
    """Known pilot configuration shared by transmitter and estimator."""

    ris_phases: np.ndarray  # (pilot_length, N), unit modulus
    beamformer: np.ndarray  # (N_t * B,)
    pilot_symbol: complex = 1.0 + 0.0j

    def __post_init__(self):
        self.ris_phases = np.asarray(self.ris_phases, dtype=complex)
        self.beamformer = np.asarray(self.beamformer, dtype=complex).reshape(-1)
        if not np.allclose(np.abs(self.ris_phases), 1.0, atol=1e-12):
            raise ValueError("RIS phase entries must have unit modulus")
        norm = np.linalg.norm(self.beamformer)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("beamformer must be finite and nonzero")

    @property
    def pilot_length(self) -> int:
        return self.ris_phases.shape[0]


@dataclass
class PilotSample:
    received: np.ndarray  # (pilot_length,) complex
    truth: np.ndarray  # (N, N_t * B) complex
    snr_db: float


@dataclass
class PilotDataset:
    """Samples of one user, stacked along the first axis."""

    received: np.ndarray  # (D, pilot_length) complex
    truth: np.ndarray  # (D, N, M) complex
    snr_db: np.ndarray  # (D,)
    user_id: int = -1
    position: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __len__(self):
        return self.received.shape[0]

    def subset(self, index) -> "PilotDataset":
        return PilotDataset(self.received[index], self.truth[index], self.snr_db[index],
                            self.user_id, self.position)

    def split(self, n_first: int) -> tuple["PilotDataset", "PilotDataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))

    def rsrp(self) -> float:
        """Mean received pilot power over the dataset (linear, per symbol)."""
        return float(np.mean(np.abs(self.received) ** 2))

    @staticmethod
    def concatenate(parts: list["PilotDataset"], user_id: int = -1) -> "PilotDataset":
        return PilotDataset(np.concatenate([p.received for p in parts]),
                            np.concatenate([p.truth for p in parts]),
                            np.concatenate([p.snr_db for p in parts]),
                            user_id)


def steering_vector(geom: ArrayGeometry, azimuth: float, elevation: float) -> np.ndarray:
    """Normalized UPA response, length ``geom.size``.

    Axis-1 phase uses ``cos(elevation)``, axis-2 uses
    ``sin(elevation) cos(azimuth)``; the result is their Kronecker product.
    """
    k = 2 * np.pi * geom.spacing / geom.wavelength
    ramp1 = np.exp(-1j * k * np.cos(elevation) * np.arange(geom.n1))
    ramp2 = np.exp(-1j * k * np.sin(elevation) * np.cos(azimuth) * np.arange(geom.n2))
    return np.kron(ramp1, ramp2) / np.sqrt(geom.size)


def _steering_matrix(geom: ArrayGeometry, azimuth: np.ndarray, elevation: np.ndarray) -> np.ndarray:
    # columns are steering vectors, shape (N, L)
    k = 2 * np.pi * geom.spacing / geom.wavelength
    ramp1 = np.exp(-1j * k * np.outer(np.arange(geom.n1), np.cos(elevation)))
    ramp2 = np.exp(-1j * k * np.outer(np.arange(geom.n2), np.sin(elevation) * np.cos(azimuth)))
    full = ramp1[:, None, :] * ramp2[None, :, :]
    return full.reshape(geom.size, -1) / np.sqrt(geom.size)


def bs_ris_channel(bs_geom: ArrayGeometry, ris_geom: ArrayGeometry, paths: PathSet) -> np.ndarray:
    """BS ``b`` to RIS channel ``G_b`` of shape ``(N, N_t)``."""
    if paths.azimuth_tx is None:
        raise ValueError("BS-RIS paths need departure angles")
    n_t, n = bs_geom.size, ris_geom.size
    a_rx = _steering_matrix(ris_geom, paths.azimuth, paths.elevation)
    u_tx = _steering_matrix(bs_geom, paths.azimuth_tx, paths.elevation_tx)
    scale = math.sqrt(n_t * n / len(paths))
    return scale * (a_rx * paths.gains) @ u_tx.T


def ris_ue_channel(ris_geom: ArrayGeometry, paths: PathSet) -> np.ndarray:
    """RIS to UE row vector ``v^H`` of length ``N``."""
    a = _steering_matrix(ris_geom, paths.azimuth, paths.elevation)
    return math.sqrt(ris_geom.size / len(paths)) * (a @ paths.gains)


def cascade(v_h: np.ndarray, g_all: np.ndarray) -> np.ndarray:
    """``diag(v^H) G``: scales row ``n`` of ``G`` by entry ``n`` of ``v^H``.

    ``v_h`` is the RIS-UE row as returned by :func:`ris_ue_channel`.
    """
    v_h = np.asarray(v_h).reshape(-1)
    g_all = np.asarray(g_all)
    if g_all.ndim != 2 or g_all.shape[0] != v_h.size:
        raise ValueError(f"shape mismatch: v has {v_h.size} entries, G is {g_all.shape}")
    return v_h[:, None] * g_all


def noiseless_pilots(h: np.ndarray, cfg: PilotConfig) -> np.ndarray:
    """``phi_t h F s`` for every pilot symbol ``t``; ``h`` may carry leading batch axes."""
    hf = h @ cfg.beamformer  # (..., N)
    return (hf @ cfg.ris_phases.T) * cfg.pilot_symbol


def received_pilots(h: np.ndarray, cfg: PilotConfig, snr_db: float,
                    rng: np.random.Generator | None = None,
                    signal_power: float | None = None) -> PilotSample:
    """Noisy received pilots for one cascaded channel.

    The noise variance is ``signal_power / 10**(snr_db/10)``. Without an
    explicit ``signal_power`` the empirical power of the clean pilots is used,
    so every sample hits the requested SNR. ``snr_db = inf`` is noiseless.
    """
    clean = noiseless_pilots(h, cfg)
    if np.isinf(snr_db) and snr_db > 0:
        return PilotSample(clean, h, float(snr_db))
    if rng is None:
        raise ValueError("a random generator is required for noisy pilots")
    if signal_power is None:
        signal_power = float(np.mean(np.abs(clean) ** 2))
    sigma2 = signal_power / 10 ** (snr_db / 10)
    noise = np.sqrt(sigma2 / 2) * (rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape))
    return PilotSample(clean + noise, h, float(snr_db))


def complex_to_interleaved(z: np.ndarray) -> np.ndarray:
    """Complex array to float64 array with a trailing (re, im) axis."""
    z = np.asarray(z, dtype=complex)
    return np.stack([z.real, z.imag], axis=-1)


def interleaved_to_complex(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., 0] + 1j * x[..., 1]


# ---------------------------------------------------------------------------
# scenario generation

@dataclass
class Scenario:
    """Everything drawn from one ``(config, seed)`` pair."""

    datasets: list[PilotDataset]
    pilot: PilotConfig
    g_all: np.ndarray  # (N, N_t * B)
    positions: np.ndarray  # (K, 2) meters
    clusters: np.ndarray  # (K,) latent channel cluster of every user
    bs_geom: ArrayGeometry
    ris_geom: ArrayGeometry

    @property
    def n_users(self) -> int:
        return len(self.datasets)


@dataclass
class UserSplit:
    train: list[PilotDataset]
    test: list[PilotDataset]
    server: PilotDataset


def scenario_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for stream ``key`` of master seed ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def _complex_normal(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def _layout(layout: str, k: int, rng) -> tuple[np.ndarray, np.ndarray]:
    if layout == "two_cluster":
        clusters = (np.arange(k) >= (k + 1) // 2).astype(int)
        centers = np.array([[-150.0, 0.0], [150.0, 0.0]])
        positions = centers[clusters] + rng.uniform(-15, 15, size=(k, 2))
    elif layout in ("sparse", "dense"):
        half = 300.0 if layout == "sparse" else 50.0
        positions = np.column_stack([rng.uniform(-half, half, k), rng.uniform(-20, 20, k)])
        n_clusters = min(3, k)
        edges = np.linspace(-half, half, n_clusters + 1)[1:-1]
        clusters = np.digitize(positions[:, 0], edges)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return positions, clusters


def generate_scenario(config) -> Scenario:
    """Synthesize the per-user pilot datasets of a scenario.

    Accepts an ``ExperimentConfig`` (uses its scenario and seed) or a
    ``(ScenarioConfig, seed)`` tuple. Users in one latent cluster share base
    RIS-UE path angles, which is what makes their channels correlated.
    """
    if isinstance(config, tuple):
        sc, seed = config
    else:
        sc, seed = config.scenario, config.seed
    bs_geom = ArrayGeometry(*sc.bs_array, wavelength=sc.wavelength)
    ris_geom = ArrayGeometry(*sc.ris_array, wavelength=sc.wavelength)
    n, m, k = ris_geom.size, bs_geom.size * sc.n_bs, sc.n_users
    if sc.pilot_length < 1 or sc.samples_per_user < 1 or k < 1:
        raise ValueError("pilot length, sample count and user count must be positive")

    rng = scenario_rng(seed, 0)
    blocks = []
    for _ in range(sc.n_bs):
        lg = sc.bs_ris_paths
        paths = PathSet(_complex_normal(rng, lg), rng.uniform(0, 2 * np.pi, lg), rng.uniform(0, np.pi, lg),
                        rng.uniform(0, 2 * np.pi, lg), rng.uniform(0, np.pi, lg))
        blocks.append(bs_ris_channel(bs_geom, ris_geom, paths))
    g_all = np.concatenate(blocks, axis=1)
    phases = np.exp(1j * rng.uniform(0, 2 * np.pi, size=(sc.pilot_length, n)))
    beam = _complex_normal(rng, m)
    pilot = PilotConfig(phases, beam / np.linalg.norm(beam))

    positions, clusters = _layout(sc.layout, k, rng)
    n_clusters = int(clusters.max()) + 1
    lk = sc.ris_ue_paths
    if sc.layout == "dense":
        # neighbouring clusters in a small area see overlapping angular sectors
        anchor_az, anchor_el = rng.uniform(0, 2 * np.pi, lk), rng.uniform(0.3, np.pi - 0.3, lk)
        base_az = anchor_az + rng.uniform(-0.4, 0.4, (n_clusters, lk))
        base_el = anchor_el + rng.uniform(-0.4, 0.4, (n_clusters, lk))
    else:
        base_az = rng.uniform(0, 2 * np.pi, (n_clusters, lk))
        base_el = rng.uniform(0, np.pi, (n_clusters, lk))

    datasets = []
    for user in range(k):
        urng = scenario_rng(seed, 1, user)
        user_az = base_az[clusters[user]] + sc.user_angle_spread * urng.standard_normal(lk)
        user_el = base_el[clusters[user]] + sc.user_angle_spread * urng.standard_normal(lk)
        datasets.append(_user_dataset(sc, ris_geom, g_all, pilot, user_az, user_el, urng, user,
                                      positions[user]))
    return Scenario(datasets, pilot, g_all, positions, clusters, bs_geom, ris_geom)


def _user_dataset(sc, ris_geom, g_all, pilot, user_az, user_el, rng, user, position) -> PilotDataset:
    d, lk, n = sc.samples_per_user, len(user_az), ris_geom.size
    az = user_az + sc.sample_angle_jitter * rng.standard_normal((d, lk))
    el = user_el + sc.sample_angle_jitter * rng.standard_normal((d, lk))
    gains = _complex_normal(rng, (d, lk))
    a = _steering_matrix(ris_geom, az.ravel(), el.ravel()).reshape(n, d, lk)
    v_h = np.sqrt(n / lk) * np.einsum("ndl,dl->dn", a, gains)
    truth = v_h[:, :, None] * g_all[None]
    clean = noiseless_pilots(truth, pilot)
    snr = float(sc.snr_db)
    if np.isinf(snr) and snr > 0:
        received = clean
    else:
        power = np.mean(np.abs(clean) ** 2, axis=1, keepdims=True)
        sigma = np.sqrt(power / 10 ** (snr / 10) / 2)
        received = clean + sigma * (rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape))
    return PilotDataset(received, truth, np.full(d, snr), user, np.asarray(position, dtype=float))


def split_users(scenario: Scenario, test_fraction: float = 0.1, server_fraction: float = 0.1) -> UserSplit:
    """Per-user train/test slices plus a server slice pooled from every user.

    The server slice stands in for uplink-recorded samples that the edge
    server holds (channel reciprocity), so it never overlaps user training data.
    """
    train, test, server = [], [], []
    for ds in scenario.datasets:
        d = len(ds)
        n_test = int(round(test_fraction * d))
        n_server = int(round(server_fraction * d))
        n_train = d - n_test - n_server
        if n_train < 1:
            raise ValueError("fractions leave no training samples")
        train.append(ds.subset(slice(0, n_train)))
        test.append(ds.subset(slice(n_train, n_train + n_test)))
        server.append(ds.subset(slice(n_train + n_test, d)))
    return UserSplit(train, test, PilotDataset.concatenate(server))
