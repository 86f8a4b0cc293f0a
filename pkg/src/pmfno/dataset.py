"""Training datasets of (initial condition, trajectory) pairs.

Half of every dataset is driven by impulses or raised-cosine plucks at random
positions, the other half by random fields. Every initial condition is
band-limited to the modes the reference solver carries, so frame 0 of each
stored trajectory equals its initial condition.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import container, ftm
from .ftm import StringParams, SynthesisError, Wave2DParams
from .nlstring import NlStringParams, NonFiniteStateError, field_from_state, integrate, state_from_field

SYSTEMS = ("string", "wave2d", "nlstring")
PARAM_CLASSES = {"string": StringParams, "wave2d": Wave2DParams, "nlstring": NlStringParams}
STATE_NAMES = {"string": ("u0", "u1"), "nlstring": ("u0", "u1"), "wave2d": ("u0", "u1", "u2")}
DEFAULT_AMPLITUDE = {"string": (1e-4, 2e-3), "nlstring": (1e-4, 2e-3), "wave2d": (0.1, 2.0)}


class DatasetError(ValueError):
    pass


@dataclass
class ExcitationSpec:
    """Initial-condition recipe.

    ``position`` is a fraction of the domain (a pair for 2-D), ``width`` is the
    full support of a pluck as a fraction of the domain, and ``cutoff`` keeps
    only the lowest spatial modes of a random field.
    """

    kind: str = "pluck"
    position: float | tuple = 0.5
    amplitude: float = 1e-3
    width: float = 0.2
    cutoff: int | None = None

    def __post_init__(self):
        if self.kind not in ("impulse", "pluck", "random"):
            raise DatasetError(f"unknown excitation kind {self.kind!r}")
        if isinstance(self.position, list):
            self.position = tuple(self.position)
        pos = self.position if isinstance(self.position, tuple) else (self.position,)
        if not all(0 < float(x) < 1 for x in pos):
            raise DatasetError(f"position must lie in (0, 1), got {self.position}")
        if not self.amplitude > 0:
            raise DatasetError("amplitude must be > 0")
        if self.kind == "pluck" and not 0 < self.width <= 1:
            raise DatasetError(f"pluck width {self.width} exceeds the domain")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DatasetError(f"unknown excitation keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        if isinstance(self.position, tuple):
            d["position"] = list(self.position)
        return d


@dataclass
class DatasetConfig:
    samples: int = 256
    steps: int = 64
    seed: int = 0
    amplitude_min: float | None = None
    amplitude_max: float | None = None
    pluck_width_min: float = 0.05
    pluck_width_max: float = 0.3
    random_cutoff: int | None = None
    normalization: str = "per_channel"

    def __post_init__(self):
        if self.samples < 2 or self.samples % 2:
            raise DatasetError("samples must be an even number >= 2")
        if self.steps < 1:
            raise DatasetError("steps must be >= 1")
        if self.normalization not in ("per_channel", "global"):
            raise DatasetError(f"unknown normalization {self.normalization!r}")


@dataclass
class TrajectoryDataset:
    system: str
    samples: np.ndarray  # [S, K+1, C, *grid], normalized
    scale: float
    channel_scale: np.ndarray
    split: int
    seed: int
    physical_params: dict
    kinds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def params(self):
        return make_params(self.system, self.physical_params)

    @property
    def steps(self):
        return self.samples.shape[1] - 1

    @property
    def channels(self):
        return self.samples.shape[2]

    @property
    def grid_shape(self):
        return tuple(self.samples.shape[3:])

    @property
    def train(self):
        return self.samples[: self.split]

    @property
    def validation(self):
        return self.samples[self.split:]

    @property
    def sample_rate(self):
        return float(self.physical_params["sample_rate"])

    def denormalize(self, x):
        """Map normalized ``[..., C, *grid]`` arrays back to physical units."""
        factor = self.scale * self.channel_scale
        return x * factor.reshape((-1,) + (1,) * len(self.grid_shape))

    def normalize(self, x):
        factor = self.scale * self.channel_scale
        return x / factor.reshape((-1,) + (1,) * len(self.grid_shape))


def make_params(system, values=None):
    if system not in SYSTEMS:
        raise DatasetError(f"unknown system {system!r}; expected one of {SYSTEMS}")
    cls = PARAM_CLASSES[system]
    values = dict(values or {})
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise DatasetError(f"unknown {system} parameter keys: {sorted(unknown)}")
    return cls(**values)


def system_of(params):
    if isinstance(params, NlStringParams):
        return "nlstring"
    if isinstance(params, Wave2DParams):
        return "wave2d"
    return "string"


def field_shape(params):
    if isinstance(params, Wave2DParams):
        return (3, params.nx, params.ny)
    return (2, params.grid_points)


class Simulator:
    """Ground-truth solver for one system: band-limiting and trajectory synthesis."""

    def __init__(self, params):
        self.params = params
        self.system = system_of(params)
        self.modal = None if self.system == "nlstring" else ftm.modal_system(params)

    @property
    def sample_interval(self):
        return 1.0 / self.params.sample_rate

    def band_limit(self, u):
        if self.modal is not None:
            return ftm.project(self.modal, u)
        st = state_from_field(self.params, u)
        return field_from_state(self.params, st.a, st.adot)

    def run(self, u_init, steps):
        """Trajectory ``[..., K+1, C, *grid]`` from band-limited initial fields ``[..., C, *grid]``."""
        if self.modal is not None:
            u_init = np.asarray(u_init)
            if u_init.ndim == len(self.modal.field_shape):
                return ftm.synthesize(self.modal, u_init, steps)
            return np.stack([ftm.synthesize(self.modal, u, steps) for u in u_init])
        return integrate(self.params, state_from_field(self.params, u_init), steps)


def _positions(spec, shape):
    pos = spec.position if isinstance(spec.position, tuple) else (spec.position,)
    if len(pos) != len(shape):
        raise DatasetError(f"excitation needs {len(shape)} position coordinates, got {len(pos)}")
    return [float(p) for p in pos]


def _raised_cosine(d, width):
    """Raised cosine bump of full support ``width`` evaluated at offsets ``d``."""
    out = 0.5 * (1 + np.cos(2 * math.pi * d / width))
    return np.where(np.abs(d) <= width / 2, out, 0.0)


def make_initial_condition(spec: ExcitationSpec, params, rng=None, simulator=None):
    """Initial state field ``[C, *grid]`` with zero velocity channels."""
    shape = field_shape(params)
    grid = shape[1:]
    u = np.zeros(shape)
    pos = _positions(spec, grid) if spec.kind != "random" else None
    if spec.kind == "impulse":
        idx = tuple(min(int(round(p * n)), n - 1) for p, n in zip(pos, grid))
        u[(0,) + idx] = spec.amplitude
    elif spec.kind == "pluck":
        if len(grid) == 1:
            x = params.grid / params.length
            u[0] = spec.amplitude * _raised_cosine(x - pos[0], spec.width)
        else:
            x = np.arange(grid[0]) / (grid[0] - 1)
            y = np.arange(grid[1]) / (grid[1] - 1)
            r = np.hypot(x[:, None] - pos[0], y[None, :] - pos[1])
            u[0] = spec.amplitude * _raised_cosine(r, spec.width)
    else:
        rng = np.random.default_rng() if rng is None else rng
        u[0] = rng.standard_normal(grid)
        if len(grid) == 2:
            u[0] -= u[0].mean()
        sim = simulator or Simulator(params)
        if spec.cutoff is not None:
            u = _lowpass(sim, u, spec.cutoff)
        else:
            u = sim.band_limit(u)
        peak = np.max(np.abs(u[0]))
        if peak > 0:
            u *= spec.amplitude / peak
    return u


def _lowpass(sim: Simulator, u, cutoff):
    if sim.modal is not None:
        c = ftm.slt_forward(sim.modal, u)
        idx = np.atleast_2d(sim.modal.spatial_modes.T).T
        keep = np.all(idx <= cutoff, axis=1) if idx.shape[1] > 1 else idx[:, 0] <= cutoff
        return ftm.slt_inverse(sim.modal, np.where(keep, c, 0))
    st = state_from_field(sim.params, u)
    mask = np.arange(1, sim.params.modes + 1) <= cutoff
    return field_from_state(sim.params, st.a * mask, st.adot * mask)


def _draw_excitation(i, n_samples, system, cfg: DatasetConfig, rng):
    lo, hi = DEFAULT_AMPLITUDE[system]
    lo = cfg.amplitude_min if cfg.amplitude_min is not None else lo
    hi = cfg.amplitude_max if cfg.amplitude_max is not None else hi
    amp = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    dims = 2 if system == "wave2d" else 1
    if i < n_samples // 2:
        kind = "impulse" if rng.uniform() < 0.5 else "pluck"
        pos = tuple(rng.uniform(0.05, 0.95, size=dims))
        width = rng.uniform(cfg.pluck_width_min, cfg.pluck_width_max)
        return ExcitationSpec(kind, pos if dims == 2 else pos[0], amp, width)
    return ExcitationSpec("random", 0.5 if dims == 1 else (0.5, 0.5), amp, cutoff=cfg.random_cutoff)


def generate(system, params=None, config: DatasetConfig | None = None, **overrides):
    """Synthesize, normalize, and split a dataset.

    Sample ``i`` draws from its own RNG stream seeded by ``(seed, i)``, so the
    result does not depend on generation order.
    """
    cfg = config or DatasetConfig()
    if overrides:
        cfg = DatasetConfig(**{**asdict(cfg), **overrides})
    if params is None or isinstance(params, dict):
        params = make_params(system, params)
    if system_of(params) != system:
        raise DatasetError(f"parameters {type(params).__name__} do not describe system {system!r}")
    sim = Simulator(params)
    S, K = cfg.samples, cfg.steps

    inits, kinds = [], []
    for i in range(S):
        rng = np.random.default_rng([cfg.seed, i])
        spec = _draw_excitation(i, S, system, cfg, rng)
        u = make_initial_condition(spec, params, rng=rng, simulator=sim)
        inits.append(sim.band_limit(u))
        kinds.append(spec.kind)
    inits = np.stack(inits)

    try:
        traj = sim.run(inits, K)
    except NonFiniteStateError:
        for i, u in enumerate(inits):
            try:
                sim.run(u, K)
            except (NonFiniteStateError, SynthesisError) as exc:
                raise SynthesisError(f"sample {i}: {exc}") from exc
        raise

    # interleave kinds so both portions of the split see impulsive and random samples
    order = np.random.default_rng([cfg.seed, S]).permutation(S)
    traj = traj[order]
    kinds = [kinds[i] for i in order]

    split = S - S // 10
    train = traj[:split]
    C = traj.shape[2]
    if cfg.normalization == "per_channel":
        axes = tuple(a for a in range(train.ndim) if a != 2)
        channel_scale = train.std(axis=axes)
        channel_scale[channel_scale == 0] = 1.0
        scale = 1.0
    else:
        channel_scale = np.ones(C)
        scale = float(train.std()) or 1.0
    ds = TrajectoryDataset(system, traj, scale, channel_scale, split, cfg.seed,
                           params.to_dict(), kinds, asdict(cfg))
    ds.samples = ds.normalize(traj)
    return ds


def _decimal(x):
    return repr(float(x))


def save(ds: TrajectoryDataset, path, run_config=None):
    """Write ``manifest.json`` and ``data.bin``; returns the manifest."""
    data = np.ascontiguousarray(ds.samples, dtype="<f4")
    manifest = {
        "kind": "dataset",
        "system": ds.system,
        "scale": _decimal(ds.scale),
        "channel_scale": [_decimal(c) for c in ds.channel_scale],
        "split": int(ds.split),
        "seed": int(ds.seed),
        "physical_params": ds.physical_params,
        "states": list(STATE_NAMES[ds.system]),
        "sample_kinds": list(ds.kinds),
        "config": ds.config,
        "sample_hashes": container.sample_hashes(data),
    }
    if run_config is not None:
        manifest["run_config"] = run_config
    return container.write(path, manifest, data, "f32le")


def load(path, verify=True):
    manifest, data = container.read(path)
    if manifest.get("kind", "dataset") != "dataset":
        raise container.ContainerError(f"{path}: not a dataset container (kind={manifest.get('kind')})")
    if verify:
        hashes = container.sample_hashes(data)
        recorded = manifest.get("sample_hashes") or []
        if len(recorded) != len(hashes):
            raise container.HashMismatchError(
                f"{path}: manifest lists {len(recorded)} sample hashes for {len(hashes)} samples")
        bad = [i for i, (a, b) in enumerate(zip(hashes, recorded)) if a != b]
        if bad:
            raise container.HashMismatchError(f"{path}: sample {bad[0]} hash mismatch")
    return TrajectoryDataset(
        system=manifest["system"],
        samples=data.astype(np.float64),
        scale=float(manifest["scale"]),
        channel_scale=np.array([float(c) for c in manifest["channel_scale"]]),
        split=int(manifest["split"]),
        seed=int(manifest["seed"]),
        physical_params=manifest["physical_params"],
        kinds=list(manifest.get("sample_kinds", [])),
        config=manifest.get("config", {}),
    )


def is_dataset_dir(path):
    try:
        return container.read_manifest(Path(path)).get("kind", "dataset") == "dataset"
    except container.ContainerError:
        return False
