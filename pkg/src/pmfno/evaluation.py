"""Validation MSE, long-horizon rollout reports, and pole recovery from trajectories."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container, ftm
from .dataset import (ExcitationSpec, Simulator, TrajectoryDataset, make_initial_condition, make_params,
                      system_of)
from .models import Model, rollout
from .tensor import TensorError, eig_general, lstsq

POLE_HEADER = ["freq_hz", "magnitude", "re_s", "im_s", "source"]


class EvaluationError(ValueError):
    pass


# -- pole recovery -------------------------------------------------------------------

def estimate_transition(traj, frames=None, ridge=None, equalize=True, rcond=None):
    """Least-squares one-step transition matrix ``G`` with ``u[k+1] ~ G u[k]``.

    ``traj`` is ``[K+1, C, *grid]`` or a batch ``[B, K+1, C, *grid]`` whose
    transitions are pooled. ``frames`` caps the number of frames used per
    trajectory (default ``min(K+1, 4 * state_dim)``). With ``equalize`` each
    state channel is scaled to unit RMS before the fit; this is a similarity
    transform, so it leaves the eigenvalues unchanged while balancing channels
    of very different magnitude. ``ridge=None`` picks an exact pseudo-inverse
    when the fit is well posed and a small relative ridge otherwise. ``rcond``
    sets the pseudo-inverse cutoff; raise it to about ``1e-6`` for data that
    went through 32-bit storage so rounding noise is not fitted as dynamics.
    """
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim < 3:
        raise EvaluationError(f"trajectory needs shape [K+1, C, *grid], got {traj.shape}")
    trajs = traj[None] if traj.ndim == 3 else traj
    B, K1, C = trajs.shape[:3]
    if K1 < 2:
        raise EvaluationError("need at least two frames")
    dim = int(np.prod(trajs.shape[2:]))
    n = min(K1, 4 * dim) if frames is None else min(int(frames), K1)
    if n < 2:
        raise EvaluationError("frame window must cover at least two frames")
    use = trajs[:, :n]
    if not np.any(use):
        raise EvaluationError("trajectory is identically zero; no transition to estimate")
    weights = np.ones(C)
    if equalize:
        axes = tuple(a for a in range(use.ndim) if a != 2)
        rms = np.sqrt(np.mean(use * use, axis=axes))
        weights = np.where(rms > 0, 1.0 / np.where(rms > 0, rms, 1.0), 1.0)
    scaled = use * weights.reshape((1, 1, C) + (1,) * (use.ndim - 3))
    flat = scaled.reshape(B, n, dim)
    prev = flat[:, :-1].reshape(-1, dim)
    nxt = flat[:, 1:].reshape(-1, dim)
    if ridge is None:
        ridge = 0.0 if prev.shape[0] >= dim else 1e-10
    Gt = lstsq(prev, nxt, ridge=ridge, rcond=rcond)
    G = Gt.T
    d = np.repeat(weights, dim // C)
    return G / d[:, None] * d[None, :]


@dataclass
class PoleSet:
    """Continuous-time poles with non-negative frequency."""

    s: np.ndarray
    sample_interval: float
    source: str

    @property
    def frequency(self):
        return self.s.imag / (2 * math.pi)

    @property
    def magnitude(self):
        return np.exp(self.s.real * self.sample_interval)

    def __len__(self):
        return self.s.shape[0]

    def sorted(self):
        order = np.lexsort((self.s.real, self.frequency))
        return PoleSet(self.s[order], self.sample_interval, self.source)

    def rows(self):
        return [[repr(float(f)), repr(float(m)), repr(float(s.real)), repr(float(s.imag)), self.source]
                for f, m, s in zip(self.frequency, self.magnitude, self.s)]


def poles_from_transition(G, sample_interval, source="model", min_magnitude=1e-6):
    """Map eigenvalues ``lambda`` of ``G`` to ``s = ln(lambda)/T``, one per conjugate pair.

    Eigenvalues with ``|lambda| < min_magnitude`` belong to the null space of
    a rank-deficient fit and carry no pole.
    """
    G = np.asarray(G)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise TensorError(f"transition must be square, got {G.shape}")
    lam = eig_general(G)
    lam = lam[np.abs(lam) >= min_magnitude]
    lam = lam[lam.imag >= 0]
    s = (np.log(np.abs(lam)) + 1j * np.angle(lam)) / sample_interval
    return PoleSet(s, float(sample_interval), source).sorted()


def analytic_poles(system: ftm.ModalSystem, source="ground_truth"):
    s = system.eigenvalues
    return PoleSet(s[s.imag >= 0].copy(), system.sample_interval, source).sorted()


def match_poles(reference: PoleSet, estimate: PoleSet, gate=0.02):
    """Greedy nearest-frequency pairing; returns ``(ref_index, est_index | None)`` per reference pole."""
    used = set()
    pairs = []
    fe = estimate.frequency
    for i, f in enumerate(reference.frequency):
        best, best_d = None, math.inf
        for j, g in enumerate(fe):
            if j in used:
                continue
            d = abs(g - f)
            if d < best_d:
                best, best_d = j, d
        ok = best is not None and best_d <= gate * max(abs(f), 1e-12)
        if ok:
            used.add(best)
        pairs.append((i, best if ok else None))
    return pairs


def pole_errors(reference: PoleSet, estimate: PoleSet, gate=0.02):
    """Relative pole error ``|ds|/|s|`` per reference pole (``nan`` when unmatched)."""
    err = np.full(len(reference), np.nan)
    for i, j in match_poles(reference, estimate, gate):
        if j is not None:
            err[i] = abs(estimate.s[j] - reference.s[i]) / abs(reference.s[i])
    return err


def write_poles_csv(path, *pole_sets):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(POLE_HEADER)
        for ps in pole_sets:
            w.writerows(ps.rows())


def read_poles_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if rows[0] != POLE_HEADER:
        raise EvaluationError(f"{path}: unexpected header {rows[0]}")
    return [dict(zip(POLE_HEADER, r)) for r in rows[1:]]


# -- predictors ----------------------------------------------------------------------

class ModelPredictor:
    def __init__(self, model: Model, name=None):
        self.model = model
        self.name = name or model.architecture

    def predict(self, U0, steps):
        return rollout(self.model, U0, steps)


class OraclePredictor:
    """Ground-truth stand-in with the model interface, in normalized units."""

    name = "oracle"

    def __init__(self, params, scale=1.0, channel_scale=None):
        self.sim = Simulator(params)
        C = ftm_field_channels(params)
        self.factor = float(scale) * (np.ones(C) if channel_scale is None else np.asarray(channel_scale, float))

    def _f(self, ndim):
        return self.factor.reshape((-1,) + (1,) * ndim)

    def predict(self, U0, steps):
        U0 = np.asarray(U0, dtype=np.float64)
        grid_nd = 2 if system_of(self.sim.params) == "wave2d" else 1
        single = U0.ndim == grid_nd + 1
        phys = (U0[None] if single else U0) * self._f(grid_nd)
        traj = self.sim.run(self.sim.band_limit(phys), steps) / self._f(grid_nd)
        return traj[0] if single else traj


def ftm_field_channels(params):
    return 3 if system_of(params) == "wave2d" else 2


def predictor_for_dataset(model, dataset: TrajectoryDataset):
    if model == "oracle":
        return OraclePredictor(dataset.params, dataset.scale, dataset.channel_scale)
    return ModelPredictor(model)


# -- MSE -----------------------------------------------------------------------------

def ground_truth(dataset: TrajectoryDataset, samples, steps):
    """Normalized reference trajectories for ``samples``, re-synthesized when ``steps`` exceeds the stored horizon."""
    if steps <= dataset.steps:
        return samples[:, : steps + 1]
    oracle = OraclePredictor(dataset.params, dataset.scale, dataset.channel_scale)
    return oracle.predict(samples[:, 0], steps)


def eval_mse(predictor, dataset: TrajectoryDataset, horizon=None, split="validation", batch_size=64):
    """Mean sequence MSE (normalized units) and per-step spatial MSE for one split."""
    K = int(horizon or dataset.steps)
    if K < 1:
        raise EvaluationError("horizon must be >= 1")
    data = {"validation": dataset.validation, "train": dataset.train, "all": dataset.samples}.get(split)
    if data is None:
        raise EvaluationError(f"unknown split {split!r}")
    if len(data) == 0:
        raise EvaluationError(f"split {split!r} is empty")
    per_step = np.zeros(K + 1)
    finite = True
    for i in range(0, len(data), batch_size):
        chunk = data[i: i + batch_size]
        target = ground_truth(dataset, chunk, K)
        pred = predictor.predict(chunk[:, 0], K)
        finite &= bool(np.all(np.isfinite(pred)))
        err = (pred - target) ** 2
        per_step += err.reshape(err.shape[0], K + 1, -1).mean(axis=2).sum(axis=0)
    per_step /= len(data)
    return {"split": split, "horizon": K, "mse": float(per_step.mean()), "per_step": per_step,
            "finite": finite, "samples": int(len(data))}


def parse_horizon(text, base):
    """``"10x"`` multiplies ``base``; a bare integer is taken literally."""
    text = str(text).strip().lower()
    try:
        if text.endswith("x"):
            factor = float(text[:-1])
            value = factor * base
            if factor <= 0 or value != int(value):
                raise ValueError
            return int(value)
        value = int(text)
        if value < 1:
            raise ValueError
        return value
    except ValueError:
        raise EvaluationError(f"invalid horizon {text!r}; use a positive integer or a multiplier like 10x") from None


# -- reports -------------------------------------------------------------------------

def write_trajectory_csv(path, traj, state_names):
    """Long-format CSV: ``step,state,<grid index columns>,value``."""
    traj = np.asarray(traj)
    grid = traj.shape[2:]
    idx_cols = ["x_index"] if len(grid) == 1 else ["x_index", "y_index"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "state"] + idx_cols + ["value"])
        for k in range(traj.shape[0]):
            for c, name in enumerate(state_names):
                for pos in np.ndindex(*grid):
                    w.writerow([k, name, *pos, repr(float(traj[(k, c) + pos]))])


def trajectory_poles(traj, sample_interval, source, frames=None):
    try:
        G = estimate_transition(traj, frames=frames)
    except EvaluationError:
        return PoleSet(np.zeros(0, complex), sample_interval, source)
    return poles_from_transition(G, sample_interval, source)


def rollout_report(predictor, params, excitation: ExcitationSpec, steps, out_dir, scale=1.0,
                   channel_scale=None, train_steps=None, pole_frames=None, seed=0):
    """Write ground truth, model trajectory, per-step MSE, and pole CSVs plus ``summary.json``."""
    from .dataset import STATE_NAMES

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    system = system_of(params)
    sim = Simulator(params)
    u0 = sim.band_limit(make_initial_condition(excitation, params, np.random.default_rng(seed), sim))
    truth = sim.run(u0, steps)
    C = truth.shape[1]
    factor = float(scale) * (np.ones(C) if channel_scale is None else np.asarray(channel_scale, float))
    f = factor.reshape((-1,) + (1,) * (truth.ndim - 2))
    pred_n = predictor.predict((u0 / f)[None], steps)[0]
    pred = pred_n * f
    truth_n = truth / f
    finite = bool(np.all(np.isfinite(pred_n)))
    per_step = ((pred_n - truth_n) ** 2).reshape(steps + 1, -1).mean(axis=1)

    names = STATE_NAMES[system]
    write_trajectory_csv(out / "ground_truth.csv", truth, names)
    write_trajectory_csv(out / "model.csv", pred, names)
    with open(out / "mse_per_step.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mse"])
        w.writerows([k, repr(float(v))] for k, v in enumerate(per_step))

    T = 1.0 / params.sample_rate
    if sim.modal is not None:
        ref = analytic_poles(sim.modal)
    else:
        ref = trajectory_poles(truth, T, "ground_truth", pole_frames)
    est = trajectory_poles(pred, T, getattr(predictor, "name", "model"), pole_frames) if finite \
        else PoleSet(np.zeros(0, complex), T, getattr(predictor, "name", "model"))
    write_poles_csv(out / "poles.csv", ref, est)
    pairs = match_poles(ref, est)
    summary = {
        "system": system,
        "steps": int(steps),
        "train_steps": train_steps,
        "excitation": excitation.to_dict(),
        "mse": float(per_step.mean()) if finite else None,
        "finite": finite,
        "poles_reference": len(ref),
        "poles_model": len(est),
        "poles_matched": sum(j is not None for _, j in pairs),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


# -- oracle checkpoints --------------------------------------------------------------

def save_oracle_checkpoint(path, dataset: TrajectoryDataset):
    """A checkpoint directory that evaluates as the ground-truth solver (MSE 0 by construction)."""
    manifest = {
        "kind": "checkpoint",
        "oracle": True,
        "system": dataset.system,
        "physical_params": dataset.physical_params,
        "dataset_scale": repr(float(dataset.scale)),
        "dataset_channel_scale": [repr(float(c)) for c in dataset.channel_scale],
        "train_steps": dataset.steps,
    }
    return container.write(path, manifest, np.zeros(0), "f64le")


def load_predictor(path):
    """Return ``(predictor, manifest)`` for a checkpoint directory (trained or oracle)."""
    from .training import load_checkpoint

    manifest = container.read_manifest(path)
    if manifest.get("kind") != "checkpoint":
        raise container.ContainerError(f"{path}: not a checkpoint container (kind={manifest.get('kind')})")
    if manifest.get("oracle"):
        container.read(path)
        params = make_params(manifest["system"], manifest["physical_params"])
        scale = float(manifest.get("dataset_scale", 1.0))
        cs = [float(c) for c in manifest.get("dataset_channel_scale", [])] or None
        return OraclePredictor(params, scale, cs), manifest
    ck = load_checkpoint(path)
    return ModelPredictor(ck.model), ck.manifest
