"""``pmfno`` command line: dataset generation, training, evaluation, poles, rollouts.

Exit codes: 0 success, 2 configuration or input error, 3 synthesis failure,
4 numerical failure (non-finite loss or state, eigen solver breakdown).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_SYNTHESIS, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("pmfno")


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _limit_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _json_arg(text):
    """Inline JSON or a path to a JSON file."""
    p = Path(text)
    if p.exists():
        text = p.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"invalid JSON for excitation: {exc}") from exc


def _print(obj):
    print(json.dumps(obj, indent=2, default=float))


# -- subcommands ---------------------------------------------------------------------

def cmd_dataset(args):
    from . import config, dataset

    cfg = config.load(args.config)
    ds = dataset.generate(cfg.system, cfg.params, cfg.dataset)
    manifest = dataset.save(ds, args.out, run_config=cfg.to_dict())
    _print({
        "out": str(args.out),
        "system": manifest["system"],
        "shape": manifest["shape"],
        "states": manifest["states"],
        "split": manifest["split"],
        "scale": manifest["scale"],
        "channel_scale": manifest["channel_scale"],
        "seed": manifest["seed"],
    })


def cmd_train(args):
    from . import config, dataset, training
    from .models import Model, ModelConfig

    cfg = config.load(args.config)
    if args.model:
        cfg.model = ModelConfig(**{**cfg.model.to_dict(), "architecture": args.model})
    ds = dataset.load(args.dataset)
    out = Path(args.out)
    if args.resume:
        state = training.resume_state(out, cfg.train, len(ds.samples))
        model = state.model
        if model.config.to_dict() != cfg.model.to_dict():
            raise CliError(f"checkpoint model {model.config.to_dict()} differs from config {cfg.model.to_dict()}")
    else:
        model = Model(cfg.model, seed=cfg.train.seed)
        state = None
    training.check_compatible(model, ds)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    state = training.train(model, ds, cfg.train, state=state, checkpoint_dir=out)
    _print({
        "out": str(out),
        "architecture": model.architecture,
        "epochs": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_mse": state.best_val,
        "final_train_mse": state.history[-1]["train_mse"] if state.history else None,
    })


def cmd_eval(args):
    from . import dataset, evaluation

    predictor, manifest = evaluation.load_predictor(args.ckpt)
    ds = dataset.load(args.dataset)
    if hasattr(predictor, "model"):
        from .training import check_compatible
        check_compatible(predictor.model, ds)
    base = int(manifest.get("train_steps") or ds.steps)
    horizons = args.horizon or ["1x"]
    results = []
    for h in horizons:
        K = evaluation.parse_horizon(h, base)
        r = evaluation.eval_mse(predictor, ds, K, split=args.split)
        results.append({"horizon": K, "label": h, "split": r["split"], "mse": r["mse"],
                        "finite": r["finite"], "samples": r["samples"]})
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / f"mse_per_step_{K}.csv", "w", encoding="utf-8") as f:
                f.write("step,mse\n")
                f.writelines(f"{k},{float(v)!r}\n" for k, v in enumerate(r["per_step"]))
    summary = {"checkpoint": str(args.ckpt), "dataset": str(args.dataset), "train_steps": base,
               "results": results}
    if args.out:
        (Path(args.out) / "eval.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _print(summary)
    if not all(r["finite"] for r in results):
        raise CliError("model rollout produced non-finite values", EXIT_NUMERIC)


def _excitation(args, manifest):
    from .dataset import ExcitationSpec

    if not args.excitation:
        raise CliError("--excitation is required with a checkpoint input")
    return ExcitationSpec.from_dict(_json_arg(args.excitation))


def cmd_poles(args):
    import numpy as np

    from . import container, dataset, evaluation

    src = Path(args.input)
    if src.suffix == ".npy":
        if not args.sample_rate:
            raise CliError("--sample-rate is required for .npy trajectories")
        traj = np.load(src)
        ps = evaluation.trajectory_poles(traj, 1.0 / args.sample_rate, args.source or "trajectory", args.frames)
    elif dataset.is_dataset_dir(src):
        ds = dataset.load(src)
        traj = ds.denormalize(ds.samples)
        stored_f32 = container.read_manifest(src).get("dtype") == "f32le"
        G = evaluation.estimate_transition(traj, frames=args.frames, rcond=1e-6 if stored_f32 else None)
        ps = evaluation.poles_from_transition(G, 1.0 / ds.sample_rate, args.source or "ground_truth")
    else:
        manifest = container.read_manifest(src)
        if manifest.get("kind") != "checkpoint":
            raise CliError(f"{src}: expected a dataset, checkpoint, or .npy trajectory")
        predictor, manifest = evaluation.load_predictor(src)
        params = dataset.make_params(manifest["system"], manifest["physical_params"])
        spec = _excitation(args, manifest)
        base = int(manifest.get("train_steps") or 64)
        K = evaluation.parse_horizon(args.steps or "10x", base)
        sim = dataset.Simulator(params)
        u0 = sim.band_limit(dataset.make_initial_condition(spec, params, np.random.default_rng(0), sim))
        scale = float(manifest.get("dataset_scale", 1.0))
        cs = np.array([float(c) for c in manifest.get("dataset_channel_scale", [])] or [1.0] * u0.shape[0])
        f = (scale * cs).reshape((-1,) + (1,) * (u0.ndim - 1))
        traj = predictor.predict((u0 / f)[None], K)[0] * f
        if not np.all(np.isfinite(traj)):
            raise CliError("model rollout produced non-finite values", EXIT_NUMERIC)
        ps = evaluation.trajectory_poles(traj, 1.0 / params.sample_rate,
                                         args.source or getattr(predictor, "name", "model"), args.frames)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_poles_csv(args.out, ps)
    _print({"out": str(args.out), "poles": len(ps),
            "frequencies_hz": [round(float(f), 6) for f in ps.frequency[:16]]})


def cmd_rollout(args):
    import numpy as np

    from . import dataset, evaluation

    predictor, manifest = evaluation.load_predictor(args.ckpt)
    params = dataset.make_params(manifest["system"], manifest["physical_params"])
    spec = _excitation(args, manifest)
    base = int(manifest.get("train_steps") or 64)
    K = evaluation.parse_horizon(args.steps, base)
    scale = float(manifest.get("dataset_scale", 1.0))
    cs = [float(c) for c in manifest.get("dataset_channel_scale", [])] or None
    summary = evaluation.rollout_report(predictor, params, spec, K, args.out, scale=scale,
                                        channel_scale=np.array(cs) if cs else None, train_steps=base)
    _print(summary)
    if not summary["finite"]:
        raise CliError("model rollout produced non-finite values", EXIT_NUMERIC)


# -- parser --------------------------------------------------------------------------

def build_parser():
    from .config import help_text

    p = argparse.ArgumentParser(
        prog="pmfno",
        description="Physical-model datasets, recurrent spectral networks, and pole analysis.",
        epilog=help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--threads", type=int, default=1, help="cap on numeric worker threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="synthesize a trajectory dataset")
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--model", choices=["frnn", "fgru", "fno_ref"], help="override model.architecture")
    t.add_argument("--resume", action="store_true", help="continue from <out>/last")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="validation MSE at one or more horizons")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--horizon", action="append", help="steps, or a multiple of the training horizon like 10x")
    e.add_argument("--split", default="validation", choices=["validation", "train", "all"])
    e.add_argument("--out", help="directory for eval.json and per-step CSVs")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("poles", help="estimate poles from a trajectory, dataset, or checkpoint rollout")
    q.add_argument("--input", required=True, help="dataset dir, checkpoint dir, or .npy [K+1, C, *grid]")
    q.add_argument("--out", required=True)
    q.add_argument("--excitation", help="JSON (inline or file) for checkpoint inputs")
    q.add_argument("--steps", help="rollout length for checkpoint inputs (default 10x)")
    q.add_argument("--frames", type=int, help="snapshot frames per trajectory")
    q.add_argument("--sample-rate", type=float, help="sample rate for .npy inputs")
    q.add_argument("--source", help="label for the source column")
    q.set_defaults(func=cmd_poles)

    r = sub.add_parser("rollout", help="long rollout report against ground truth")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--excitation", required=True, help="JSON (inline or file)")
    r.add_argument("--steps", required=True, help="steps, or a multiple of the training horizon like 10x")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)
    return p


def _exit_code(exc):
    from .config import ConfigError
    from .container import ContainerError
    from .dataset import DatasetError
    from .evaluation import EvaluationError
    from .ftm import SynthesisError
    from .models import NonFiniteRolloutError
    from .nlstring import NonFiniteStateError
    from .tensor import EigenConvergenceError
    from .training import CompatibilityError, NonFiniteLossError

    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (NonFiniteLossError, NonFiniteRolloutError, EigenConvergenceError)):
        return EXIT_NUMERIC
    if isinstance(exc, (NonFiniteStateError, SynthesisError)) and not isinstance(exc, DatasetError):
        return EXIT_SYNTHESIS
    if isinstance(exc, (ConfigError, CompatibilityError, ContainerError, DatasetError, EvaluationError,
                        ValueError, FileNotFoundError)):
        return EXIT_CONFIG
    return None


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--threads", type=int, default=1)
    known, _ = pre.parse_known_args(argv)
    _limit_threads(max(1, known.threads))

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # mapped to the exit-code contract below
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"pmfno {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
