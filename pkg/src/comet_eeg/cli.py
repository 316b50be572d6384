"""``comet`` command line: synth, preprocess, pretrain, probe, analyze, gradcheck.

Exit codes: 0 ok, 1 config/data error, 2 usage error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import dataset_digests, file_digest, read_dataset, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("comet_eeg")


class ConfigError(Exception):
    pass


class NumericFailure(Exception):
    pass


def _build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _resolve_seed(arg_seed, default=0) -> int:
    if arg_seed is not None:
        return arg_seed
    env = os.environ.get("COMET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"COMET_SEED: not an integer: {env!r}") from None
    return default


def _prepare_out_dir(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(target: Path, subcommand: str, config: dict, seed, inputs: dict, outputs: list) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "build": _build_id(),
        "inputs": inputs,
        "outputs": [str(o) for o in outputs],
    }
    target.write_text(json.dumps(manifest, indent=2, default=str))


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    from .signals import SynthConfig, synth_downstream, synth_eeg

    seed = _resolve_seed(args.seed)
    cfg = SynthConfig(n_channels=args.channels, fs=args.fs, duration_s=args.seconds, mixing_scale=args.mixing_scale,
                      signature_amplitude=args.signature, signature_hz=args.signature_hz,
                      signature_spread=args.signature_spread, seed=seed)
    out = _prepare_out_dir(args.out, args.force)
    config = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    config.update(n=args.n, classes=args.classes, separation=args.separation)
    _write_manifest(out / "run_manifest.json", "synth", config, seed, {},
                    [out / "manifest.json", out / "data.bin"])
    if args.classes:
        per_class, rem = divmod(args.n, args.classes)
        if rem:
            raise ConfigError("--n must be a multiple of --classes")
        samples, labels = synth_downstream(cfg, args.classes, per_class, separation=args.separation)
    else:
        samples, labels = synth_eeg(cfg, args.n), None
    write_dataset(out, samples, labels, provenance={"generator": "synth", **config})
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .signals import preprocess

    samples, labels, manifest = read_dataset(args.data)
    out = _prepare_out_dir(args.out, args.force)
    config = {"lo_hz": args.lo, "hi_hz": args.hi, "fs_out": args.fs_out, "window_s": args.window,
              "hop_s": args.hop, "volts_per_unit": args.volts_per_unit}
    _write_manifest(out / "run_manifest.json", "preprocess", config, None, dataset_digests(args.data),
                    [out / "manifest.json", out / "data.bin"])
    segments, seg_labels = [], []
    for i, rec in enumerate(samples):
        pieces = preprocess(rec, **config)
        segments.extend(pieces)
        if labels is not None:
            seg_labels.extend([labels[i]] * len(pieces))
    if not segments:
        raise ConfigError("window longer than every recording; no segments produced")
    write_dataset(out, segments, np.array(seg_labels) if labels is not None else None,
                  provenance={"preprocess": config, "source": str(args.data)})
    print(f"wrote {len(segments)} segments to {out}")
    return EXIT_OK


def load_train_config(path, overrides: dict):
    from .train import TrainConfig

    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raw.update({k: v for k, v in overrides.items() if v is not None})
    model = raw.get("model")
    if isinstance(model, dict):
        from .model import ModelConfig
        unknown = set(model) - set(ModelConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"model.{sorted(unknown)[0]}: unknown field")
    try:
        return TrainConfig.from_dict(raw)
    except KeyError as exc:
        raise ConfigError(f"model: unknown preset {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None


def cmd_pretrain(args) -> int:
    from .train import NonFiniteLoss, run_pretrain

    tcfg = load_train_config(args.config, {"seed": args.seed if args.seed is not None else
                                           (_resolve_seed(None) if "COMET_SEED" in os.environ else None),
                                           "epochs": args.epochs, "workers": args.workers})
    samples, _, _ = read_dataset(args.data)
    out = _prepare_out_dir(args.out, args.force)
    inputs = dataset_digests(args.data)
    if args.config:
        inputs["config"] = file_digest(args.config)
    _write_manifest(out / "run_manifest.json", "pretrain", tcfg.to_dict(), tcfg.seed, inputs,
                    [out / "best", out / "last", out / "train_log.csv"])
    try:
        _, trainlog = run_pretrain(samples, tcfg, out_dir=out, resume=args.resume)
    except NonFiniteLoss as exc:
        raise NumericFailure(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    last = trainlog.records[-1] if trainlog.records else {}
    print(f"trained {len(trainlog.records)} steps in {trainlog.wall_time:.1f}s; final L_R={last.get('L_R')}, "
          f"L_C={last.get('L_C')}")
    return EXIT_OK


def _split(n: int, test_fraction: float, seed: int):
    perm = np.random.default_rng(np.random.SeedSequence([seed, 99])).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def cmd_probe(args) -> int:
    from .checkpoint import load_checkpoint
    from .model import ModelState
    from .probe import linear_probe

    seed = _resolve_seed(args.seed)
    samples, labels, _ = read_dataset(args.data)
    if labels is None:
        raise ConfigError(f"{args.data}: probing needs labels.bin")
    state, manifest, _ = load_checkpoint(args.checkpoint)
    if args.random_init:
        state = ModelState.initialize(state.config, state.vocab, seed)
    try:
        state.channel_ids(samples[0].channel_names, allow_new=args.allow_new_channels,
                          rng=np.random.default_rng(seed))
    except KeyError as exc:
        raise ConfigError(f"channels: {exc.args[0]}") from None
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists (use --force to overwrite)")
    out.parent.mkdir(parents=True, exist_ok=True)
    config = {"epochs": args.epochs, "lr": args.lr, "hidden": args.hidden, "test_fraction": args.test_fraction,
              "random_init": args.random_init, "include_global": args.include_global, "seed": seed}
    _write_manifest(out.with_name(out.stem + ".run_manifest.json"), "probe", config, seed,
                    {"checkpoint": file_digest(Path(args.checkpoint) / "params.bin"
                                               if Path(args.checkpoint).is_dir() else
                                               Path(args.checkpoint).parent / "params.bin"),
                     **dataset_digests(args.data)}, [out])
    tr, te = _split(len(samples), args.test_fraction, seed)
    _, report = linear_probe(state, [samples[i] for i in tr], labels[tr], [samples[i] for i in te], labels[te],
                             epochs=args.epochs, lr=args.lr, hidden=args.hidden, seed=seed,
                             include_global=args.include_global)
    out.write_text(json.dumps({"metrics": report.as_dict(), "config": config,
                               "model_config": manifest["model_config"]}, indent=2))
    print(f"balanced accuracy {report.balanced_accuracy:.4f}, kappa {report.kappa:.4f}, "
          f"F1 {report.f1_weighted:.4f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .checkpoint import load_checkpoint
    from .diagnostics import (attention_distance, attention_nmi, attention_stack, channel_similarity,
                              fit_scaling, head_averaged_nmi)

    state, _, _ = load_checkpoint(args.checkpoint)
    samples, _, _ = read_dataset(args.data)
    samples = samples[: args.max_samples]
    out = _prepare_out_dir(args.out, args.force)
    names = ["attention_distance.csv", "nmi.csv", "channel_similarity.csv", "clusters.json", "scaling_fit.json"]
    _write_manifest(out / "run_manifest.json", "analyze", {"clusters": args.clusters, "max_samples": args.max_samples,
                    "scaling_points": args.scaling_points}, None, dataset_digests(args.data),
                    [out / n for n in names])
    stack = attention_stack(state, samples)
    dist_heads = attention_distance(stack, per_head=True)
    with open(out / "attention_distance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "mean_distance"])
        for li, row in enumerate(dist_heads):
            for hi, v in enumerate(row):
                w.writerow([li, hi, repr(float(v))])
            w.writerow([li, "mean", repr(float(row.mean()))])
    nmi_heads = attention_nmi(stack, per_head=True)
    nmi_avg = head_averaged_nmi(stack)
    with open(out / "nmi.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "nmi", "nmi_head_averaged_map"])
        for li in range(stack.n_layers):
            w.writerow([li, repr(float(nmi_heads[li].mean())), repr(float(nmi_avg[li]))])
    ids = state.channel_ids(samples[0].channel_names)
    clusters = channel_similarity(state.params["enc.chan"][ids], args.clusters)
    with open(out / "channel_similarity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(samples[0].channel_names))
        for name, row in zip(samples[0].channel_names, clusters.similarity):
            w.writerow([name] + [repr(float(v)) for v in row])
    (out / "clusters.json").write_text(json.dumps({
        "channels": list(samples[0].channel_names),
        "merges": clusters.merges.tolist(),
        "assignment": clusters.labels.tolist(),
    }, indent=2))
    if args.scaling_points:
        pts = json.loads(Path(args.scaling_points).read_text())
        fit = fit_scaling([p[0] for p in pts], [p[1] for p in pts])
        payload = {"points": pts, "slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2}
    else:
        payload = {"points": [], "status": "no scaling points supplied"}
    (out / "scaling_fit.json").write_text(json.dumps(payload, indent=2))
    print(f"wrote diagnostics for {stack.n_layers} layers to {out}")
    return EXIT_OK


def gradcheck_setup(seed: int, model_cfg=None, batch_size: int = 2, n_channels: int = 4, n_patches: int = 4):
    """Small perturbed model + frozen batch for end-to-end gradient checking.

    Returns ``(fn, point)`` for :func:`~comet_eeg.diffengine.grad_check`.
    """
    from .model import ModelConfig, ModelState
    from .signals import SynthConfig, synth_eeg
    from .train import TrainConfig, assemble_batch, loss_function

    mc = model_cfg or ModelConfig(dim=8, depth=1, heads=2, ff_dim=16, decoder_depth=1, decoder_dim=8,
                                  decoder_heads=2, decoder_ff_dim=16, patch_len=5, max_patches=8)
    sc = SynthConfig(n_channels=n_channels, fs=200.0, duration_s=n_patches * mc.patch_len / 200.0, seed=seed)
    samples = synth_eeg(sc, batch_size)
    state = ModelState.initialize(mc, sc.vocabulary(), seed)
    rng = np.random.default_rng(seed)
    # move away from the symmetric init so every path carries signal
    state.params = {k: v + rng.normal(0, 0.3, v.shape) for k, v in state.params.items()}
    state.momentum = {k: v + rng.normal(0, 0.3, v.shape) for k, v in state.momentum.items()}
    tcfg = TrainConfig(model=mc, batch_size=batch_size, seed=seed)
    batch = assemble_batch(samples, list(range(batch_size)), mc, tcfg.mask_ratio, seed, 0, 0)
    names, fn = loss_function(state, batch, tcfg, state.channel_ids(samples[0].channel_names))
    return fn, [state.params[n] for n in names]


def cmd_gradcheck(args) -> int:
    from .diffengine import grad_check

    tcfg = load_train_config(args.config, {}) if args.config else None
    seed = _resolve_seed(args.seed)
    model_cfg = None
    if tcfg is not None and args.use_config_model:
        model_cfg = tcfg.model
    worst = 0.0
    for s in range(seed, seed + args.seeds):
        fn, point = gradcheck_setup(s, model_cfg)
        err = grad_check(fn, point, args.step)
        print(f"seed {s}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    if args.out:
        out = _prepare_out_dir(args.out, args.force)
        _write_manifest(out / "run_manifest.json", "gradcheck", {"step": args.step, "seeds": args.seeds,
                        "tolerance": args.tolerance}, seed, {}, [out / "gradcheck.json"])
        (out / "gradcheck.json").write_text(json.dumps({"max_relative_error": worst}))
    if not worst < args.tolerance:
        raise NumericFailure(f"gradient check failed: {worst:.3e} >= {args.tolerance:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic EEG dataset")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--fs", type=float, default=200.0)
    p.add_argument("--seconds", type=float, default=4.0)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int)
    p.add_argument("--mixing-scale", type=float, default=0.15)
    p.add_argument("--signature", type=float, default=2.0, help="amplitude of the per-sample global rhythm")
    p.add_argument("--signature-hz", type=float, default=8.0)
    p.add_argument("--signature-spread", type=float, default=0.5, help="std of the per-sample log-amplitude")
    p.add_argument("--classes", type=int, default=0, help="write a labelled downstream task with this many classes")
    p.add_argument("--separation", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="band-pass, resample, segment, rescale")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lo", type=float, default=0.5)
    p.add_argument("--hi", type=float, default=70.0)
    p.add_argument("--fs-out", type=float, default=200.0)
    p.add_argument("--window", type=float, default=4.0)
    p.add_argument("--hop", type=float, default=None)
    p.add_argument("--volts-per-unit", type=float, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="masked + contrastive pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--resume")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on a frozen encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--random-init", action="store_true", help="probe a freshly initialised encoder instead")
    p.add_argument("--include-global", action="store_true")
    p.add_argument("--allow-new-channels", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("analyze", help="attention and embedding diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--max-samples", type=int, default=64)
    p.add_argument("--scaling-points", help="JSON list of [model_size, score] pairs")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pre-training loss")
    p.add_argument("--config")
    p.add_argument("--use-config-model", action="store_true",
                   help="check the config's model instead of the d=8 reference model")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
