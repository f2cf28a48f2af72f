"""Command-line entry point: ``precoder-forge {generate,train,sample,evaluate,bench}``.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric or configuration error.
Every command writes a JSON run manifest next to its main output.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .channel import PerturbationSpec, generate_channel
from .dataset import (build_fixed_h_dataset, build_perturbed_dataset, export_csv, load,
                      pack, pack_channel, save, unpack_batch)
from .errors import ConfigError, FormatError, NonFiniteError, ParameterError, PrecoderError
from .lbfgs import LbfgsConfig
from .models import (TrainConfig, load_model, make_model, reconstruct_packed, sample_cvae,
                     sample_vae, save_model, train)
from .report import SeReport, baseline_se, benchmark, evaluate_precoders
from .rng import derive_seed, make_rng
from .se import SystemConfig, project_power

log = logging.getLogger("precoder_forge")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sub_seeds(seed):
    return {name: derive_seed(seed, name) for name in ("channel", "init", "training", "sampling")}


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(args, outputs, wall_time, path=None):
    argv = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "args": argv,
        "seeds": sub_seeds(args.seed),
        "code_version": __version__,
        "wall_time_seconds": wall_time,
        "outputs": {str(p): file_sha256(p) for p in outputs},
    }
    path = path or str(outputs[0]) + ".manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def replay_manifest(manifest_path, out_dir):
    """Re-run a manifest's command writing into ``out_dir``; return per-output hash matches."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    args = dict(manifest["args"])
    mapping = {}
    for key in ("out", "metrics", "csv"):
        if args.get(key):
            new = os.path.join(out_dir, os.path.basename(args[key]))
            mapping[args[key]] = new
            args[key] = new
    argv = [manifest["command"]]
    for key, value in args.items():
        if key == "command" or value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        argv += [flag] if value is True else [f"{flag}={value}"]
    code = main(argv)
    if code != EXIT_OK:
        raise RuntimeError(f"replay exited with code {code}")
    return {old: file_sha256(new) == manifest["outputs"][old]
            for old, new in mapping.items() if old in manifest["outputs"]}


def _system_config(args):
    try:
        return SystemConfig(args.q, args.n, args.noise, args.power, args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _lbfgs_config(args):
    try:
        return LbfgsConfig(memory=args.memory, max_iters=args.max_iters, grad_tol=args.grad_tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_generate(args):
    cfg = _system_config(args)
    opt = _lbfgs_config(args)
    if args.num_samples < 1:
        raise UsageError("--num-samples must be >= 1")
    if args.perturb_k < 0 or args.perturb_delta < 0:
        raise UsageError("--perturb-k and --perturb-delta must be >= 0")
    seeds = sub_seeds(args.seed)
    H = generate_channel(cfg.q, cfg.n, seeds["channel"])
    t0 = time.perf_counter()
    if args.perturb_k > 0:
        ds = build_perturbed_dataset(H, cfg, opt, PerturbationSpec(args.perturb_delta, args.perturb_k),
                                     args.num_samples, cfg.se_threshold, seeds["init"], args.threads)
    else:
        ds = build_fixed_h_dataset(H, cfg, opt, args.num_samples, cfg.se_threshold, seeds["init"],
                                   args.threads)
    gen_time = time.perf_counter() - t0
    save(ds, args.out)
    outputs = [args.out]
    if args.csv:
        export_csv(ds, args.csv)
        outputs.append(args.csv)
    log.info("wrote %d samples over %d channel(s) to %s (mean SE %.3f, %d short channel(s))",
             len(ds), len(ds.channels), args.out, float(np.mean(ds.se)) if len(ds) else float("nan"),
             ds.meta["warnings"])
    write_manifest(args, outputs, gen_time)


def cmd_train(args):
    ds = load(args.dataset)
    cfg = ds.config
    hidden = tuple(int(x) for x in args.hidden.split(","))
    seeds = sub_seeds(args.seed)
    model = make_model(args.kind, cfg.n, cfg.q, d_model=args.d_model, hidden=hidden,
                       seed=seeds["init"])
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                     kl_warmup=args.kl_warmup)
    t0 = time.perf_counter()
    result = train(model, ds, tc, seeds["training"],
                   log=lambda row: log.info("epoch %(epoch)d vlb %(vlb).3f kl %(kl).3f "
                                            "val-recon-se %(val_recon_se).3f", row))
    wall = time.perf_counter() - t0
    metrics_path = args.metrics or args.out + ".metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(result.metrics[0]))
        writer.writeheader()
        writer.writerows(result.metrics)
    save_model(model, args.out, {"dataset": os.path.basename(args.dataset),
                                 "train_config": vars(tc), "seed": args.seed})
    write_manifest(args, [args.out, metrics_path], wall)


def _condition(ds, index):
    if not 0 <= index < len(ds.channels):
        raise UsageError(f"--channel-index {index} outside 0..{len(ds.channels) - 1}")
    return ds.channels[index]


def cmd_sample(args):
    model, _ = load_model(args.model)
    ds = load(args.dataset)
    cfg = ds.config
    H = _condition(ds, args.channel_index)
    seed = sub_seeds(args.seed)["sampling"]
    if model.conditional:
        Ws = sample_cvae(model, H, args.num, seed, cfg, project=not args.raw)
    else:
        Ws = sample_vae(model, args.num, seed, cfg, project=not args.raw)
    se = evaluate_precoders(H, Ws, cfg)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["se"] + [f"w{i}" for i in range(2 * cfg.n * cfg.q)])
        for s, W in zip(se, Ws):
            writer.writerow([repr(s)] + [repr(float(x)) for x in pack(W)])
    log.info("sampled %d precoders, mean SE %.3f", len(Ws), float(np.mean(se)) if se else float("nan"))
    write_manifest(args, [args.out], 0.0)


def _model_rows(report, model, kind, ds, H, cidx, num, seed, cfg):
    rows = np.flatnonzero(ds.channel_index == cidx)
    rng = make_rng(seed, "evaluate-reconstruct", kind)
    for project in (True, False):
        suffix = "" if project else "_raw"
        if model.conditional:
            Ws = sample_cvae(model, H, num, seed, cfg, project=project)
        else:
            Ws = sample_vae(model, num, seed, cfg, project=project)
        report.add(f"{kind}_sampled{suffix}", evaluate_precoders(H, Ws, cfg))
        if len(rows):
            h = None
            if model.conditional:
                h = pack_channel(H)[None, :]
            rec = unpack_batch(reconstruct_packed(model, ds.w[rows], h, rng), cfg.n, cfg.q)
            if project:
                rec = [project_power(W, cfg) for W in rec]
            report.add(f"{kind}_reconstructed{suffix}", evaluate_precoders(H, rec, cfg))
        else:
            report.add(f"{kind}_reconstructed{suffix}", [])


def cmd_evaluate(args):
    ds = load(args.dataset)
    cfg = ds.config
    H = _condition(ds, args.channel_index)
    seed = sub_seeds(args.seed)["sampling"]
    report = SeReport()
    rows = ds.channel_index == args.channel_index
    report.add("lbfgs", ds.se[rows])
    attempts = ds.meta.get("attempt_se", [])
    report.add("lbfgs_unfiltered", attempts[args.channel_index] if attempts else [])
    for name, value in baseline_se(H, cfg).items():
        report.add(name, [] if value is None else [value])
    for kind, path in (("vae", args.vae), ("cvae", args.cvae)):
        if path:
            model, _ = load_model(path)
            if (model.n, model.q) != (cfg.n, cfg.q):
                raise ConfigError("model and dataset dimensions differ")
            _model_rows(report, model, kind, ds, H, args.channel_index, args.num_samples, seed, cfg)
    with open(args.out + ".json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    with open(args.out + ".csv", "w", newline="") as fh:
        rows_ = report.rows()
        writer = csv.DictWriter(fh, fieldnames=list(rows_[0]))
        writer.writeheader()
        writer.writerows(rows_)
    for name, s in report.methods.items():
        log.info("%-26s n=%-5d mean SE %s", name, s["count"],
                 "n/a" if s["mean_se"] is None else f"{s['mean_se']:.3f}")
    write_manifest(args, [args.out + ".json", args.out + ".csv"], 0.0)


def cmd_bench(args):
    model, _ = load_model(args.model)
    cfg = SystemConfig(model.q, model.n, args.noise, args.power)
    opt = _lbfgs_config(args)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    H = generate_channel(cfg.q, cfg.n, sub_seeds(args.seed)["channel"])
    result = benchmark(model, H, cfg, opt, args.repeats, seed=args.seed)
    if result["low_confidence"]:
        log.warning("single repeat: timing is low-confidence")
    log.info("L-BFGS %.4fs (M=%g) vs inference %.2e s: ratio %.1f", result["lbfgs_median_seconds"],
             result["lbfgs_median_iterations"], result["inference_median_seconds"], result["ratio"])
    with open(args.out, "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    write_manifest(args, [args.out], result["lbfgs_median_seconds"])


def _add_system(p):
    p.add_argument("--q", type=int, default=4, help="number of users")
    p.add_argument("--n", type=int, default=16, help="number of base-station antennas")
    p.add_argument("--noise", type=float, default=1.0, help="noise power")
    p.add_argument("--power", type=float, default=1.0, help="per-antenna power budget")


def _add_lbfgs(p):
    p.add_argument("--memory", type=int, default=10)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--grad-tol", type=float, default=1e-6)


def build_parser():
    parser = _Parser(prog="precoder-forge",
                     description="Spectral-efficiency precoder datasets, VAE/CVAE training and evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("PRECODER_FORGE_THREADS", "1")))
        p.add_argument("--out", required=True)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("generate", help="build an L-BFGS precoder dataset")
    _add_system(p)
    _add_lbfgs(p)
    p.add_argument("--num-samples", type=int, default=5000)
    p.add_argument("--threshold", type=float, default=14.5)
    p.add_argument("--perturb-k", type=int, default=0)
    p.add_argument("--perturb-delta", type=float, default=5.0)
    p.add_argument("--csv", help="also export samples as CSV")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a VAE or CVAE on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", choices=("vae", "cvae"), required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", default="256,256")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--kl-warmup", action="store_true")
    p.add_argument("--metrics", help="metrics CSV path (default OUT.metrics.csv)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample precoders from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True, help="dataset supplying the channel")
    p.add_argument("--channel-index", type=int, default=0)
    p.add_argument("--num", type=int, default=1000)
    p.add_argument("--raw", action="store_true", help="skip the power projection")
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="SE report for L-BFGS, baselines and models")
    p.add_argument("--dataset", required=True)
    p.add_argument("--vae")
    p.add_argument("--cvae")
    p.add_argument("--channel-index", type=int, default=0)
    p.add_argument("--num-samples", type=int, default=1000)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="time one L-BFGS solve against one inference")
    p.add_argument("--model", required=True)
    _add_system(p)
    _add_lbfgs(p)
    p.add_argument("--repeats", type=int, default=5)
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"precoder-forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"precoder-forge {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, NonFiniteError, ParameterError, PrecoderError, FloatingPointError) as exc:
        print(f"precoder-forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
