"""Command-line entry point: ``mdrl {gen-data,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import csv
import dataclasses
import datetime as dt
import glob
import json
import logging
import os
import sys
import time

from . import __version__
from .config import PARAM_PATHS, TrainConfig, coerce, override, with_seed
from .data import generate_splits, read_sample, write_sample
from .exceptions import ConfigError, FormatError, NumericError

log = logging.getLogger("mdrl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _setup_logging():
    level = os.environ.get("MDRL_LOG", "info").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "INFO"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load_config(path):
    if path is None:
        return TrainConfig()
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if "config" in doc and "command" in doc:  # a run manifest
        doc = doc["config"]
    return TrainConfig.from_dict(doc)


def _apply_flags(config, args):
    for flag, path in PARAM_PATHS.items():
        value = getattr(args, flag.replace("-", "_"), None)
        if value is not None:
            config = override(config, path, coerce(path, value))
    simple = {
        "epochs": "optim.epochs",
        "lr": "optim.learning_rate",
        "batch_size": "optim.batch_size",
        "embed_dim": "model.embed_dim",
        "hidden_dim": "model.hidden_dim",
    }
    for attr, path in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            config = override(config, path, value)
    if getattr(args, "dtype", None):
        config = dataclasses.replace(config, dtype=args.dtype)
    if getattr(args, "seed", None) is not None:
        config = with_seed(config, args.seed)
    return config


def _write_manifest(out_dir, command, config, inputs, outputs, seeds, started):
    manifest = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seeds": seeds,
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _seeds(config):
    return {
        "data": config.data.seed,
        "model": config.model_seed,
        "bank": config.bank.init_seed,
        "shuffle": config.shuffle_seed,
    }


def _load_split(data_dir, split):
    if not os.path.isdir(data_dir):
        raise UsageError(f"data directory not found: {data_dir}")
    paths = sorted(glob.glob(os.path.join(data_dir, f"{split}_*.mdrs")))
    if not paths:
        raise UsageError(f"no {split} samples in {data_dir}")
    return [read_sample(p) for p in paths]


# commands -----------------------------------------------------------------


def cmd_gen_data(args):
    started = _now()
    config = _load_config(args.config)
    if args.seed is not None:
        config = override(config, "data.seed", args.seed)
    train, evals = generate_splits(config.data)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for split, samples in (("train", train), ("eval", evals)):
        for i, s in enumerate(samples):
            name = f"{split}_{i:05d}.mdrs"
            write_sample(os.path.join(args.out, name), s)
            written.append(name)
    _write_manifest(args.out, "gen-data", config.to_dict(), {}, {"files": len(written)}, _seeds(config), started)
    print(json.dumps({"out": args.out, "train": len(train), "eval": len(evals)}))
    return EXIT_OK


def cmd_train(args):
    from . import trainer

    started = _now()
    train = _load_split(args.data, "train")
    evals = _load_split(args.data, "eval") if glob.glob(os.path.join(args.data, "eval_*.mdrs")) else []
    state = None
    if args.resume:
        if not os.path.isfile(args.resume):
            raise UsageError(f"checkpoint not found: {args.resume}")
        state = trainer.load_checkpoint(args.resume)
        config = _apply_flags(state.config, args)
        state.config = config
    else:
        config = _apply_flags(_load_config(args.config), args)
    config = dataclasses.replace(
        config,
        data=dataclasses.replace(
            config.data,
            num_classes=train[0].num_classes,
            input_dim=train[0].features.shape[0],
            height=train[0].features.shape[1],
            width=train[0].features.shape[2],
            blob_size=(1, min(train[0].features.shape[1:])),
        ),
    )
    if state is not None:
        state.config = config
    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    mode = "a" if args.resume else "w"
    ckpt_path = os.path.join(args.out, "checkpoint.mdck")
    status = EXIT_OK
    with open(metrics_path, mode) as metrics:

        def on_step(entry):
            metrics.write(json.dumps(entry, sort_keys=True) + "\n")
            metrics.flush()

        try:
            state, record = trainer.fit(config, train, evals or None, state=state, eval_every=args.eval_every, on_step=on_step)
        except (NumericError, FloatingPointError) as exc:
            log.error("training aborted: %s", exc)
            status = EXIT_FAIL
    if status != EXIT_OK:
        _write_manifest(args.out, "train", config.to_dict(), {"data": args.data}, {"metrics": metrics_path}, _seeds(config), started)
        return status
    trainer.save_checkpoint(ckpt_path, state)
    report, _ = trainer.evaluate(state, evals) if evals else ({"miou": None, "per_class_iou": None, "confusion": None}, None)
    summary = {
        "hyperparameters": {
            "n_dist": config.n_dist,
            "lambda": config.sinkhorn.lam,
            "sinkhorn_iters": config.sinkhorn.iterations,
            "mu": config.bank.momentum,
            "tau": config.loss.tau,
            "eta": config.loss.eta,
            "alpha": config.loss.alpha,
            "beta": config.loss.beta,
            "warmup": config.bank.warmup_steps,
        },
        "steps": state.step,
        "final_loss": record.steps[-1] if record.steps else None,
        "epochs": record.epochs,
        "miou": report["miou"],
        "per_class_iou": report["per_class_iou"],
        "confusion": report["confusion"],
        "dead_prototypes": record.diagnostics["dead_prototypes"],
        "wall_clock": record.wall_clock,
    }
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    _write_manifest(
        args.out,
        "train",
        config.to_dict(),
        {"data": args.data, "resume": args.resume},
        {"checkpoint": ckpt_path, "metrics": metrics_path, "summary": os.path.join(args.out, "summary.json")},
        _seeds(config),
        started,
    )
    print(json.dumps({"miou": report["miou"], "steps": state.step, "checkpoint": ckpt_path}))
    return EXIT_OK


def cmd_eval(args):
    from . import trainer

    started = _now()
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    state = trainer.load_checkpoint(args.checkpoint)
    samples = _load_split(args.data, args.split)
    report, _ = trainer.evaluate(state, samples)
    report = {"split": args.split, **report}
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"eval_{args.split}.json"), "w") as fh:
            fh.write(text + "\n")
        _write_manifest(
            args.out, "eval", state.config.to_dict(), {"checkpoint": args.checkpoint, "data": args.data},
            {"report": f"eval_{args.split}.json"}, _seeds(state.config), started,
        )
    return EXIT_OK


def cmd_ablate(args):
    from . import trainer

    started = _now()
    config = _apply_flags(_load_config(args.config), args)
    values = [v for v in args.values.split(",") if v.strip()] if args.values else []
    seeds = list(range(args.seed or 0, (args.seed or 0) + args.seeds))
    train = evals = None
    if args.data:
        train, evals = _load_split(args.data, "train"), _load_split(args.data, "eval")
    rows = trainer.ablate(config, args.param, values, seeds, train, evals, jobs=args.jobs) if values else []
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation.json"), "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    with open(os.path.join(args.out, "ablation.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value"] + [f"miou_seed{s}" for s in seeds] + ["mean", "stdev", "failed"])
        for row in rows:
            writer.writerow([row["param"], repr(row["value"])] + [repr(v) for v in row["miou"]] + [repr(row["mean"]), repr(row["stdev"]), row["failed"]])
    _write_manifest(
        args.out, "ablate", config.to_dict(), {"data": args.data},
        {"json": "ablation.json", "csv": "ablation.csv", "param": args.param, "values": values}, {"seeds": seeds}, started,
    )
    for row in rows:
        print(f"{args.param}={row['value']}: mean mIoU {row['mean']}")
    return EXIT_OK


def cmd_gradcheck(args):
    from . import gradcheck

    started = _now()
    t0 = time.perf_counter()
    seed = args.seed or 0
    errors = gradcheck.run_suite(seed=seed, trials=args.trials)
    failed = [name for name, err in errors.items() if not err < gradcheck.TOLERANCE]
    report = {
        "seed": seed,
        "trials": args.trials,
        "tolerance": gradcheck.TOLERANCE,
        "max_rel_error": errors,
        "failed": failed,
    }
    for name, err in errors.items():
        print(f"{'PASS' if err < gradcheck.TOLERANCE else 'FAIL'} {name:16s} max rel error {err:.3e}")
    log.info("gradcheck finished in %.1fs", time.perf_counter() - t0)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        _write_manifest(args.out, "gradcheck", {"seed": seed, "trials": args.trials}, {}, {"report": "gradcheck.json"}, {"seed": seed}, started)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# parser -------------------------------------------------------------------------


def _add_shared(p, out_required=True):
    p.add_argument("--config", metavar="PATH", help="JSON config (or a run manifest)")
    p.add_argument("--seed", type=int, help="override every seed")
    p.add_argument("--out", metavar="PATH", required=out_required)
    p.add_argument("--jobs", type=int, default=1)


def _add_hyper(p):
    p.add_argument("--n-dist", type=int, dest="n_dist")
    p.add_argument("--lambda", type=float, dest="lambda")
    p.add_argument("--sinkhorn-iters", type=int, dest="sinkhorn_iters")
    p.add_argument("--mu", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--dtype", choices=["float32", "float64"])


def build_parser():
    parser = argparse.ArgumentParser(prog="mdrl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_shared(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_shared(p)
    _add_hyper(p)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--eval-every", type=int, default=1, dest="eval_every", help="epochs between eval passes (0 = never)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_shared(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "eval"], default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one hyperparameter over seeds")
    _add_shared(p)
    _add_hyper(p)
    p.add_argument("--param", required=True, choices=["n-dist", "alpha", "beta", "lambda", "sinkhorn-iters"])
    p.add_argument("--values", default="", help="comma-separated values")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed (default 0)")
    p.add_argument("--data", help="dataset directory (default: generate from the config)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="central-difference gradient checks")
    _add_shared(p, out_required=False)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError) as exc:
        print(f"mdrl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"mdrl {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (NumericError, FloatingPointError) as exc:
        print(f"mdrl {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
