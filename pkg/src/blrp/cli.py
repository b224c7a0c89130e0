"""``blrp`` command line: gen-data, train, eval, ablate, bench, gradcheck.

Exit status: 0 success, 1 validation error (bad flags, config, data, or a
failed check), 2 runtime error.
"""
import argparse
from dataclasses import asdict, fields
import hashlib
import json
import logging
import os
import sys
import time

from . import __version__
from .ablate import best_variant, default_grid, run_ablation
from .bench import BENCH_HEADER, DEFAULT_LENGTHS, growth_ratios, run_bench
from .data import (ListOpsSpec, augment_max_concat, gen_listops, label_distribution,
                   read_jsonl, write_jsonl)
from .errors import BLRPError, CheckpointError, ConfigError
from .gradcheck import run_toy
from .model import PRESET_BATCH, ModelConfig, param_count, preset
from .train import OptimConfig, evaluate_samples, load_model, train, write_csv

log = logging.getLogger("blrp")

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_OPTIM_KEYS = {f.name for f in fields(OptimConfig)}
_SPEC_KEYS = {f.name for f in fields(ListOpsSpec)}


class UsageError(BLRPError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def parse_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(value, like):
    if isinstance(value, str) and value.lower() in ("none", ""):
        return None
    if isinstance(like, bool):
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def _build(cls, base, settings, keys):
    kw = asdict(base) if not isinstance(base, dict) else dict(base)
    if hasattr(base, "to_dict"):
        kw = base.to_dict()
    for k in keys:
        if k in settings:
            kw[k] = _coerce(settings[k], kw.get(k))
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        if isinstance(e, BLRPError):
            raise
        raise ConfigError(str(e)) from None


def effective_settings(args):
    settings = parse_config_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        settings[k.strip().replace("-", "_")] = v.strip()
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    known = _MODEL_KEYS | _OPTIM_KEYS | _SPEC_KEYS | {"preset", "timing"} | _EXTRA_KEYS
    unknown = sorted(set(settings) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return settings


_EXTRA_KEYS = {"n", "n_val", "val_seed", "train", "val", "checkpoint", "data", "augment",
               "lengths", "naive_cap", "tolerance", "h", "max_entries"}


def model_config(settings, default_preset):
    name = settings.get("preset", default_preset)
    return _build(ModelConfig, preset(name), settings, _MODEL_KEYS)


def optim_config(settings, default_preset):
    name = settings.get("preset", default_preset)
    base = OptimConfig(batch_size=PRESET_BATCH.get(name, 32))
    return _build(OptimConfig, base, settings, _OPTIM_KEYS)


def list_spec(settings):
    return _build(ListOpsSpec, ListOpsSpec(), settings, _SPEC_KEYS)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config, inputs, outputs, extra=None, seconds=None):
    """Record what a run read and wrote; the run id hashes command, config and inputs."""
    input_hashes = {p: _sha256(p) for p in inputs}
    key = json.dumps({"command": command, "config": config, "inputs": input_hashes},
                     sort_keys=True, default=str)
    manifest = {
        "run_id": hashlib.sha256(key.encode()).hexdigest()[:16],
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": input_hashes,
        "outputs": sorted(outputs),
        "wallclock_seconds": seconds,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, f"manifest-{command}.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    os.replace(tmp, path)
    return path


def _ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def _timing(args, settings):
    return bool(args.timing or _coerce(settings.get("timing", False), False))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, settings):
    spec = list_spec(settings)
    n = int(args.n or settings.get("n", 20000))
    n_val = int(args.n_val or settings.get("n_val", 2000))
    val_spec = _build(ListOpsSpec, spec, {"seed": settings.get("val_seed", spec.seed + 1)}, {"seed"})
    train_s = gen_listops(spec, n)
    val_s = gen_listops(val_spec, n_val)
    tr, va = os.path.join(args.out, "train.jsonl"), os.path.join(args.out, "val.jsonl")
    write_jsonl(train_s, tr)
    write_jsonl(val_s, va)
    dist = {"train": label_distribution(train_s), "val": label_distribution(val_s)}
    log.info("label distribution train %s val %s", dist["train"], dist["val"])
    cfg = {"spec": asdict(spec), "val_seed": val_spec.seed, "n": n, "n_val": n_val}
    return cfg, [], [tr, va], {"label_distribution": dist}


def _data_paths(args, settings):
    tr = args.train or settings.get("train") or os.path.join(args.out, "train.jsonl")
    va = args.val or settings.get("val") or os.path.join(args.out, "val.jsonl")
    return tr, va


def cmd_train(args, settings):
    mcfg = model_config(settings, "listops-desk")
    ocfg = optim_config(settings, "listops-desk")
    tr, va = _data_paths(args, settings)
    res = train(mcfg, ocfg, tr, va, args.out, timing=_timing(args, settings), log=log.info)
    log.info("best val accuracy %.4f at epoch %d", res.best_accuracy, res.best_epoch)
    cfg = {"model": mcfg.to_dict(), "optim": asdict(ocfg), "param_count": param_count(mcfg)}
    return cfg, [tr, va], [res.metrics_path, res.checkpoint_path, res.best_path], {
        "best_epoch": res.best_epoch, "best_val_accuracy": res.best_accuracy}


EVAL_HEADER = ("factor", "n", "loss", "accuracy")
BUCKET_HEADER = ("factor", "min_length", "max_length", "count", "accuracy")


def cmd_eval(args, settings):
    ckpt = args.checkpoint or settings.get("checkpoint") or os.path.join(args.out, "model.ckpt")
    data = args.data or settings.get("data") or os.path.join(args.out, "val.jsonl")
    factors = _ints(args.augment or settings.get("augment", "1"))
    model, _, _ = load_model(ckpt)
    expect = {k: _coerce(settings[k], 0) for k in ("d", "vocab_size", "classes") if k in settings}
    for k, v in expect.items():
        if getattr(model.cfg, k) != v:
            raise CheckpointError(f"checkpoint has {k}={getattr(model.cfg, k)}, config says {v}")
    samples = read_jsonl(data, classes=model.cfg.classes, vocab_size=model.cfg.vocab_size)
    rows, brows = [], []
    for k in factors:
        sub = samples if k == 1 else [augment_max_concat(s, k) for s in samples]
        res = evaluate_samples(model, sub)
        rows.append([k, len(sub), repr(res.loss), repr(res.accuracy)])
        brows.extend([k, lo, hi, c, repr(a)] for lo, hi, c, a in res.buckets)
        log.info("factor %d: loss %.4f accuracy %.4f", k, res.loss, res.accuracy)
    ev, bk = os.path.join(args.out, "eval.csv"), os.path.join(args.out, "eval_buckets.csv")
    write_csv(ev, EVAL_HEADER, rows)
    write_csv(bk, BUCKET_HEADER, brows)
    return {"factors": factors}, [ckpt, data], [ev, bk], None


def cmd_ablate(args, settings):
    mcfg = model_config(settings, "listops-desk")
    ocfg = optim_config(settings, "listops-desk")
    tr, va = args.train or settings.get("train"), args.val or settings.get("val")
    inputs = []
    if tr and va:
        train_s = read_jsonl(tr, mcfg.classes, mcfg.vocab_size)
        val_s = read_jsonl(va, mcfg.classes, mcfg.vocab_size)
        inputs = [tr, va]
    else:
        spec = list_spec(settings)
        train_s = gen_listops(spec, int(settings.get("n", 2000)))
        val_s = gen_listops(_build(ListOpsSpec, spec, {"seed": spec.seed + 1}, {"seed"}),
                            int(settings.get("n_val", 500)))
    grid = default_grid()
    csv_path = os.path.join(args.out, "ablation.csv")
    results = run_ablation(grid, mcfg, ocfg, train_s, val_s, os.path.join(args.out, "ablation"),
                           csv_path, timing=_timing(args, settings), log=log.info)
    best = best_variant(results)
    ranking = [r.variant.descriptor for r in sorted(results, key=lambda r: -r.val_accuracy)]
    log.info("best variant: %s (val acc %.4f)", best.variant.descriptor, best.val_accuracy)
    cfg = {"model": mcfg.to_dict(), "optim": asdict(ocfg), "variants": len(grid)}
    return cfg, inputs, [csv_path], {"best_variant": best.variant.descriptor, "ranking": ranking}


def cmd_bench(args, settings):
    mcfg = model_config(settings, "listops")
    lengths = _ints(args.lengths or settings.get("lengths", ",".join(map(str, DEFAULT_LENGTHS))))
    cap = int(args.naive_cap or settings.get("naive_cap", 4096))
    rows = run_bench(lengths, mcfg, naive_cap=cap, seed=mcfg.seed, timing=_timing(args, settings))
    path = os.path.join(args.out, "bench.csv")
    write_csv(path, BENCH_HEADER, rows)
    ratios = {m: growth_ratios(rows, m) for m in ("blrp", "naive")}
    for m, rs in ratios.items():
        log.info("%s peak-bytes growth: %s", m, ", ".join(f"{n}: {r:.3f}" for n, r in rs))
    cfg = {"model": mcfg.to_dict(), "lengths": lengths, "naive_cap": cap}
    return cfg, [], [path], {"growth_ratios": ratios}


GRADCHECK_HEADER = ("parameter", "shape", "checked", "rel_error", "passed")


def cmd_gradcheck(args, settings):
    tol = float(args.tolerance if args.tolerance is not None else settings.get("tolerance", 1e-3))
    h = float(args.h if args.h is not None else settings.get("h", 1e-3))
    overrides = {k: _coerce(settings[k], 0) for k in ("d", "h_ff", "heads", "t", "l") if k in settings}
    if "seed" in settings:
        overrides["seed"] = int(settings["seed"])
    max_entries = settings.get("max_entries")
    max_entries = int(max_entries) if max_entries not in (None, "", "none") else None
    reports = run_toy(h=h, tol=tol, max_entries=max_entries, **overrides)
    path = os.path.join(args.out, "gradcheck.csv")
    write_csv(path, GRADCHECK_HEADER, [
        [r.name, "x".join(map(str, r.shape)), r.checked, repr(r.rel_error), int(r.passed)]
        for r in reports])
    worst = max(reports, key=lambda r: r.rel_error)
    failed = [r.name for r in reports if not r.passed]
    log.info("max relative error %.3e (%s); %d/%d parameters pass at tolerance %g",
             worst.rel_error, worst.name, len(reports) - len(failed), len(reports), tol)
    extra = {"max_rel_error": worst.rel_error, "failed": failed}
    return {"tolerance": tol, "h": h, "max_entries": max_entries, **overrides}, [], [path], extra


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    p = _Parser(prog="blrp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"blrp {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--timing", action="store_true",
                       help="fill wall-clock columns (makes CSVs run-dependent)")
        s.add_argument("-q", "--quiet", action="store_true")
        if name == "gen-data":
            s.add_argument("--n", type=int)
            s.add_argument("--n-val", type=int)
        if name in ("train", "ablate"):
            s.add_argument("--train")
            s.add_argument("--val")
        if name == "eval":
            s.add_argument("--checkpoint")
            s.add_argument("--data")
            s.add_argument("--augment", help="comma-separated MAX self-concatenation factors")
        if name == "bench":
            s.add_argument("--lengths", help="comma-separated ascending sequence lengths")
            s.add_argument("--naive-cap", type=int)
        if name == "gradcheck":
            s.add_argument("--tolerance", type=float)
            s.add_argument("--h", type=float)
    return p


def _limit_threads():
    n = os.environ.get("BLRP_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"blrp: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    limiter = _limit_threads()
    try:
        settings = effective_settings(args)
        os.makedirs(args.out, exist_ok=True)
        t0 = time.perf_counter()
        cfg, inputs, outputs, extra = COMMANDS[args.command](args, settings)
        write_manifest(args.out, args.command, cfg, inputs, outputs, extra,
                       seconds=round(time.perf_counter() - t0, 3))
        if args.command == "gradcheck" and extra["failed"]:
            print(f"blrp: gradcheck failed for {', '.join(extra['failed'])}", file=sys.stderr)
            return 1
        return 0
    except BLRPError as e:
        print(f"blrp: error: {e}", file=sys.stderr)
        return 1
    except (OSError, MemoryError, RuntimeError, FloatingPointError) as e:
        print(f"blrp: runtime error: {e}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
