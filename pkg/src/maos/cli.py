"""``maos`` command line: synth, train, translate, evaluate, sweep, gradcheck.

Exit codes: 0 success, 1 usage or config error, 2 numeric abort, 3 I/O error.

Run config (``train --config``, ``sweep --config``) is one JSON object whose
keys are the :class:`maos.trainer.TrainingConfig` fields plus:

``dataset``
    corpus directory written by ``maos synth``; ``null`` builds the
    synthetic corpus in memory from ``synth_n_source`` and ``seed``.
``synth_n_source`` (64), ``n_test`` (256)
    sizes for the in-memory corpus and its held-out test split.
``out_dir`` ("run")
    where telemetry, checkpoints, the effective config and metrics go.
``embedding`` ("downsample_pixels(8)")
    feature map for FID.
``evaluate`` (true)
    translate the test split after training and write ``metrics.json``.

Unknown keys are rejected and every problem is reported at once.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (SIZES, ImageFormatError, ImageSample, load_image, read_corpus, save_image, synth_corpus,
                   synth_test_set, write_corpus)
from .losses import adv_loss_global, adv_loss_part, balanced_total, cycle_loss
from .metrics import Embedding, MetricError, diversity_score, evaluate
from .models import build_discriminator, build_generator
from .tensor import Tensor
from .trainer import (CheckpointError, NonFiniteLossError, TrainingConfig, load_checkpoint, read_telemetry,
                      restore_nets, save_checkpoint, telemetry_columns, train_loop, translate, write_telemetry)

log = logging.getLogger("maos")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
IMAGE_SUFFIXES = (".ppm", ".png")
COLLAPSE_FRACTION = 0.05
GRADCHECK_LIMIT = 1e-3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- run config

RUN_DEFAULTS = {
    "dataset": None,
    "synth_n_source": 64,
    "n_test": 256,
    "out_dir": "run",
    "embedding": "downsample_pixels(8)",
    "evaluate": True,
}


@dataclass
class RunConfig:
    training: TrainingConfig
    dataset: str | None = None
    synth_n_source: int = 64
    n_test: int = 256
    out_dir: str = "run"
    embedding: str = "downsample_pixels(8)"
    evaluate: bool = True

    def to_dict(self) -> dict:
        d = self.training.to_dict()
        d.update({k: getattr(self, k) for k in RUN_DEFAULTS})
        return d


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    return True


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a config document; raises ConfigError listing every problem."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    train_defaults = TrainingConfig().to_dict()
    problems = []
    for key in sorted(set(doc) - set(train_defaults) - set(RUN_DEFAULTS)):
        problems.append(f"{key}: unknown key")
    train_kw, run_kw = {}, {}
    for key, value in doc.items():
        if key in train_defaults:
            if not _type_ok(value, train_defaults[key]):
                problems.append(f"{key}: expected {type(train_defaults[key]).__name__}, got {value!r}")
            else:
                train_kw[key] = value
        elif key in RUN_DEFAULTS:
            default = RUN_DEFAULTS[key]
            if key == "dataset":
                if value is not None and not isinstance(value, str):
                    problems.append(f"dataset: expected path string or null, got {value!r}")
                else:
                    run_kw[key] = value
            elif not _type_ok(value, default):
                problems.append(f"{key}: expected {type(default).__name__}, got {value!r}")
            else:
                run_kw[key] = value
    cfg = TrainingConfig(**train_kw)
    problems += cfg.problems()
    if "embedding" in run_kw:
        try:
            Embedding.parse(run_kw["embedding"])
        except (MetricError, ValueError) as e:
            problems.append(f"embedding: {e}")
    if run_kw.get("synth_n_source", 64) < 2:
        problems.append("synth_n_source: need >= 2 source images")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return RunConfig(cfg, **run_kw)


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return parse_run_config(doc)


def echo_config(run: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- shared helpers

def load_task(run: RunConfig):
    """``(dataset, test_sources, test_oracles)`` for a run config."""
    cfg = run.training
    if run.dataset is None:
        ds, _ = synth_corpus(run.synth_n_source, cfg.image_size, cfg.seed, cfg.augmentation)
        xs, ys = synth_test_set(run.n_test, cfg.image_size, cfg.seed)
        return ds, [x.pixels for x in xs], [y.pixels for y in ys]
    ds, xs, ys = read_corpus(run.dataset, cfg.augmentation)
    if ds.image_size != cfg.image_size:
        raise ConfigError(f"image_size: config says {cfg.image_size}, dataset has {ds.image_size}")
    return ds, [x.pixels for x in xs], [y.pixels for y in ys]


def evaluate_generator(gen, test_x, test_y, emb: Embedding) -> dict:
    """Translate held-out sources and score them against their oracle images."""
    fx = translate(gen, np.stack(test_x))
    out = list(fx)
    report = evaluate(out, test_y, paired_oracle=test_y, emb=emb)
    base = evaluate(test_x, test_y, paired_oracle=test_y, emb=emb)
    report["baseline_fid"] = base["fid"]
    report["baseline_ssim_mean"] = base["ssim_mean"]
    report["input_diversity"] = base["diversity"]
    report["collapse"] = bool(report["diversity"] < COLLAPSE_FRACTION * base["diversity"])
    return report


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_training(run: RunConfig, out_dir: Path, resume: Path | None = None) -> dict:
    """Train per ``run`` into ``out_dir``; returns the metric report (or {})."""
    echo_config(run, out_dir)
    ds, test_x, test_y = load_task(run)
    ckpt = load_checkpoint(resume) if resume is not None else None
    if ckpt is not None and ckpt.config != run.training.to_dict():
        changed = sorted(k for k, v in run.training.to_dict().items() if ckpt.config.get(k) != v)
        if changed != ["iterations"]:
            raise ConfigError(f"resume: checkpoint config differs in {', '.join(c for c in changed if c != 'iterations')}")
        ckpt.config["iterations"] = run.training.iterations
    previous = []
    if ckpt is not None and (out_dir / "telemetry.csv").exists():
        previous = [r for r in read_telemetry(out_dir / "telemetry.csv") if r["iteration"] <= ckpt.iteration]
    final, rows = train_loop(ds, run.training, out_dir, resume=ckpt, progress_every=100)
    if previous:
        write_telemetry(previous + rows, out_dir / "telemetry.csv", telemetry_columns(run.training))
    report = {}
    if run.evaluate and len(test_x) >= 2:
        nets = restore_nets(final)
        report = evaluate_generator(nets.F, test_x, test_y, Embedding.parse(run.embedding))
        report["iteration"] = final.iteration
        _write_json(out_dir / "metrics.json", report)
    return report


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    if args.n < 2:
        raise ConfigError("need ≥ 2 source images")
    if args.size not in SIZES:
        raise ConfigError(f"--size must be one of {SIZES}")
    m = write_corpus(args.out, args.n, args.size, args.seed, n_test=args.n_test)
    print(json.dumps({"out": str(args.out), "n_source": args.n, "size": args.size, "seed": args.seed,
                      "n_test": len(m["test"])}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    out = Path(args.out_dir or run.out_dir)
    report = run_training(run, out, Path(args.resume) if args.resume else None)
    print(json.dumps({"out_dir": str(out), **{k: report[k] for k in ("fid", "ssim_mean", "diversity")
                                              if k in report}}, sort_keys=True))
    return EXIT_OK


def cmd_translate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    nets = restore_nets(ckpt)
    size = ckpt.config["image_size"]
    gen = nets.F if args.direction == "xy" else nets.G
    paths = list_images(args.inp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imgs = []
    for p in paths:
        img = load_image(p)
        if img.size != size:
            raise ConfigError(f"{p}: image is {img.size}x{img.size}, checkpoint expects {size}x{size}")
        imgs.append(img.pixels)
    outs = translate(gen, np.stack(imgs)) if imgs else []
    for p, px in zip(paths, outs):
        save_image(px, out / p.name)
    print(json.dumps({"direction": args.direction, "count": len(paths), "out": str(out)}, sort_keys=True))
    return EXIT_OK


def _load_dir(directory) -> tuple[list[str], list[np.ndarray]]:
    paths = list_images(directory)
    if not paths:
        raise ConfigError(f"{directory}: no images")
    return [p.name for p in paths], [load_image(p).pixels for p in paths]


def cmd_evaluate(args) -> int:
    emb = Embedding.parse(args.embedding)
    names, gen = _load_dir(args.generated)
    _, ref = _load_dir(args.reference)
    oracle = None
    if args.paired_oracle:
        onames, oracle = _load_dir(args.paired_oracle)
        if onames != names:
            raise ConfigError("paired oracle filenames must match generated filenames")
    report = evaluate(gen, ref, paired_oracle=oracle, emb=emb)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    out = Path(args.out) if args.out else Path(args.generated) / "report.json"
    out.write_text(text + "\n")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["file", "ssim"] if oracle is not None else ["file"])
            for i, n in enumerate(names):
                w.writerow([n, repr(float(report["ssim_per_pair"][i]))] if oracle is not None else [n])
    return EXIT_OK


SWEEP_AXES = ("alpha", "n_threads", "part_size")
SUMMARY_COLUMNS = ["axis", "value", "seed", "status", "fid", "baseline_fid", "ssim_mean", "baseline_ssim_mean",
                   "diversity", "input_diversity", "collapse", "error"]


def parse_sweep_values(axis: str, text: str, image_size: int) -> list:
    out = []
    for raw in (t.strip() for t in text.split(",")):
        if not raw:
            continue
        if axis == "alpha":
            out.append(float(raw))
        elif axis == "part_size" and "H" in raw:
            # ratio forms like H/4, H/2, 5H/8
            num, _, den = raw.partition("/")
            k = num.replace("H", "").strip() or "1"
            out.append(int(image_size * int(k) // int(den or 1)))
        else:
            out.append(int(raw))
    if not out:
        raise ConfigError("--values: no values given")
    return out


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"--axis must be one of {SWEEP_AXES}")
    base = load_run_config(args.config)
    try:
        values = parse_sweep_values(args.axis, args.values, base.training.image_size)
    except ValueError as e:
        raise ConfigError(f"--values: {e}") from e
    root = Path(args.out_dir or base.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows, failed = [], 0
    for i, value in enumerate(values):
        seed = base.training.seed + i
        row = {"axis": args.axis, "value": value, "seed": seed}
        try:
            doc = base.to_dict()
            doc.update({args.axis: value, "seed": seed, "evaluate": True})
            run = parse_run_config(doc)
            report = run_training(run, root / f"{args.axis}={value}")
            row.update(status="ok", **{k: report.get(k) for k in SUMMARY_COLUMNS if k in report})
        except Exception as e:  # child failures are recorded, the sweep continues
            failed += 1
            row.update(status="failed", error=f"{type(e).__name__}: {e}".replace("\n", " "))
            log.error("sweep child %s=%s failed: %s", args.axis, value, e)
        rows.append(row)
    with open(root / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    for r in rows:
        if r.get("collapse"):
            print(f"COLLAPSE: {args.axis}={r['value']} diversity {r['diversity']:.4g} < "
                  f"{COLLAPSE_FRACTION:.0%} of input diversity {r['input_diversity']:.4g}")
    print(json.dumps({"summary": str(root / "summary.csv"), "runs": len(rows), "failed": failed}))
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------- gradcheck

def _gradcheck_cases(seed: int) -> list[tuple[str, object, list[Tensor], dict]]:
    rng = np.random.default_rng(seed)

    def r(*shape, lo=None, hi=None):
        if lo is not None:
            return Tensor(rng.uniform(lo, hi, size=shape))
        return Tensor(rng.normal(size=shape))

    w = r(3, 4)
    cases = [
        ("add", lambda a, b: T.sum_(T.tanh(T.add(a, b))), [r(3, 4), r(3, 4)], {}),
        ("sub", lambda a, b: T.sum_(T.tanh(T.sub(a, b))), [r(3, 4), r(3, 4)], {}),
        ("mul", lambda a, b: T.sum_(T.mul(a, b)), [r(3, 4), r(3, 4)], {}),
        ("scale", lambda a: T.sum_(T.tanh(T.scale(a, -1.7))), [r(3, 4)], {}),
        ("neg", lambda a: T.sum_(T.mul(T.neg(a), w)), [r(3, 4)], {}),
        ("log", lambda a: T.sum_(T.log(a)), [r(3, 4, lo=0.2, hi=3.0)], {}),
        ("exp", lambda a: T.sum_(T.exp(a)), [r(3, 4)], {}),
        ("relu", lambda a: T.sum_(T.mul(T.relu(a), w)), [r(3, 4)], {}),
        ("leaky_relu", lambda a: T.sum_(T.mul(T.leaky_relu(a, 0.2), w)), [r(3, 4)], {}),
        ("tanh", lambda a: T.sum_(T.tanh(a)), [r(3, 4)], {}),
        ("atanh", lambda a: T.sum_(T.mul(T.atanh(a), w)), [r(3, 4, lo=-0.9, hi=0.9)], {}),
        ("sigmoid", lambda a: T.sum_(T.sigmoid(a)), [r(3, 4)], {}),
        ("abs", lambda a: T.sum_(T.mul(T.absolute(a), w)), [r(3, 4)], {}),
        ("clamp_min", lambda a: T.sum_(T.mul(T.clamp_min(a, 0.1), w)), [r(3, 4)], {}),
        ("sum", lambda a: T.sum_(T.mul(a, a)), [r(3, 4)], {}),
        ("mean", lambda a: T.mean(T.mul(a, a)), [r(3, 4)], {}),
        ("take", lambda a: T.sum_(T.tanh(T.take(a, (slice(1, 3), slice(None))))), [r(3, 4)], {}),
        ("concat", lambda a, b: T.sum_(T.tanh(T.concat([a, b], axis=1))), [r(1, 2, 3, 3), r(1, 1, 3, 3)], {}),
        ("crop2d", lambda a: T.sum_(T.tanh(T.crop2d(a, [(1, 0), (0, 2)], 3))), [r(2, 2, 5, 5)], {}),
        ("conv2d", lambda x, k, b: T.mean(T.tanh(T.conv2d(x, k, b, stride=2, padding=1))),
         [r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)], {}),
        ("conv2d_grouped", lambda x, k, b: T.mean(T.tanh(T.conv2d(x, k, b, padding=1, groups=2))),
         [r(2, 4, 5, 5), r(6, 2, 3, 3), r(6)], {}),
        ("conv_transpose2d", lambda x, k, b: T.mean(T.tanh(T.conv_transpose2d(x, k, b))),
         [r(1, 3, 3, 3), r(3, 2, 3, 3), r(2)], {}),
        ("instance_norm", lambda x: T.sum_(T.mul(T.instance_norm(x), Tensor(np.linspace(-1, 1, 32).reshape(1, 2, 4, 4)))),
         [r(1, 2, 4, 4)], {}),
    ]
    cases.append(("composite_gan_loss", *_composite_case(seed)))
    return cases


def _composite_case(seed: int):
    """Full F/G + D_g/D_p/D_X objective on tiny nets; every parameter is checked (sampled coords)."""
    f = build_generator(4, 1, seed=seed + 1, input_skip=True)
    g = build_generator(4, 1, seed=seed + 2, input_skip=True)
    dg = build_discriminator("global", 2, 4, depth=2, seed=seed + 3)
    dp = build_discriminator("part", 2, 4, depth=2, seed=seed + 4)
    dx = build_discriminator("source", 2, 4, depth=2, seed=seed + 5)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)))
    y = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)))
    offs = [(0, 0), (0, 0)]
    nets = {"F": f, "G": g, "D_g": dg, "D_p": dp, "D_X": dx}
    names = [(n, k) for n, net in nets.items() for k in net.params]
    params = [nets[n].params[k] for n, k in names]
    for p in params:
        # scale weights up so activations are not vanishingly small
        p.data = p.data * 25.0 + rng.normal(0, 0.05, p.shape)

    class _Cfg:
        alpha, cycle_weight = 0.1, 10.0

    def loss(*_):
        fy, fx = f(x), g(y)
        tgt = {"global": adv_loss_global(dg, y, fy), "part": adv_loss_part(dp, T.crop2d(y, offs, 8),
                                                                             T.crop2d(fy, offs, 8), part_size=8)}
        src = adv_loss_global(dx, x, fx)
        total_g, d_upd = balanced_total(tgt, src, _Cfg, (cycle_loss(x, g(fy)), cycle_loss(y, f(fx))))
        terms = [total_g] + [t for ts in d_upd.values() for t in ts]
        out = terms[0]
        for t in terms[1:]:
            out = T.add(out, t)
        return out

    return loss, params, {"max_coords": 4}


def run_gradcheck(seed: int) -> dict:
    results = {}
    for name, fn, pts, kw in _gradcheck_cases(seed):
        d = T.grad_check_details(fn, pts, h=1e-4, seed=seed, **kw)
        err = float(d["max_relative_error"])
        results[name] = {"max_relative_error": err, "checked": int(d["checked"]),
                         "skipped": int(d["skipped"]), "pass": err < GRADCHECK_LIMIT}
    return results


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_gradcheck(args.seed)
    for name, r in results.items():
        print(f"{'PASS' if r['pass'] else 'FAIL'} {name:<20} max_rel_err={r['max_relative_error']:.3e} "
              f"checked={r['checked']} skipped={r['skipped']}")
    ok = all(r["pass"] for r in results.values())
    print(f"{'all ops pass' if ok else 'gradient check FAILED'} ({len(results)} ops, "
          f"{time.perf_counter() - t0:.1f}s)")
    if args.json:
        _write_json(Path(args.json), {"seed": args.seed, "results": results})
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maos", description="One-shot image translation with part-global multi-thread discriminators.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write the synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-test", type=int, default=256)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a JSON run config")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.add_argument("--out-dir", help="override the config's out_dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="apply a trained generator to a directory of images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--direction", choices=("xy", "yx"), default="xy")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="FID / SSIM / diversity report")
    s.add_argument("--generated", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--paired-oracle")
    s.add_argument("--embedding", default="downsample_pixels(8)")
    s.add_argument("--out", help="report path (default: <generated>/report.json)")
    s.add_argument("--csv", help="optional per-image CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="one training run per axis value")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma list; part_size also accepts H/4, H/2, 5H/8")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, MetricError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, T.DomainError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ImageFormatError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
