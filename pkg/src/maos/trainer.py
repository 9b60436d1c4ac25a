"""Adam, the alternating update schedule, checkpoints and telemetry.

One iteration:

1. Forward ``F(x)``, ``G(F(x))``, ``G(y)``, ``F(G(y))`` on a tape that is
   kept for the generator update.
2. Discriminator update on detached fakes. Every thread's loss is
   back-propagated as a sum; because threads share no parameters each thread
   receives exactly the gradient of its own loss. Target-side thread losses
   (global and part) are scaled by ``alpha`` first.
3. Generator update from ``alpha * (global + part) + source + cycle_weight *
   (cycle_x + cycle_y)`` with every discriminator parameter frozen.

Checkpoint layout (little-endian)::

    b"MAOS" | u16 version | u32 meta length | meta JSON (utf-8)
    | u32 tensor count | count x (u16 name length, name, u8 dtype code,
      u8 ndim, ndim x u32 dims, u64 payload offset)
    | payloads

dtype code 0 is float32 and 1 is float64. Training checkpoints store
float64 so a resumed run reproduces the uninterrupted one bit for bit;
``save_checkpoint(..., dtype="float32")`` writes the compact form.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import AugmentFlags, CropSpec, OneShotDataset, one_shot_batch, random_part_crop
from .losses import LOSS_FORMS, adv_loss_global, adv_loss_part, balanced_total, cycle_loss
from .models import (DEFAULT_DEPTH, DiscriminatorNet, GeneratorNet, build_discriminator,
                     build_generator)
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"MAOS"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_CODES = {"float32": 0, "float64": 1}


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainingConfig:
    alpha: float = 0.1
    n_threads: int = 4
    part_size: int = 16
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    cycle_weight: float = 10.0
    iterations: int = 2000
    batch_size: int = 4
    seed: int = 0
    image_size: int = 32
    loss_form: str = "nonsaturating_log"
    gen_width: int = 8
    gen_res_blocks: int = 2
    gen_input_skip: bool = True
    disc_width: int = 16
    global_depth: int = DEFAULT_DEPTH["global"]
    part_depth: int = DEFAULT_DEPTH["part"]
    use_global: bool = True
    use_part: bool = True
    augment_flip: bool = True
    augment_rotate: bool = True
    augment_center_crop: bool = True
    checkpoint_every: int = 0

    def problems(self) -> list[str]:
        """Every violated constraint, as ``field: message`` strings."""
        out = []
        if not self.lr > 0:
            out.append(f"lr: must be > 0, got {self.lr}")
        if not 0 < self.alpha <= 1:
            out.append(f"alpha: must be in (0, 1], got {self.alpha}")
        if self.n_threads < 1:
            out.append(f"n_threads: must be >= 1, got {self.n_threads}")
        if not 0 < self.part_size <= self.image_size:
            out.append(f"part_size: must be in (0, image_size={self.image_size}], got {self.part_size}")
        if self.image_size not in (32, 64, 128):
            out.append(f"image_size: must be 32, 64 or 128, got {self.image_size}")
        if self.batch_size < 1:
            out.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            out.append(f"iterations: must be >= 0, got {self.iterations}")
        if self.cycle_weight < 0:
            out.append(f"cycle_weight: must be >= 0, got {self.cycle_weight}")
        if self.loss_form not in LOSS_FORMS:
            out.append(f"loss_form: must be one of {LOSS_FORMS}, got {self.loss_form!r}")
        if self.disc_width % max(self.n_threads, 1):
            out.append(f"disc_width: {self.disc_width} not divisible by n_threads={self.n_threads}")
        if self.use_part and self.part_depth >= self.global_depth:
            out.append(f"part_depth: must be < global_depth ({self.global_depth}), got {self.part_depth}")
        if self.use_part and self.part_size < 2 ** (self.part_depth + 1):
            out.append(f"part_size: {self.part_size} too small for part_depth={self.part_depth}")
        if self.image_size < 2 ** (self.global_depth + 1):
            out.append(f"global_depth: {self.global_depth} too deep for image_size={self.image_size}")
        if self.checkpoint_every < 0:
            out.append(f"checkpoint_every: must be >= 0, got {self.checkpoint_every}")
        return out

    def validate(self) -> "TrainingConfig":
        probs = self.problems()
        if probs:
            raise ValueError("invalid training config:\n  " + "\n  ".join(probs))
        return self

    @property
    def augmentation(self) -> AugmentFlags:
        return AugmentFlags(self.augment_flip, self.augment_rotate, self.augment_center_crop)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, b1: float = 0.5,
              b2: float = 0.999, eps: float = 1e-8, grads: dict[str, np.ndarray] | None = None) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Gradients come from ``grads`` or, by default, each parameter's ``.grad``
    (a missing gradient counts as zero).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise T.ShapeError(f"adam_step: grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- networks

NET_NAMES = ("F", "G", "D_g", "D_p", "D_X")


@dataclass
class Nets:
    F: GeneratorNet
    G: GeneratorNet
    D_g: DiscriminatorNet | None
    D_p: DiscriminatorNet | None
    D_X: DiscriminatorNet

    def items(self):
        for name in NET_NAMES:
            net = getattr(self, name)
            if net is not None:
                yield name, net

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{n}/{k}": p for n, net in self.items() for k, p in net.params.items()}

    @property
    def discriminators(self) -> dict[str, DiscriminatorNet]:
        return {n: net for n, net in self.items() if n.startswith("D_")}


def build_nets(cfg: TrainingConfig) -> Nets:
    s = cfg.seed * 16
    return Nets(
        F=build_generator(cfg.gen_width, cfg.gen_res_blocks, seed=s + 1, input_skip=cfg.gen_input_skip),
        G=build_generator(cfg.gen_width, cfg.gen_res_blocks, seed=s + 2, input_skip=cfg.gen_input_skip),
        D_g=build_discriminator("global", cfg.n_threads, cfg.disc_width, cfg.global_depth, seed=s + 3,
                                input_size=cfg.image_size) if cfg.use_global else None,
        D_p=build_discriminator("part", cfg.n_threads, cfg.disc_width, cfg.part_depth, seed=s + 4,
                                input_size=cfg.part_size) if cfg.use_part else None,
        D_X=build_discriminator("source", cfg.n_threads, cfg.disc_width, cfg.global_depth, seed=s + 5,
                                input_size=cfg.image_size),
    )


# ---------------------------------------------------------------- one step

D_KEYS = {"global": "D_g", "part": "D_p", "source": "D_X"}


@dataclass
class StepReport:
    losses: dict[str, float]
    per_thread_d_losses: dict[str, list[float]]
    grad_norms: dict[str, float]


def _check_finite(name: str, value: Tensor) -> float:
    v = value.item()
    if not math.isfinite(v):
        raise NonFiniteLossError(f"non-finite loss in term {name!r}: {v}")
    return v


def _grad_norm(net) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in net.params.values() if p.grad is not None))


def train_step(nets: Nets, batch: tuple[np.ndarray, np.ndarray], cfg: TrainingConfig,
               rng: np.random.Generator, opt: dict[str, AdamState],
               thread_loss_mask: dict[str, list[float]] | None = None) -> StepReport:
    """One D-then-G iteration. ``batch`` is ``(source, target)`` arrays.

    ``thread_loss_mask`` multiplies individual discriminator-thread losses
    (keys ``global``/``part``/``source``) before back-propagation; it exists
    to probe thread isolation.
    """
    x = Tensor(batch[0])
    y = Tensor(batch[1])
    form = cfg.loss_form
    p = cfg.part_size

    with T.Tape() as gtape:
        fake_y = nets.F(x)
        rec_x = nets.G(fake_y)
        fake_x = nets.G(y)
        rec_y = nets.F(fake_x)

    # discriminators
    for d in nets.discriminators.values():
        T.zero_grad(d.parameters())
    with T.Tape() as dtape:
        fy, fx = fake_y.detach(), fake_x.detach()
        target = {}
        if nets.D_g is not None:
            target["global"] = adv_loss_global(nets.D_g, y, fy, form)
        if nets.D_p is not None:
            real_crops, _ = random_part_crop(y, CropSpec(p, rng))
            fake_crops, offs_fake = random_part_crop(fy, CropSpec(p, rng))
            target["part"] = adv_loss_part(nets.D_p, real_crops, fake_crops, form, p)
        source = adv_loss_global(nets.D_X, x, fx, form)
        _, d_updates = balanced_total(target, source, cfg)
        terms = []
        for key, losses in d_updates.items():
            mask = (thread_loss_mask or {}).get(key)
            for i, t in enumerate(losses):
                terms.append(t if mask is None else T.scale(t, mask[i]))
        d_total = terms[0]
        for t in terms[1:]:
            d_total = T.add(d_total, t)
    report_losses = {}
    per_thread = {}
    for key, b in list(target.items()) + [("source", source)]:
        report_losses[f"d_{key}"] = _check_finite(f"d_{key}", b.d_loss)
        per_thread[key] = [_check_finite(f"d_{key}[{i}]", t) for i, t in enumerate(b.per_thread_d_losses)]
    if d_total.requires_grad:
        T.backward(d_total, dtape)
    grad_norms = {}
    for name, d in nets.discriminators.items():
        grad_norms[name] = _grad_norm(d)
        adam_step(d.params, opt[name], cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    # generators, discriminators frozen
    frozen = [q for d in nets.discriminators.values() for q in d.parameters()]
    for q in frozen:
        q.requires_grad = False
    try:
        T.zero_grad(nets.F.parameters() + nets.G.parameters())
        with gtape:
            target_g = {}
            if nets.D_g is not None:
                target_g["global"] = adv_loss_global(nets.D_g, None, fake_y, form)
            if nets.D_p is not None:
                target_g["part"] = adv_loss_part(nets.D_p, None, T.crop2d(fake_y, offs_fake, p), form, p)
            source_g = adv_loss_global(nets.D_X, None, fake_x, form)
            cyc_x = cycle_loss(x, rec_x)
            cyc_y = cycle_loss(y, rec_y)
            total_g, _ = balanced_total(target_g, source_g, cfg, (cyc_x, cyc_y))
        for key, b in list(target_g.items()) + [("source", source_g)]:
            report_losses[f"g_{key}"] = _check_finite(f"g_{key}", b.g_loss)
        report_losses["cycle_x"] = _check_finite("cycle_x", cyc_x)
        report_losses["cycle_y"] = _check_finite("cycle_y", cyc_y)
        report_losses["total_g"] = _check_finite("total_g", total_g)
        T.backward(total_g, gtape)
    finally:
        for q in frozen:
            q.requires_grad = True
    for name in ("F", "G"):
        net = getattr(nets, name)
        grad_norms[name] = _grad_norm(net)
        adam_step(net.params, opt[name], cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return StepReport(report_losses, per_thread, grad_norms)


# ---------------------------------------------------------------- telemetry

def telemetry_columns(cfg: TrainingConfig) -> list[str]:
    keys = [k for k, on in (("global", cfg.use_global), ("part", cfg.use_part), ("source", True)) if on]
    cols = ["iteration"]
    cols += [f"d_{k}" for k in keys]
    cols += [f"g_{k}" for k in keys]
    cols += ["cycle_x", "cycle_y", "total_g"]
    cols += [f"d_{k}_t{i}" for k in keys for i in range(cfg.n_threads)]
    cols += [f"gradnorm_{n}" for n in ("D_g", "D_p", "D_X", "F", "G")
             if not (n == "D_g" and not cfg.use_global) and not (n == "D_p" and not cfg.use_part)]
    cols.append("wall_time")
    return cols


def telemetry_row(it: int, rep: StepReport, wall: float) -> dict:
    row = {"iteration": it, **rep.losses}
    for k, vals in rep.per_thread_d_losses.items():
        row.update({f"d_{k}_t{i}": v for i, v in enumerate(vals)})
    row.update({f"gradnorm_{n}": v for n, v in rep.grad_norms.items()})
    row["wall_time"] = wall
    return row


def write_telemetry(rows: list[dict], path, columns: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_telemetry(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(f)]


def deterministic_view(rows: list[dict]) -> list[dict]:
    """Telemetry without the wall-clock column."""
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: dict[str, AdamState]
    config: dict
    rng_state: dict
    sampler_state: dict
    iteration: int


def make_checkpoint(nets: Nets, opt: dict[str, AdamState], cfg: TrainingConfig,
                    rng: np.random.Generator, ds: OneShotDataset | None, iteration: int) -> Checkpoint:
    return Checkpoint(
        params={k: p.data.copy() for k, p in nets.named_parameters().items()},
        adam={n: AdamState({k: v.copy() for k, v in s.m.items()},
                           {k: v.copy() for k, v in s.v.items()}, s.step) for n, s in opt.items()},
        config=cfg.to_dict(),
        rng_state=rng.bit_generator.state,
        sampler_state=ds.sampler_state() if ds is not None else {"order": [], "cursor": 0},
        iteration=iteration,
    )


def save_checkpoint(ckpt: Checkpoint, path, dtype: str = "float64") -> None:
    if dtype not in _CODES:
        raise ValueError(f"dtype must be float32 or float64, got {dtype!r}")
    tensors: list[tuple[str, np.ndarray]] = sorted(ckpt.params.items())
    for net in sorted(ckpt.adam):
        st = ckpt.adam[net]
        tensors += [(f"adam/{net}/m/{k}", st.m[k]) for k in sorted(st.m)]
        tensors += [(f"adam/{net}/v/{k}", st.v[k]) for k in sorted(st.v)]
    meta = {
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "sampler_state": ckpt.sampler_state,
        "iteration": ckpt.iteration,
        "adam_steps": {n: s.step for n, s in sorted(ckpt.adam.items())},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    code = _CODES[dtype]
    head = io.BytesIO()
    head.write(MAGIC)
    head.write(struct.pack("<HI", VERSION, len(meta_bytes)))
    head.write(meta_bytes)
    head.write(struct.pack("<I", len(tensors)))
    offset = 0
    payloads = []
    for name, arr in tensors:
        nb = name.encode()
        head.write(struct.pack("<H", len(nb)) + nb)
        head.write(struct.pack("<BB", code, arr.ndim))
        head.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.write(struct.pack("<Q", offset))
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        payloads.append(raw)
        offset += len(raw)
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(head.getvalue())
            for raw in payloads:
                f.write(raw)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected: dict[str, tuple[int, ...]] | None = None) -> Checkpoint:
    """Read a checkpoint; ``expected`` maps required parameter names to shapes."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: corrupt checkpoint (bad magic)")
    version, meta_len = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (offset,) = r.unpack("<Q")
        table.append((name, code, tuple(shape), offset))
    base = r.pos
    tensors = {}
    for name, code, shape, offset in table:
        dt = np.dtype(_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        r.pos = base + offset
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).astype(np.float64).reshape(shape)

    params = {k: v for k, v in tensors.items() if not k.startswith("adam/")}
    if expected is None:
        expected = _expected_shapes(meta["config"])
    for key, shape in expected.items():
        if key not in params:
            raise CheckpointError(f"{path}: schema error, missing tensor {key!r}")
        if params[key].shape != tuple(shape):
            raise CheckpointError(f"{path}: schema error, {key!r} has shape {params[key].shape}, expected {shape}")
    adam = {}
    for net, step in meta["adam_steps"].items():
        pre_m, pre_v = f"adam/{net}/m/", f"adam/{net}/v/"
        adam[net] = AdamState({k[len(pre_m):]: v for k, v in tensors.items() if k.startswith(pre_m)},
                              {k[len(pre_v):]: v for k, v in tensors.items() if k.startswith(pre_v)},
                              int(step))
    return Checkpoint(params, adam, meta["config"], meta["rng_state"], meta["sampler_state"],
                      int(meta["iteration"]))


def _expected_shapes(config: dict) -> dict[str, tuple[int, ...]]:
    try:
        cfg = TrainingConfig.from_dict(config)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint config unreadable: {e}") from e
    return {k: p.shape for k, p in build_nets(cfg).named_parameters().items()}


def restore_nets(ckpt: Checkpoint) -> Nets:
    cfg = TrainingConfig.from_dict(ckpt.config)
    nets = build_nets(cfg)
    for k, p in nets.named_parameters().items():
        p.data = np.array(ckpt.params[k], dtype=np.float64)
    return nets


# ---------------------------------------------------------------- loop

class Trainer:
    """Owns the networks, optimiser states, RNG and sampling position."""

    def __init__(self, ds: OneShotDataset, cfg: TrainingConfig, ckpt: Checkpoint | None = None):
        self.ds = ds
        self.cfg = cfg
        ds.augmentation = cfg.augmentation
        if ckpt is None:
            self.nets = build_nets(cfg)
            self.opt = {n: AdamState() for n, _ in self.nets.items()}
            self.rng = np.random.default_rng([cfg.seed, 7])
            ds.set_sampler_state({"order": [], "cursor": 0})
            self.iteration = 0
        else:
            self.nets = restore_nets(ckpt)
            self.opt = {n: AdamState(dict(s.m), dict(s.v), s.step) for n, s in ckpt.adam.items()}
            self.rng = np.random.default_rng()
            self.rng.bit_generator.state = ckpt.rng_state
            ds.set_sampler_state(ckpt.sampler_state)
            self.iteration = ckpt.iteration

    def step(self) -> StepReport:
        src, tgt, _ = one_shot_batch(self.ds, self.cfg.batch_size, self.rng)
        rep = train_step(self.nets, (src, tgt), self.cfg, self.rng, self.opt)
        self.iteration += 1
        return rep

    def checkpoint(self) -> Checkpoint:
        return make_checkpoint(self.nets, self.opt, self.cfg, self.rng, self.ds, self.iteration)


def train_loop(ds: OneShotDataset, cfg: TrainingConfig, out_dir=None, resume: Checkpoint | None = None,
               progress_every: int = 0) -> tuple[Checkpoint, list[dict]]:
    """Run until ``cfg.iterations``; returns the final checkpoint and telemetry rows.

    With ``out_dir`` set, ``telemetry.csv`` and ``checkpoint.maos`` are
    written there (and ``checkpoint_<it>.maos`` every ``checkpoint_every``).
    """
    cfg.validate()
    trainer = Trainer(ds, cfg, resume)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    cols = telemetry_columns(cfg)
    t0 = time.perf_counter()
    while trainer.iteration < cfg.iterations:
        rep = trainer.step()
        rows.append(telemetry_row(trainer.iteration, rep, time.perf_counter() - t0))
        if progress_every and trainer.iteration % progress_every == 0:
            log.info("iter %d  %s", trainer.iteration,
                     "  ".join(f"{k}={v:.4f}" for k, v in rep.losses.items()))
        if out is not None and cfg.checkpoint_every and trainer.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(trainer.checkpoint(), out / f"checkpoint_{trainer.iteration:06d}.maos")
    ckpt = trainer.checkpoint()
    if out is not None:
        write_telemetry(rows, out / "telemetry.csv", cols)
        save_checkpoint(ckpt, out / "checkpoint.maos")
    return ckpt, rows


def translate(gen: GeneratorNet, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Apply a generator without recording gradients."""
    outs = []
    with T.no_grad():
        for i in range(0, len(images), chunk):
            outs.append(gen(Tensor(images[i:i + chunk])).data)
    return np.concatenate(outs) if outs else np.zeros((0,) + tuple(images.shape[1:]))
