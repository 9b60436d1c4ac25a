import copy
import math

import numpy as np
import pytest

from maos import tensor as T
from maos import trainer as tr
from maos.data import synth_corpus
from maos.tensor import Tensor
from maos.trainer import (AdamState, CheckpointError, NonFiniteLossError, Trainer, TrainingConfig, adam_step,
                          build_nets, deterministic_view, load_checkpoint, read_telemetry, save_checkpoint,
                          telemetry_columns, train_loop, train_step)

TINY = dict(gen_width=4, gen_res_blocks=1, disc_width=8, batch_size=2, augment_rotate=False)


def tiny(**kw):
    return TrainingConfig(**{**TINY, **kw})


def fresh_opt(nets):
    return {n: AdamState() for n, _ in nets.items()}


def sample_batch(seed=0, n=2):
    ds, _ = synth_corpus(8, 32, seed)
    from maos.data import one_shot_batch
    src, tgt, _ = one_shot_batch(ds, n, np.random.default_rng(seed))
    return src, tgt


def snapshot(net):
    return {k: p.data.copy() for k, p in net.params.items()}


# ---------------------------------------------------------------- Adam

def reference_adam(theta, grads, lr, b1, b2, eps):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_zero_grad_no_change():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    st = AdamState()
    adam_step(p, st, 2e-4, grads={"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert np.all(st.m["w"] == 0) and np.all(st.v["w"] == 0) and st.step == 1


def test_adam_first_step_is_sign():
    g = np.array([3.0, -1e-3, 0.25])
    p = {"w": Tensor(np.zeros(3))}
    adam_step(p, AdamState(), 2e-4, grads={"w": g})
    np.testing.assert_allclose(p["w"].data, -2e-4 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(p["w"].data, -2e-4 * np.sign(g), rtol=1e-4)


def test_adam_two_steps_differ_from_double_lr():
    g = {"w": np.array([0.5, -2.0])}
    a, b = {"w": Tensor(np.zeros(2))}, {"w": Tensor(np.zeros(2))}
    sa = AdamState()
    adam_step(a, sa, 1e-3, grads=g)
    adam_step(a, sa, 1e-3, grads=g)
    adam_step(b, AdamState(), 2e-3, grads=g)
    assert not np.array_equal(a["w"].data, b["w"].data)


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(6)]
    p = {"w": Tensor(theta.copy())}
    st = AdamState()
    for g in grads:
        adam_step(p, st, 1e-2, 0.5, 0.999, 1e-8, grads={"w": g})
    np.testing.assert_allclose(p["w"].data, reference_adam(theta, grads, 1e-2, 0.5, 0.999, 1e-8), rtol=1e-13)
    assert st.m["w"].shape == theta.shape and st.step == 6


def test_adam_shape_mismatch():
    with pytest.raises(T.ShapeError):
        adam_step({"w": Tensor(np.zeros(2))}, AdamState(), 1e-3, grads={"w": np.zeros(3)})


# ---------------------------------------------------------------- config

def test_config_lists_all_problems():
    cfg = TrainingConfig(alpha=1.5, lr=0.0, part_size=64, n_threads=3)
    probs = cfg.problems()
    for name in ("alpha", "lr", "part_size", "disc_width"):
        assert any(p.startswith(name) for p in probs), name
    with pytest.raises(ValueError, match="alpha"):
        cfg.validate()


def test_config_round_trip_and_unknown_keys():
    cfg = TrainingConfig(alpha=0.3)
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="bogus"):
        TrainingConfig.from_dict({"bogus": 1})


def test_default_config_values():
    cfg = TrainingConfig()
    assert (cfg.alpha, cfg.n_threads, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.cycle_weight) == \
        (0.1, 4, 2e-4, 0.5, 0.999, 10.0)
    assert cfg.part_size == cfg.image_size // 2
    assert cfg.problems() == []


# ---------------------------------------------------------------- one step

def test_step_report_contract():
    cfg = tiny()
    nets = build_nets(cfg)
    rep = train_step(nets, sample_batch(), cfg, np.random.default_rng(0), fresh_opt(nets))
    for key in ("global", "part", "source"):
        assert len(rep.per_thread_d_losses[key]) == cfg.n_threads
    for k in ("d_global", "d_part", "d_source", "g_global", "g_part", "g_source", "cycle_x", "cycle_y", "total_g"):
        assert math.isfinite(rep.losses[k])
    assert set(rep.grad_norms) == {"D_g", "D_p", "D_X", "F", "G"}


def test_alpha_zero_gives_zero_target_gradient():
    cfg = tiny(alpha=0.0)
    nets = build_nets(cfg)
    rep = train_step(nets, sample_batch(), cfg, np.random.default_rng(0), fresh_opt(nets))
    assert rep.grad_norms["D_g"] < 1e-12 and rep.grad_norms["D_p"] < 1e-12
    assert rep.grad_norms["D_X"] > 0


def test_alpha_linearity_at_step_one():
    batch = sample_batch(3)
    grads, deltas = {}, {}
    for alpha in (0.1, 1.0):
        cfg = tiny(alpha=alpha)
        nets = build_nets(cfg)
        before = {n: snapshot(getattr(nets, n)) for n in ("D_g", "D_p")}
        train_step(nets, batch, cfg, np.random.default_rng(0), fresh_opt(nets))
        grads[alpha] = np.concatenate([p.grad.ravel() for n in ("D_g", "D_p")
                                       for p in getattr(nets, n).params.values()])
        deltas[alpha] = np.concatenate([(p.data - before[n][k]).ravel() for n in ("D_g", "D_p")
                                        for k, p in getattr(nets, n).params.items()])
    assert abs(np.linalg.norm(grads[0.1]) / np.linalg.norm(grads[1.0]) - 0.1) < 1e-9
    big = np.abs(grads[1.0]) > 1e-6
    np.testing.assert_array_equal(np.sign(deltas[0.1][big]), np.sign(deltas[1.0][big]))


def test_thread_loss_zeroing_isolated():
    batch = sample_batch(1)
    cfg = tiny()
    base = build_nets(cfg)
    start = {n: snapshot(net) for n, net in base.discriminators.items()}

    def run(mask):
        nets = copy.deepcopy(base)
        train_step(nets, batch, cfg, np.random.default_rng(4), fresh_opt(nets), thread_loss_mask=mask)
        return nets

    plain = run(None)
    for j in range(cfg.n_threads):
        weights = [1.0] * cfg.n_threads
        weights[j] = 0.0
        masked = run({"global": weights, "part": weights, "source": weights})
        for name, d in plain.discriminators.items():
            dm = masked.discriminators[name]
            for key, p in d.params.items():
                for i in range(cfg.n_threads):
                    rows = d.thread_slice(key, i)
                    delta_plain = p.data[rows] - start[name][key][rows]
                    delta_masked = dm.params[key].data[rows] - start[name][key][rows]
                    if i == j:
                        assert np.all(delta_masked == 0.0)
                    else:
                        assert delta_plain.tobytes() == delta_masked.tobytes(), (name, key, i, j)


def test_generator_and_discriminator_phases_do_not_cross(monkeypatch):
    cfg = tiny()
    nets = build_nets(cfg)
    g_start = {n: snapshot(getattr(nets, n)) for n in ("F", "G")}
    seen = {}
    real_adam = tr.adam_step

    def spy(params, state, *a, **kw):
        if params is nets.F.params and "d_at_g" not in seen:
            seen["d_at_g"] = {n: snapshot(d) for n, d in nets.discriminators.items()}
        if params is nets.D_g.params:
            seen["g_at_d"] = {n: snapshot(getattr(nets, n)) for n in ("F", "G")}
        return real_adam(params, state, *a, **kw)

    monkeypatch.setattr(tr, "adam_step", spy)
    train_step(nets, sample_batch(), cfg, np.random.default_rng(0), fresh_opt(nets))
    for n in ("F", "G"):
        for k, v in g_start[n].items():
            assert v.tobytes() == seen["g_at_d"][n][k].tobytes()
    for n, d in nets.discriminators.items():
        for k, p in d.params.items():
            assert p.data.tobytes() == seen["d_at_g"][n][k].tobytes()
        assert all(p.requires_grad for p in d.parameters())


def test_non_finite_loss_names_term():
    cfg = tiny()
    nets = build_nets(cfg)
    nets.D_g.params["head.b"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError, match="d_global"):
        train_step(nets, sample_batch(), cfg, np.random.default_rng(0), fresh_opt(nets))


# ---------------------------------------------------------------- reference baseline

def _ref_log_sigmoid(z):
    return T.log(T.clamp_min(T.sigmoid(z), 1e-12))


def _ref_d_loss(d, real, fake):
    r, f = d(real)[0], d(fake)[0]
    return T.neg(T.add(T.mean(_ref_log_sigmoid(r)), T.mean(_ref_log_sigmoid(T.neg(f)))))


def _ref_g_loss(d, fake):
    return T.neg(T.mean(_ref_log_sigmoid(d(fake)[0])))


def _ref_adam(params, st, cfg):
    st["t"] += 1
    t = st["t"]
    for k, p in params.items():
        g = p.grad
        m = st.setdefault("m", {}).get(k, np.zeros(p.shape)) * cfg.adam_beta1 + (1 - cfg.adam_beta1) * g
        v = st.setdefault("v", {}).get(k, np.zeros(p.shape)) * cfg.adam_beta2 + (1 - cfg.adam_beta2) * g * g
        st["m"][k], st["v"][k] = m, v
        p.data = p.data - cfg.lr * (m / (1 - cfg.adam_beta1 ** t)) / (np.sqrt(v / (1 - cfg.adam_beta2 ** t))
                                                                       + cfg.adam_eps)


def reference_step(nets, batch, cfg):
    """Textbook two-discriminator-per-target CycleGAN step, written without the losses module."""
    x, y = Tensor(batch[0]), Tensor(batch[1])
    for d in (nets.D_g, nets.D_p, nets.D_X):
        T.zero_grad(d.parameters())
    with T.no_grad():
        fy, fx = nets.F(x), nets.G(y)
    with T.Tape() as tape:
        loss = T.add(T.add(_ref_d_loss(nets.D_g, y, fy), _ref_d_loss(nets.D_p, y, fy)),
                     _ref_d_loss(nets.D_X, x, fx))
    T.backward(loss, tape)
    for name in ("D_g", "D_p", "D_X"):
        _ref_adam(getattr(nets, name).params, {"t": 0}, cfg)
    for d in (nets.D_g, nets.D_p, nets.D_X):
        for p in d.parameters():
            p.requires_grad = False
    T.zero_grad(nets.F.parameters() + nets.G.parameters())
    with T.Tape() as tape:
        fake_y = nets.F(x)
        fake_x = nets.G(y)
        adv = T.add(T.add(_ref_g_loss(nets.D_g, fake_y), _ref_g_loss(nets.D_p, fake_y)),
                    _ref_g_loss(nets.D_X, fake_x))
        cyc = T.add(T.mean(T.absolute(T.sub(nets.G(fake_y), x))), T.mean(T.absolute(T.sub(nets.F(fake_x), y))))
        loss = T.add(adv, T.scale(cyc, cfg.cycle_weight))
    T.backward(loss, tape)
    for d in (nets.D_g, nets.D_p, nets.D_X):
        for p in d.parameters():
            p.requires_grad = True
    for name in ("F", "G"):
        _ref_adam(getattr(nets, name).params, {"t": 0}, cfg)


def test_single_thread_full_crop_alpha_one_matches_reference():
    cfg = tiny(n_threads=1, part_size=32, alpha=1.0, part_depth=3)
    batch = sample_batch(2)
    a = build_nets(cfg)
    b = copy.deepcopy(a)
    train_step(a, batch, cfg, np.random.default_rng(0), fresh_opt(a))
    reference_step(b, batch, cfg)
    # biases feeding instance norm have zero true gradient, so Adam turns summation-order
    # roundoff into ~1e-11 steps; real updates are ~lr = 2e-4
    for (name, net), (_, ref) in zip(a.items(), b.items()):
        for k, p in net.params.items():
            np.testing.assert_allclose(p.data, ref.params[k].data, rtol=0, atol=1e-9, err_msg=f"{name}/{k}")


# ---------------------------------------------------------------- loop, telemetry, checkpoints

def test_zero_iterations():
    ds, _ = synth_corpus(8, 32, 0)
    ckpt, rows = train_loop(ds, tiny(iterations=0))
    assert rows == [] and ckpt.iteration == 0
    assert set(ckpt.params) == set(build_nets(tiny()).named_parameters())


def test_loop_deterministic(tmp_path):
    outs = []
    for run in range(2):
        ds, _ = synth_corpus(8, 32, 5)
        train_loop(ds, tiny(iterations=50, seed=5), out_dir=tmp_path / str(run))
        outs.append(read_telemetry(tmp_path / str(run) / "telemetry.csv"))
    assert len(outs[0]) == 50
    assert deterministic_view(outs[0]) == deterministic_view(outs[1])
    header = (tmp_path / "0" / "telemetry.csv").read_text().splitlines()[0].split(",")
    assert header == telemetry_columns(tiny())


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    cfg = tiny(iterations=15, seed=2)
    ds, _ = synth_corpus(8, 32, 2)
    _, full = train_loop(ds, cfg)
    ds, _ = synth_corpus(8, 32, 2)
    ck5, _ = train_loop(ds, tiny(iterations=5, seed=2))
    save_checkpoint(ck5, tmp_path / "c.maos")
    resumed = load_checkpoint(tmp_path / "c.maos")
    ds, _ = synth_corpus(8, 32, 2)
    _, rest = train_loop(ds, cfg, resume=resumed)
    assert [r["iteration"] for r in rest] == list(range(6, 16))
    assert deterministic_view(rest) == deterministic_view(full[5:])


def test_checkpoint_save_load_save_identical(tmp_path):
    ds, _ = synth_corpus(8, 32, 0)
    ck, _ = train_loop(ds, tiny(iterations=2))
    save_checkpoint(ck, tmp_path / "a.maos")
    save_checkpoint(load_checkpoint(tmp_path / "a.maos"), tmp_path / "b.maos")
    assert (tmp_path / "a.maos").read_bytes() == (tmp_path / "b.maos").read_bytes()


def test_checkpoint_float32_payload(tmp_path):
    ds, _ = synth_corpus(8, 32, 0)
    ck, _ = train_loop(ds, tiny(iterations=1))
    save_checkpoint(ck, tmp_path / "a.maos", dtype="float32")
    back = load_checkpoint(tmp_path / "a.maos")
    for k, v in ck.params.items():
        np.testing.assert_array_equal(back.params[k], v.astype(np.float32).astype(np.float64))


def test_checkpoint_errors(tmp_path):
    ds, _ = synth_corpus(8, 32, 0)
    ck, _ = train_loop(ds, tiny(iterations=0))
    path = tmp_path / "a.maos"
    save_checkpoint(ck, path)
    raw = path.read_bytes()

    (tmp_path / "magic.maos").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.maos")

    (tmp_path / "ver.maos").write_bytes(raw[:4] + (99).to_bytes(2, "little") + raw[6:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.maos")

    (tmp_path / "cut.maos").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.maos")

    broken = copy.deepcopy(ck)
    del broken.params["F/stem.w"]
    save_checkpoint(broken, tmp_path / "missing.maos")
    with pytest.raises(CheckpointError, match="F/stem.w"):
        load_checkpoint(tmp_path / "missing.maos")


def test_checkpoint_every_and_write_error(tmp_path):
    ds, _ = synth_corpus(8, 32, 0)
    train_loop(ds, tiny(iterations=4, checkpoint_every=2), out_dir=tmp_path / "run")
    assert (tmp_path / "run" / "checkpoint_000002.maos").exists()
    assert (tmp_path / "run" / "checkpoint_000004.maos").exists()
    ck, _ = train_loop(ds, tiny(iterations=0))
    with pytest.raises(OSError, match="no_such_dir"):
        save_checkpoint(ck, tmp_path / "no_such_dir" / "x.maos")


def test_trainer_resume_restores_state():
    ds, _ = synth_corpus(8, 32, 0)
    t = Trainer(ds, tiny())
    t.step()
    ck = t.checkpoint()
    t2 = Trainer(ds, tiny(), ck)
    assert t2.iteration == 1 and t2.opt["F"].step == 1
    assert t2.rng.bit_generator.state == t.rng.bit_generator.state
