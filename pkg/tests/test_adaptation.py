import json
import math

import numpy as np
import pytest
import torch

from conftest import small_run_config
from triadapt import checkpoint as ckpt
from triadapt.adaptation import (NonFiniteLossError, adapt_g_step, adapt_p_step, adaptation_iteration,
                                 build_models, build_pseudo_batch, init_adaptation, load_source, load_state,
                                 parameter_hash, pretrain_source, run_adaptation, save_source, save_state,
                                 stream_torch, tensor_hash)
from triadapt.losses import pose_loss
from triadapt.synthetic import make_synthetic_domain, stack_samples


@pytest.fixture(scope="module")
def cfg():
    return small_run_config()


@pytest.fixture(scope="module")
def data(cfg):
    cam = cfg.camera_config()
    src = stack_samples(make_synthetic_domain("source", 16, 1, 16, cam))
    tgt = stack_samples(make_synthetic_domain("target", 16, 2, 16, cam))
    return {"source": src, "target": tgt}


@pytest.fixture(scope="module")
def source_ckpt(cfg, data, tmp_path_factory):
    path = tmp_path_factory.mktemp("src") / "source.ckpt"
    x, y, _ = data["source"]
    pretrain_source(cfg, x, y, path, n_iters=3, n_p_iters=3)
    return path


@pytest.fixture
def state(cfg, source_ckpt):
    return init_adaptation(cfg, load_source(source_ckpt))


def _real(data, n=4, kind="target"):
    return torch.as_tensor(data[kind][0][:n])


def test_zero_residual_identity_after_loading(state, source_ckpt, cfg):
    G_src, _, _ = build_models(cfg, with_deformation=False)
    ckpt.load_module("G", G_src, load_source(source_ckpt)["arrays"])
    assert state.G.deformation is not None
    z = torch.randn(3, cfg.model.z_dim)
    z_d = torch.randn(3, cfg.model.zd_dim)
    yaw, pitch = torch.tensor([0.1, -0.3, 0.4]), torch.tensor([0.0, 0.2, -0.1])
    a = state.G.generate(z, z_d, yaw, pitch, stream_torch(0, "stratification", 0))
    b = G_src.generate(z, None, yaw, pitch, stream_torch(0, "stratification", 0))
    assert torch.equal(a.image, b.image) and torch.equal(a.depth, b.depth)


def test_depth_loss_zero_at_step_zero_on_source_data(state, data):
    m = adapt_g_step(state, _real(data, kind="source"))
    assert m["L_d"] == 0.0


def test_pseudo_batch_matches_direct_generate(state):
    batch = build_pseudo_batch(state, 5)
    assert len(batch) == 5 and batch[0].image.shape == (3, 16, 16)
    out = state.G.generate(batch.latents.z, batch.latents.z_d, batch.poses[:, 0], batch.poses[:, 1],
                           stream_torch(state.seed, "stratification", state.iteration, 1))
    assert torch.equal(out.image, batch.images)
    again = build_pseudo_batch(state, 5)
    assert torch.equal(again.images, batch.images) and torch.equal(again.poses, batch.poses)
    assert not batch.images.requires_grad
    with pytest.raises(ValueError):
        build_pseudo_batch(state, 0)


def test_pseudo_pose_marginal_uniform(state):
    # oracle: chi-square goodness of fit against the uniform prior on a 10x10 grid
    from scipy.stats import chisquare
    batch = build_pseudo_batch(state, 10_000)
    prior = state.prior
    u = (batch.poses.double().numpy() - prior.low) / (prior.high - prior.low)
    assert np.all((u >= 0) & (u <= 1))
    counts, _, _ = np.histogram2d(u[:, 0], u[:, 1], bins=10, range=[[0, 1], [0, 1]])
    assert chisquare(counts.ravel()).pvalue > 0.01


def test_plain_adversarial_step_when_weights_zero(cfg, source_ckpt, data):
    cfg0 = cfg.with_overrides({"loss.alpha": 0.0, "loss.beta": 0.0, "loss.gamma": 0.0})
    st = init_adaptation(cfg0, load_source(source_ckpt))
    m = adapt_g_step(st, _real(data))
    assert m["L_g"] == 0.0 and m["total"] == m["L_a"]
    assert m["L_d"] is None and m["L_p"] is None


def test_freeze_d_hashes(state, data):
    frozen_before = tensor_hash(state.D.frozen_parameters())
    trainable_before = tensor_hash(state.D.trainable_parameters())
    for _ in range(3):
        adapt_g_step(state, _real(data))
    assert tensor_hash(state.D.frozen_parameters()) == frozen_before
    assert tensor_hash(state.D.trainable_parameters()) != trainable_before


def test_p_step_isolation_and_loss(cfg, source_ckpt):
    st = init_adaptation(cfg.with_overrides({"train.flip_p": 0.0}), load_source(source_ckpt))
    g_hash, d_hash = parameter_hash(st.G), parameter_hash(st.D)
    batch = build_pseudo_batch(st, cfg.train.batch_size)
    with torch.no_grad():
        expected = pose_loss(batch.poses, st.P(batch.images)).item()
    m = adapt_p_step(st)
    assert m["loss_P"] == expected
    assert parameter_hash(st.G) == g_hash and parameter_hash(st.D) == d_hash


def test_g_step_isolation(state, data):
    p_hash, photo_hash = parameter_hash(state.P), parameter_hash(state.G_photo)
    g_hash = parameter_hash(state.G)
    adapt_g_step(state, _real(data))
    assert parameter_hash(state.P) == p_hash
    assert parameter_hash(state.G_photo) == photo_hash == state.photo_hash
    assert parameter_hash(state.G) != g_hash
    assert all(p.requires_grad for p in state.P.parameters())


def test_loss_composition_every_step(state, data):
    x = torch.as_tensor(data["target"][0])
    w = state.weights
    for _ in range(4):
        r = adaptation_iteration(state, x)
        total = r["L_a"] + w.alpha * (r["L_d"] or 0.0) + w.beta * r["L_n"] + w.gamma * (r["L_p"] or 0.0)
        assert abs(r["total"] - total) <= 1e-6
        assert r["iteration"] == state.iteration - 1


def test_r1_lazy_cadence(state, data):
    x = torch.as_tensor(data["target"][0])
    seen = [adaptation_iteration(state, x)["R1"] is not None for _ in range(3)]
    assert seen == [True, False, False]


def test_non_finite_loss_aborts(state, data, tmp_path):
    with torch.no_grad():
        state.G.decoder.out.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        adapt_g_step(state, _real(data))
    assert "iteration" in info.value.snapshot


def test_run_determinism_and_resume(cfg, source_ckpt, data, tmp_path):
    x = data["target"][0]
    strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_time"} for r in recs]
    _, a = run_adaptation(cfg, source_ckpt, x, tmp_path / "a", n_iters=10)
    _, b = run_adaptation(cfg, source_ckpt, x, tmp_path / "b", n_iters=10)
    assert strip(a) == strip(b)
    resume = tmp_path / "a" / "checkpoint_000005.ckpt"
    assert resume.exists()
    _, c = run_adaptation(cfg, source_ckpt, x, tmp_path / "c", n_iters=10, resume=resume)
    assert [r["iteration"] for r in c] == list(range(5, 10))
    assert strip(c) == strip(a[5:])
    logged = [json.loads(line) for line in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert strip(logged) == strip(a)
    fin_a = load_state(tmp_path / "a" / "final.ckpt")
    fin_c = load_state(tmp_path / "c" / "final.ckpt")
    assert parameter_hash(fin_a.G, fin_a.D, fin_a.P) == parameter_hash(fin_c.G, fin_c.D, fin_c.P)


def test_resume_in_place_truncates_log(cfg, source_ckpt, data, tmp_path):
    x = data["target"][0]
    run_adaptation(cfg, source_ckpt, x, tmp_path, n_iters=7)
    _, recs = run_adaptation(cfg, source_ckpt, x, tmp_path, n_iters=7, resume=tmp_path / "checkpoint_000005.ckpt")
    lines = [json.loads(s) for s in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in lines] == list(range(7))


def test_run_errors(cfg, source_ckpt, tmp_path):
    with pytest.raises(FileNotFoundError):
        run_adaptation(cfg, tmp_path / "missing.ckpt", np.zeros((2, 3, 16, 16), np.float32), tmp_path, n_iters=1)
    with pytest.raises(ValueError, match="empty"):
        run_adaptation(cfg, source_ckpt, np.zeros((0, 3, 16, 16), np.float32), tmp_path, n_iters=1)


def test_state_round_trip(state, data, tmp_path):
    adaptation_iteration(state, torch.as_tensor(data["target"][0]))
    save_state(state, tmp_path / "s.ckpt")
    loaded = load_state(tmp_path / "s.ckpt")
    assert loaded.iteration == state.iteration and loaded.d_steps == state.d_steps
    assert parameter_hash(loaded.G, loaded.G_photo, loaded.D, loaded.P) == \
        parameter_hash(state.G, state.G_photo, state.D, state.P)
    save_state(loaded, tmp_path / "t.ckpt")
    assert (tmp_path / "s.ckpt").read_bytes() == (tmp_path / "t.ckpt").read_bytes()
    assert all(not p.requires_grad for p in loaded.D.frozen_parameters())


def test_source_checkpoint_round_trip(source_ckpt, tmp_path, cfg):
    arrays, header = ckpt.load(source_ckpt)
    G, D, P = build_models(cfg, with_deformation=False)
    for name, module in (("G", G), ("D", D), ("P", P)):
        ckpt.load_module(name, module, arrays)
    save_source(tmp_path / "again.ckpt", cfg, G, D, P)
    assert (tmp_path / "again.ckpt").read_bytes() == source_ckpt.read_bytes()
    with pytest.raises(ckpt.CheckpointError):
        load_state(source_ckpt)


def test_pretrain_is_deterministic(cfg, data, tmp_path):
    x, y, _ = data["source"]
    pretrain_source(cfg, x, y, tmp_path / "a.ckpt", n_iters=2, n_p_iters=2)
    pretrain_source(cfg, x, y, tmp_path / "b.ckpt", n_iters=2, n_p_iters=2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_non_finite_pseudo_batch_stops_before_p_update(state, data):
    with torch.no_grad():
        state.G.decoder.out.bias.fill_(float("nan"))
    p_hash = parameter_hash(state.P)
    with pytest.raises(NonFiniteLossError) as info:
        adaptation_iteration(state, torch.as_tensor(data["target"][0]))
    assert info.value.snapshot["stage"] == "P"
    assert parameter_hash(state.P) == p_hash
