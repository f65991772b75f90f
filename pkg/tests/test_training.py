import copy

import pytest
import torch

from secgan.config import ExperimentConfig, load_config
from secgan.domain import ContractError, to_one_hot
from secgan.losses import TrainingDivergence, adv_loss_d, gradient_penalty, sc_loss_rgb
from secgan.parsing import parse
from secgan.training import (Branch, _seed, init_state, latest_checkpoint, load_checkpoint, lr_schedule,
                             next_batch, parameter_digest, read_log, run_training, train_step_d, train_step_g)

TINY = dict(g_conv_dim=4, g_n_res=1, d_conv_dim=4, batch_size=4, checkpoint_every=1000, log_every=1)


@pytest.fixture
def cfg(toy_config):
    return toy_config.replace(iterations=100, **TINY)


def _digests(state):
    out = {"G_rgb": parameter_digest(state.rgb.G), "D_rgb": parameter_digest(state.rgb.D)}
    if state.seg is not None:
        out.update(G_seg=parameter_digest(state.seg.G), D_seg=parameter_digest(state.seg.D))
    return out


# ---------------------------------------------------------------- learning-rate schedule

def test_linear_schedule_anchors():
    c = ExperimentConfig(iterations=200_000, lr_g=1e-4, lr_d=1e-4, lr_schedule="linear")
    assert lr_schedule(c, 0) == (1e-4, 1e-4)
    assert lr_schedule(c, 100_000) == (1e-4, 1e-4)
    assert lr_schedule(c, 150_000)[0] == pytest.approx(5e-5, rel=1e-12)
    assert lr_schedule(c, 200_000) == (0.0, 0.0)


def test_exponential_schedule():
    c = ExperimentConfig(iterations=1000, lr_g=2e-4, lr_d=2e-4, lr_schedule="exponential", lr_floor=2e-6)
    assert lr_schedule(c, 500) == (2e-4, 2e-4)
    assert lr_schedule(c, 1000)[0] == pytest.approx(2e-6, rel=1e-9)
    rates = [lr_schedule(c, t)[0] for t in range(500, 1001, 50)]
    ratios = [b / a for a, b in zip(rates, rates[1:])]
    assert all(r == pytest.approx(ratios[0], rel=1e-9) for r in ratios)


def test_schedule_range_error():
    c = ExperimentConfig(iterations=10)
    with pytest.raises(ContractError):
        lr_schedule(c, 11)
    with pytest.raises(ContractError):
        lr_schedule(c, -1)


# ---------------------------------------------------------------- step semantics

def test_update_counts(cfg, small_ds, tiny_parser):
    state = run_training(cfg, small_ds, tiny_parser)
    for branch in (state.rgb, state.seg):
        assert branch.d_updates == 100 and branch.g_updates == 20
    assert state.step == 100


def test_zero_iterations(cfg, small_ds, tiny_parser):
    state = run_training(cfg.replace(iterations=0), small_ds, tiny_parser)
    assert state.step == 0 and state.rgb.d_updates == 0 and state.rgb.g_updates == 0


def test_d_step_isolation(cfg, small_ds, tiny_parser):
    state = init_state(cfg, small_ds, tiny_parser)
    before = _digests(state)
    p_before = parameter_digest(tiny_parser)
    train_step_d(state, next_batch(state))
    after = _digests(state)
    assert after["G_rgb"] == before["G_rgb"] and after["G_seg"] == before["G_seg"]
    assert after["D_rgb"] != before["D_rgb"] and after["D_seg"] != before["D_seg"]
    assert parameter_digest(tiny_parser) == p_before


def test_g_step_isolation_and_same_batch(cfg, small_ds, tiny_parser):
    state = init_state(cfg, small_ds, tiny_parser)
    for _ in range(cfg.n_critic):
        batch = next_batch(state)
        rec_d = train_step_d(state, batch)
    before = _digests(state)
    rec_g = train_step_g(state, batch)
    after = _digests(state)
    assert rec_g["batch"] == rec_d["batch"]
    assert after["D_rgb"] == before["D_rgb"] and after["D_seg"] == before["D_seg"]
    assert after["G_rgb"] != before["G_rgb"] and after["G_seg"] != before["G_seg"]


def test_g_step_only_on_multiples_of_n(cfg, small_ds, tiny_parser):
    state = init_state(cfg, small_ds, tiny_parser)
    batch = next_batch(state)
    train_step_d(state, batch)
    with pytest.raises(ContractError):
        train_step_g(state, batch)


def test_zero_cls_weight_gives_pure_adversarial_critic_step(cfg, small_ds, tiny_parser):
    c = cfg.replace(lambda_cls=0.0, variant="baseline")
    state = init_state(c, small_ds, None)
    twin = copy.deepcopy(state.rgb)
    batch = next_batch(state)
    train_step_d(state, batch)

    with torch.no_grad():
        fake = twin.G(batch.x, batch.y_diff)
    out_real, out_fake = twin.D(batch.x), twin.D(fake)
    gp = gradient_penalty(twin.D, batch.x, fake, generator=twin.rng)
    loss = adv_loss_d(out_real.adv, out_fake.adv, gp, c.lambda_gp)
    twin.opt_d.zero_grad()
    loss.backward()
    twin.opt_d.step()
    assert parameter_digest(twin.D) == parameter_digest(state.rgb.D)


def test_cross_branch_gradient_is_zero(cfg, small_ds, tiny_parser):
    state = init_state(cfg, small_ds, tiny_parser)
    batch = next_batch(state)
    x_out = state.rgb.G(batch.x, batch.y_diff)
    s_out = state.seg.G(batch.s_in, batch.y_diff)
    loss = sc_loss_rgb(to_one_hot(s_out), parse(state.parser, x_out))
    grads = torch.autograd.grad(loss, list(state.seg.G.parameters()) + list(state.rgb.G.parameters()),
                                allow_unused=True)
    n_seg = len(list(state.seg.G.parameters()))
    assert all(g is None or not g.any() for g in grads[:n_seg])
    assert any(g is not None and g.any() for g in grads[n_seg:])


def _drive_independent(c, dataset, parser, steps):
    """Two standalone branches fed the batches a coupled run would see, with no coupling at all."""
    feeder = init_state(c, dataset, parser)
    rgb, seg = Branch("rgb", c, _seed(c.seed, 10)), Branch("seg", c, _seed(c.seed, 20))
    for t in range(1, steps + 1):
        lr = lr_schedule(c, t)
        rgb.set_lr(*lr)
        seg.set_lr(*lr)
        b = next_batch(feeder)
        rgb.discriminator_step(b.x, b.x, b.y_src, b.y_diff)
        seg.discriminator_step(b.s_in, b.s_in, b.y_src, b.y_diff)
        if t % c.n_critic == 0:
            _, parts = rgb.generator_losses(b.x, b.x, b.y_trg, b.y_diff)
            rgb.generator_step(parts)
            _, parts = seg.generator_losses(b.s_in, b.s_in, b.y_trg, b.y_diff)
            seg.generator_step(parts)
    return rgb, seg


def test_lambda_sc_zero_is_bit_equivalent_to_independent_branches(cfg, small_ds, tiny_parser):
    c = cfg.replace(lambda_sc=0.0, iterations=20)
    coupled = run_training(c, small_ds, tiny_parser)
    rgb, seg = _drive_independent(c, small_ds, tiny_parser, 20)
    for a, b in ((coupled.rgb, rgb), (coupled.seg, seg)):
        assert parameter_digest(a.G) == parameter_digest(b.G)
        assert parameter_digest(a.D) == parameter_digest(b.D)
    baseline = run_training(c.replace(variant="baseline"), small_ds, None)
    assert parameter_digest(baseline.rgb.G) == parameter_digest(coupled.rgb.G)


def test_nonzero_lambda_sc_couples_branches(cfg, small_ds, tiny_parser):
    a = run_training(cfg.replace(iterations=10, lambda_sc=0.0), small_ds, tiny_parser)
    b = run_training(cfg.replace(iterations=10, lambda_sc=1.0), small_ds, tiny_parser)
    assert parameter_digest(a.rgb.G) != parameter_digest(b.rgb.G)


def test_parser_frozen_across_run(cfg, small_ds, tiny_parser):
    before = parameter_digest(tiny_parser)
    run_training(cfg.replace(iterations=10), small_ds, tiny_parser)
    assert parameter_digest(tiny_parser) == before


# ---------------------------------------------------------------- determinism, logs, resume

def test_determinism(cfg, small_ds, tiny_parser, tmp_path):
    c = cfg.replace(iterations=15)
    a = run_training(c.replace(run_dir=str(tmp_path / "a")), small_ds, tiny_parser)
    b = run_training(c.replace(run_dir=str(tmp_path / "b")), small_ds, tiny_parser)
    assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()
    assert _digests(a) == _digests(b)


def test_resume_matches_uninterrupted(cfg, small_ds, tiny_parser, tmp_path):
    c = cfg.replace(iterations=20, checkpoint_every=10)
    full = run_training(c.replace(run_dir=str(tmp_path / "full")), small_ds, tiny_parser)
    part_cfg = c.replace(run_dir=str(tmp_path / "part"))
    run_training(part_cfg, small_ds, tiny_parser, stop_at=10)
    assert latest_checkpoint(tmp_path / "part").name == "step_0000010.pt"
    resumed = run_training(part_cfg, small_ds, tiny_parser, resume=True)
    assert resumed.step == 20
    assert _digests(resumed) == _digests(full)
    assert (tmp_path / "part" / "log.csv").read_bytes() == (tmp_path / "full" / "log.csv").read_bytes()


def test_run_directory_layout(cfg, small_ds, tiny_parser, tmp_path):
    c = cfg.replace(iterations=10, checkpoint_every=5, sample_every=5, run_dir=str(tmp_path))
    run_training(c, small_ds, tiny_parser)
    for name in ("config.yaml", "log.csv", "G_rgb.pt", "G_seg.pt", "parser.pt",
                 "checkpoints/step_0000005.pt", "checkpoints/step_0000010.pt", "samples/step_0000010.png"):
        assert (tmp_path / name).exists(), name
    rows = read_log(tmp_path / "log.csv")
    assert [int(r["step"]) for r in rows] == list(range(1, 11))
    assert rows[4]["g_rgb/sc"] != "" and rows[3]["g_rgb/sc"] == ""
    assert load_config(tmp_path / "config.yaml") == c


def test_divergence_snapshot(cfg, small_ds, tiny_parser, tmp_path):
    state = init_state(cfg.replace(run_dir=str(tmp_path)), small_ds, tiny_parser)
    state.images[:] = float("nan")
    with pytest.raises(TrainingDivergence) as info:
        train_step_d(state, next_batch(state))
    assert info.value.step == 1
    assert info.value.snapshot and (tmp_path / "checkpoints" / "diverged_0000001.pt").exists()
    load_checkpoint(state, info.value.snapshot)


def test_variant_contracts(cfg, small_ds, tiny_parser):
    with pytest.raises(ContractError):
        init_state(cfg, small_ds, None)
    concat = init_state(cfg.replace(variant="concat"), small_ds, tiny_parser)
    assert concat.seg is None and concat.rgb.G.in_channels == 15
    train_step_d(concat, next_batch(concat))
    with pytest.raises(ContractError):
        init_state(cfg.replace(resolution=64), small_ds, tiny_parser)
