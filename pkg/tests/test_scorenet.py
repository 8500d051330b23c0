import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from scorebreak.nets import count_parameters
from scorebreak.schedule import NoiseSchedule, build_schedule
from scorebreak.scorenet import (ScoreNetCheckpoint, ScoreTrainer, TrainingConfig, as_oracle,
                                 build_network, gaussian_toy_set, load_container,
                                 training_target_residual)

from toyruns import SEEDS, fidelity_run

SCHED = build_schedule()
TINY = TrainingConfig(image_size=(8, 8), widths=(8, 8, 8), time_dim=16, batch_size=4, learning_rate=1e-3)


def _batch(n=4, size=8, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(-1, 1, (n, size, size, 3))
    masks = np.where(rng.random((n, size, size, 1)) < 0.5, -0.5, 0.5)
    return images, masks


def test_residual_exact_score_vanishes():
    z = np.random.default_rng(0).standard_normal((2, 4, 4, 3))
    t = 321
    s = -z / np.sqrt(1 - SCHED.alpha_bar(t))
    assert training_target_residual(s, z, t, SCHED) == pytest.approx(0.0, abs=1e-24)


def test_residual_zero_score():
    z = np.random.default_rng(1).standard_normal((3, 5))
    assert training_target_residual(np.zeros_like(z), z, 10, SCHED) == pytest.approx(np.mean(z ** 2), rel=1e-15)


def test_residual_elementwise_at_half():
    half = NoiseSchedule(np.array([0.5]))
    rng = np.random.default_rng(2)
    s, z = rng.normal(size=(2, 3, 4))
    total = 0.0
    for idx in np.ndindex(s.shape):
        total += (0.5 ** 0.5 * s[idx] + z[idx]) ** 2
    assert abs(training_target_residual(s, z, 1, half) - total / s.size) <= 1e-10


def test_residual_torch_matches_numpy_and_per_row_t():
    rng = np.random.default_rng(3)
    s, z = rng.normal(size=(2, 3, 2, 2, 2))
    t = np.array([5, 700, 42])
    want = np.mean([(np.sqrt(1 - SCHED.alpha_bar(int(t[i]))) * s[i] + z[i]) ** 2 for i in range(3)])
    assert training_target_residual(s, z, t, SCHED) == pytest.approx(want, rel=1e-12)
    got = training_target_residual(torch.as_tensor(s), torch.as_tensor(z), t, SCHED)
    assert float(got) == pytest.approx(want, rel=1e-12)


def test_residual_errors():
    with pytest.raises(ValueError):
        training_target_residual(np.zeros((2, 2)), np.zeros((2, 3)), 1, SCHED)
    with pytest.raises(ValueError):
        training_target_residual(np.zeros(2), np.zeros(2), 0, SCHED)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 1000))
def test_residual_non_negative(seed, t):
    rng = np.random.default_rng(seed)
    s, z = rng.normal(size=(2, 6)) * rng.uniform(0.01, 100)
    assert training_target_residual(s, z, t, SCHED) >= 0


def _captured_conditions(cfg, batch):
    trainer = ScoreTrainer(cfg, SCHED)
    seen = []
    trainer.net.register_forward_hook(lambda mod, args, out: seen.append(args[0][:, 3:].detach().clone()))
    trainer.train_step(batch, np.random.default_rng(0))
    return trainer, seen[0]


def test_forced_unconditional_branch():
    images, masks = _batch()
    cfg = TrainingConfig.from_dict({**TINY.to_dict(), "uncond_probability": 1.0})
    trainer, cond = _captured_conditions(cfg, (images, masks))
    assert trainer.last_unconditional.all()
    assert torch.all(cond == -1.0)


def test_forced_conditional_branch():
    images, masks = _batch()
    cfg = TrainingConfig.from_dict({**TINY.to_dict(), "uncond_probability": 0.0})
    trainer, cond = _captured_conditions(cfg, (images, masks))
    assert not trainer.last_unconditional.any()
    assert np.allclose(cond.permute(0, 2, 3, 1).numpy(), masks)


def test_unconditional_frequency_is_binomial():
    cfg = TrainingConfig.from_dict({**TINY.to_dict(), "uncond_probability": 0.1})
    trainer = ScoreTrainer(cfg, SCHED)
    rng = np.random.default_rng(4)
    images, masks = _batch(n=2500, seed=4)
    hits = 0
    for _ in range(4):
        trainer.train_step((images, masks), rng)
        hits += int(trainer.last_unconditional.sum())
    n, p = 10_000, 0.1
    assert abs(hits - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_rejects_unnormalized_masks_and_empty_batch():
    trainer = ScoreTrainer(TINY, SCHED)
    images, _ = _batch()
    with pytest.raises(ValueError):
        trainer.train_step((images, np.ones((4, 8, 8, 1))), np.random.default_rng(0))
    with pytest.raises(ValueError):
        trainer.train_step((images[:0], np.zeros((0, 8, 8, 1))), np.random.default_rng(0))
    with pytest.raises(ValueError):
        ScoreTrainer(TINY, build_schedule(10))


def test_training_is_deterministic():
    images, masks = _batch(n=16, seed=5)
    a = ScoreTrainer(TINY, SCHED).fit(images, masks, steps=5, rng=9)
    b = ScoreTrainer(TINY, SCHED).fit(images, masks, steps=5, rng=9)
    assert list(a.recent) == list(b.recent)
    for k, v in a.net.state_dict().items():
        assert torch.equal(v, b.net.state_dict()[k])


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    images, masks = _batch(n=8, seed=6)
    trainer = ScoreTrainer(TINY, SCHED).fit(images, masks, steps=3, rng=0)
    path = trainer.checkpoint().save(tmp_path / "net.pt")
    ckpt = ScoreNetCheckpoint.load(path)
    assert ckpt.config == TINY and ckpt.step == 3
    x = images[:2]
    before = as_oracle(trainer.checkpoint()).score(x, masks[:2], 17)
    after = as_oracle(ckpt).score(x, masks[:2], 17)
    assert np.array_equal(before, after)
    with pytest.raises(ValueError):
        load_container(path, "victim")
    torch.save({"format": "something-else"}, tmp_path / "junk.pt")
    with pytest.raises(ValueError):
        ScoreNetCheckpoint.load(tmp_path / "junk.pt")


def test_periodic_checkpointing(tmp_path):
    images, masks = _batch(n=8, seed=7)
    ScoreTrainer(TINY, SCHED).fit(images, masks, steps=4, rng=0,
                                  checkpoint_path=tmp_path / "c.pt", checkpoint_every=2)
    assert ScoreNetCheckpoint.load(tmp_path / "c.pt").step == 4


def test_oracle_contract():
    oracle = as_oracle(ScoreTrainer(TINY, SCHED).checkpoint())
    images, masks = _batch(n=3, seed=8)
    out = oracle.score(images, masks, 500)
    assert out.shape == images.shape and np.all(np.isfinite(out))
    assert np.array_equal(out, oracle.score(images, masks, 500))
    single = oracle.score(images[0], masks[0], 500)
    assert np.allclose(single, out[0], atol=1e-5)
    cond, uncond = oracle.score_pair(images, masks, 500)
    assert np.allclose(cond, out, atol=1e-5)
    assert np.allclose(uncond, oracle.score(images, np.full_like(masks, -1.0), 500), atol=1e-5)
    with pytest.raises(ValueError):
        oracle.score(np.zeros((1, 16, 16, 3)), np.zeros((1, 16, 16, 1)), 10)
    with pytest.raises(ValueError):
        oracle.score(images, np.zeros((3, 8, 8, 2)), 10)


def test_default_network_size():
    assert count_parameters(build_network(TrainingConfig())) <= 2_000_000


def test_toy_set_matches_its_spec():
    spec, images, masks = gaussian_toy_set(200, size=8, rng=0)
    assert images.shape == (200, 8, 8, 3) and np.all(masks == -0.5)
    assert np.abs(images.mean(0) - spec.means[0]).max() < 5 * np.sqrt(0.05 / 200)


@pytest.mark.slow
def test_loss_trend_over_seeds():
    runs = [fidelity_run(s) for s in SEEDS]
    assert np.median([r["late_loss"] - r["early_loss"] for r in runs]) < 0
