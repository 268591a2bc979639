import json
import math

import numpy as np
import pytest
import torch

from cicam.cam_head import ClassScores
from cicam.checkpoint import load_checkpoint
from cicam.datagen import SceneSpec, generate_dataset
from cicam.model import build_model
from cicam.trainer import (
    NonFiniteLoss,
    TrainConfig,
    dual_loss,
    epoch_order,
    make_optimizer,
    stack_batch,
    train,
    train_step,
)

from .conftest import randomize_, tiny_config
from .oracles import central_difference


def scores(logits):
    logits = torch.as_tensor(logits, dtype=torch.float64)
    return ClassScores(logits, torch.softmax(logits, -1))


def tiny_train_config(**kw):
    base = dict(batch_size=4, epochs=3, num_classes=3, image_size=16, stage_channels=[4, 6],
                nonlocal_after_stage=[1], dtype="float64", learning_rate=0.005)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    spec = SceneSpec(image_size=16, num_classes=3, foreground_scale=(0.3, 0.5), seed=2)
    return generate_dataset(spec, 18, "train")


def test_dual_loss_uniform_is_two_log_n():
    loss = dual_loss(scores(torch.zeros(5)), scores(torch.zeros(5)), 3)
    assert math.isclose(loss.item(), 2 * math.log(5), rel_tol=1e-12)


def test_dual_loss_half_and_quarter():
    # S[y] = 1/2 and S_e[y] = 1/4 give ln 2 + 2 ln 2
    half = scores([0.0, math.log(0.5), math.log(0.5)])
    quarter = scores([math.log(0.25), math.log(0.75), -float("inf")])
    assert math.isclose(dual_loss(half, quarter, 0).item(), 3 * math.log(2), rel_tol=1e-12)


def test_dual_loss_confident_is_near_zero():
    s = scores([50.0, 0.0, 0.0])
    assert dual_loss(s, s, 0).item() < 1e-20


def test_dual_loss_batches_and_rejects_bad_labels():
    a, b = scores(torch.randn(4, 3, dtype=torch.float64)), scores(torch.randn(4, 3, dtype=torch.float64))
    labels = torch.tensor([0, 2, 1, 1])
    per = dual_loss(a, b, labels)
    for i in range(4):
        assert torch.allclose(per[i], dual_loss(scores(a.logits[i]), scores(b.logits[i]), int(labels[i])))
    with pytest.raises(ValueError):
        dual_loss(a, b, torch.tensor([0, 3, 1, 1]))


def test_zero_enhancer_loss_is_twice_branch_one():
    model = build_model(tiny_config(), seed=0)
    pool = model.new_pool()
    images = torch.rand(5, 3, 16, 16, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 0, 1])
    out = model(images, pool, update=True)
    ce1 = torch.nn.functional.cross_entropy(out.scores.logits, labels, reduction="none")
    assert torch.allclose(dual_loss(out.scores, out.scores_e, labels), 2 * ce1, atol=1e-12)


def test_branches_share_one_head():
    model = build_model(tiny_config(), seed=0)
    assert model.branch1 is model.branch2
    assert sum(1 for m in model.modules() if type(m).__name__ == "CamHead") == 1


def captured_contexts(model, pool, images):
    """Contexts each sample would see in a training forward, replayed on a copy of the pool."""
    replay = pool.copy()
    with torch.no_grad():
        out = model(images)
    ctx = []
    for b in range(images.shape[0]):
        replay.update_(out.maps[b], int(out.pi[b]))
        ctx.append(replay.context(int(out.pi[b])).clone())
    return torch.stack(ctx)


def test_loss_gradient_matches_central_differences():
    model = randomize_(build_model(tiny_config(), seed=0), seed=7, scale=0.4)
    pool = model.new_pool()
    with torch.no_grad():
        pool.Q.normal_(generator=torch.Generator().manual_seed(1))
    images = torch.rand(3, 3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    labels = torch.tensor([0, 2, 1])
    ctx = captured_contexts(model, pool, images)

    def objective():
        out = model(images, pool_override=ctx)
        return dual_loss(out.scores, out.scores_e, labels).mean()

    model.zero_grad()
    objective().backward()
    params = list(model.parameters())
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        numeric = central_difference(objective, p, idx)
        analytic = p.grad[idx].item()
        assert abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8) <= 1e-3, (idx, numeric, analytic)


def test_training_forward_gradient_equals_override_gradient():
    model = randomize_(build_model(tiny_config(), seed=0), seed=8)
    pool = model.new_pool()
    with torch.no_grad():
        pool.Q.normal_(generator=torch.Generator().manual_seed(3))
    images = torch.rand(4, 3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
    labels = torch.tensor([1, 0, 2, 2])
    ctx = captured_contexts(model, pool, images)

    def grads(**kw):
        model.zero_grad()
        out = model(images, **kw)
        dual_loss(out.scores, out.scores_e, labels).mean().backward()
        return [p.grad.clone() for p in model.parameters()]

    via_override = grads(pool_override=ctx)
    via_pool = grads(pool=pool.copy(), update=True)
    assert all(torch.equal(a, b) for a, b in zip(via_override, via_pool))


def test_training_is_deterministic(tiny_data):
    cfg = tiny_train_config()
    a, b = train(cfg, tiny_data), train(cfg, tiny_data)
    assert a.step_losses == b.step_losses
    assert torch.equal(a.pool.Q, b.pool.Q)
    for (ka, va), (kb, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_loss_decreases(tiny_data):
    result = train(tiny_train_config(epochs=5), tiny_data)
    assert result.epoch_losses[-1] < result.epoch_losses[0]


def test_pool_absorbs_every_sample(tiny_data):
    result = train(tiny_train_config(epochs=2), tiny_data)
    assert result.pool.updates == 2 * len(tiny_data)
    off = train(tiny_train_config(epochs=1, pool=False), tiny_data)
    assert off.pool.updates == 0


def test_epoch_order_is_a_seeded_permutation():
    a = epoch_order(0, 1, 10)
    assert sorted(a) == list(range(10))
    assert np.array_equal(a, epoch_order(0, 1, 10))
    assert not np.array_equal(a, epoch_order(0, 2, 10))


def test_resume_matches_uninterrupted_run(tiny_data, tmp_path):
    cfg = tiny_train_config(epochs=4)
    full = train(cfg, tiny_data, tmp_path / "full")
    train(tiny_train_config(epochs=2), tiny_data, tmp_path / "part")
    resumed = train(cfg, tiny_data, tmp_path / "part", resume=tmp_path / "part" / "checkpoints" / "epoch_002.npz")
    assert resumed.epoch_losses == full.epoch_losses[2:]
    for k, v in full.model.state_dict().items():
        assert torch.equal(v, resumed.model.state_dict()[k]), k
    assert torch.equal(full.pool.Q, resumed.pool.Q)
    steps = [json.loads(line)["step"] for line in (tmp_path / "part" / "train_log.jsonl").read_text().splitlines()]
    assert steps == list(range(1, 4 * 5 + 1))


def test_epoch_checkpoints_and_log(tiny_data, tmp_path):
    train(tiny_train_config(epochs=2), tiny_data, tmp_path)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["epoch_001.npz", "epoch_002.npz"]
    rec = json.loads((tmp_path / "train_log.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"epoch", "step", "loss", "lr"}
    _, _, meta = load_checkpoint(tmp_path / "checkpoints" / "epoch_002.npz")
    assert meta["epoch"] == 2 and meta["train_config"]["batch_size"] == 4


def test_non_finite_loss_is_reported(tiny_data):
    cfg = tiny_train_config()
    model = build_model(cfg.model_config(), 0)
    with torch.no_grad():
        model.head.fc.weight.fill_(float("nan"))
    images, labels = stack_batch(tiny_data[:4], torch.float64)
    with pytest.raises(NonFiniteLoss):
        train_step(model, model.new_pool(), make_optimizer(model, cfg), images, labels)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 0.1, "momentum": 0.9})
    for bad in (dict(learning_rate=0), dict(beta2=1.0), dict(batch_size=0), dict(lam=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        train(tiny_train_config(), [])
