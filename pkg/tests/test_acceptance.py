"""Acceptance checks. Each test carries a ``criterion`` marker; the terminal
summary prints one PASS / FAIL / PARTIAL / SKIP line per criterion."""

import copy
import os
import time

import numpy as np
import pytest

from budgetnet import config as cfg
from budgetnet import data, gradcheck
from budgetnet.cli import main, shipped_config
from budgetnet.config import avgpool_kernel
from budgetnet.functional import softmax_cross_entropy
from budgetnet.layers import BasicBlock
from budgetnet.model import build, count_params
from budgetnet.optim import Schedule, clip_grad_norm, global_norm
from budgetnet.rng import RngStream
from budgetnet.train import LAST_CKPT, METRICS_FILE, Trainer, read_metrics, train

from test_data import two_record_fixture
from test_optim import _toy_run

C1 = pytest.mark.criterion(1, "parameter-count oracle")
C2 = pytest.mark.criterion(2, "gradient-check suite")
C3 = pytest.mark.criterion(3, "formula checks")
C4 = pytest.mark.criterion(4, "desk-scale training smoke")
C5 = pytest.mark.criterion(5, "determinism and resume")
C6 = pytest.mark.criterion(6, "data pipeline")
C7 = pytest.mark.criterion(7, "strategy-equivalence properties")

BUDGET = 5_000_000
GRAD_TOL = 1e-4
CLIP = 0.1
SUBSET_SECONDS = 120
FULL_RUN_ACC = 0.55


def _lines(capsys):
    return capsys.readouterr().out.splitlines()


# --- 1 -------------------------------------------------------------------------------

@C1
def test_resnet18_count(capsys):
    start = time.perf_counter()
    assert main(["count-params", "--config", str(shipped_config("resnet18"))]) == 0
    elapsed = time.perf_counter() - start
    assert _lines(capsys)[0] == "11173962"
    assert elapsed < 1.0


@C1
def test_our_model_without_se_count(tmp_path, capsys):
    text = shipped_config("our_model").read_text().replace("squeeze_excitation = true", "squeeze_excitation = false")
    path = tmp_path / "no_se.cfg"
    path.write_text(text)
    assert main(["count-params", "--config", str(path)]) == 0
    assert _lines(capsys)[0] == "4697162"
    model_cfg = cfg.load(path).model
    enumerated = sum(p.size for p in build(model_cfg).parameters())
    assert enumerated == count_params(model_cfg) == 4_697_162


@C1
def test_our_model_with_se_under_budget(capsys):
    assert main(["count-params", "--config", "our_model"]) == 0
    lines = _lines(capsys)
    total = int(lines[0])
    assert total < BUDGET
    assert total == sum(p.size for p in build(cfg.load(shipped_config("our_model")).model).parameters())
    text = "\n".join(lines)
    assert "4,697,742" in text and "580" in text


# --- 2 -------------------------------------------------------------------------------

@C2
def test_every_backward_matches_finite_differences():
    start = time.perf_counter()
    errors = gradcheck.run(trials=5, seed=0)
    elapsed = time.perf_counter() - start
    assert set(errors) == {"conv2d", "batchnorm", "linear", "avgpool", "relu", "sigmoid", "dropout", "se_block",
                           "cross_entropy"}
    for op, err in errors.items():
        print(f"{op:14s} max rel err {err:.2e}")
        assert err < GRAD_TOL, op
    assert elapsed < 60


@C2
def test_gradient_check_different_seed():
    assert all(err < GRAD_TOL for err in gradcheck.run(trials=5, seed=1).values())


# --- 3 -------------------------------------------------------------------------------

@C3
def test_avgpool_kernels_match_published_table():
    assert avgpool_kernel(3) == 8
    assert avgpool_kernel(4) == 4


@C3
@pytest.mark.parametrize("base,eta_min,t_max", [(0.1, 0.0, 200), (0.1, 0.0, 5), (0.05, 1e-4, 37)])
def test_cosine_endpoints_exact(base, eta_min, t_max):
    s = Schedule("cosine", base, t_max=t_max, eta_min=eta_min)
    assert s.lr(0) == base
    assert s.lr(t_max) == eta_min


@C3
def test_clip_at_table_threshold():
    rng = np.random.default_rng(0)
    for _ in range(200):
        grads = [rng.normal(scale=rng.uniform(0.001, 10), size=rng.integers(1, 50)) for _ in range(3)]
        before = np.concatenate(grads)
        clip_grad_norm(grads, CLIP)
        after = np.concatenate(grads)
        assert global_norm(grads) <= CLIP + 1e-12
        cos = before @ after / (np.linalg.norm(before) * np.linalg.norm(after))
        assert cos == pytest.approx(1.0, abs=1e-12)


# --- 4 -------------------------------------------------------------------------------

def _real_cifar_dir():
    directory = os.environ.get(cfg.DATA_DIR_ENV)
    return directory if data.cifar10_available(directory) else None


def _train_mode_loss(model, dataset, stats, batch_size):
    m = copy.deepcopy(model).train()
    total = 0.0
    for x, y in data.batches(dataset, batch_size, stats=stats):
        loss, _ = softmax_cross_entropy(m.forward(x), y)
        total += loss * len(y)
    return total / len(dataset)


@C4
def test_subset_epoch_reduces_train_loss(cifar):
    real = _real_cifar_dir()
    if real:
        train_set, test_set = data.load_cifar10(real)
    else:
        train_set, test_set = cifar
    train_set, test_set = train_set.subset(512), test_set.subset(200)
    config = cfg.replace(cfg.load(shipped_config("our_model")), epochs=1, workers=0, wall_clock=False)
    trainer = Trainer(config, train_set, test_set)
    before = _train_mode_loss(trainer.model, train_set, trainer.stats, config.batch_size)
    start = time.perf_counter()
    trainer.train_epoch()
    elapsed = time.perf_counter() - start
    after = _train_mode_loss(trainer.model, train_set, trainer.stats, config.batch_size)
    print(f"subset loss {before:.4f} -> {after:.4f}; steps {trainer.step_losses}; {elapsed:.1f}s")
    assert after < before
    assert trainer.step_losses[-1] < trainer.step_losses[0]
    assert elapsed < SUBSET_SECONDS


@C4
@pytest.mark.slow
def test_five_epoch_full_cifar(tmp_path):
    real = _real_cifar_dir()
    if real is None:
        pytest.skip(f"needs the real CIFAR-10 binaries in ${cfg.DATA_DIR_ENV}; none are available here")
    config = cfg.replace(cfg.load(shipped_config("our_model")), epochs=5, data_dir=real,
                         output_dir=str(tmp_path), wall_clock=False)
    trainer = train(config)
    acc = trainer.history[-1].test_acc
    print(f"test accuracy after 5 epochs: {acc:.4f}")
    assert acc >= FULL_RUN_ACC


# --- 5 -------------------------------------------------------------------------------

def _tiny(out, data_dir, **kw):
    base = cfg.load(shipped_config("tiny"))
    return cfg.replace(base, seed=42, workers=0, epochs=2, subset=128, data_dir=str(data_dir),
                       output_dir=str(out), wall_clock=False, **kw)


@C5
def test_two_seed42_runs_bitwise_identical(tmp_path, cifar_dir):
    train(_tiny(tmp_path / "a", cifar_dir))
    train(_tiny(tmp_path / "b", cifar_dir))
    a = (tmp_path / "a" / METRICS_FILE).read_bytes()
    assert a == (tmp_path / "b" / METRICS_FILE).read_bytes()
    assert len(a.splitlines()) == 3


@C5
def test_resume_reproduces_next_row(tmp_path, cifar_dir):
    full = train(_tiny(tmp_path / "full", cifar_dir))
    train(_tiny(tmp_path / "part", cifar_dir), until_epoch=1)
    resumed = train(None, resume=tmp_path / "part" / LAST_CKPT)
    assert resumed.history[-1] == full.history[-1]
    assert read_metrics(tmp_path / "part" / METRICS_FILE) == read_metrics(tmp_path / "full" / METRICS_FILE)
    for p, q in zip(full.model.parameters(), resumed.model.parameters()):
        assert p.data.tobytes() == q.data.tobytes()


# --- 6 -------------------------------------------------------------------------------

@C6
def test_two_record_fixture_byte_exact(tmp_path):
    raw = two_record_fixture()
    path = tmp_path / "two.bin"
    path.write_bytes(raw)
    images, labels = data.read_batch_file(path)
    assert labels.tolist() == [3, 9]
    for k, first in ((0, (10, 20, 30)), (1, (200, 150, 100))):
        for c in range(3):
            expected = (first[c] + np.arange(1024)) % 256
            assert np.array_equal(images[k, c].ravel(), expected)
    assert data.serialize_batch(images, labels) == raw


@C6
def test_flip_frequency():
    rng = RngStream(2024)
    flips = np.mean([data.draw_augmentation(rng)[2] for _ in range(10_000)])
    assert abs(flips - 0.5) <= 0.015


@C6
def test_self_normalization(cifar):
    train_set, _ = cifar
    x = data.normalize(train_set.images, data.channel_stats(train_set), np.float64)
    assert np.all(np.abs(x.mean(axis=(0, 2, 3))) < 1e-5)
    assert np.all(np.abs(x.std(axis=(0, 2, 3)) - 1) < 1e-5)


# --- 7 -------------------------------------------------------------------------------

@C7
def test_lookahead_k1_alpha1_equals_inner_optimizer():
    for a, b in zip(_toy_run(True, steps=10), _toy_run(False, steps=10)):
        assert a.tobytes() == b.tobytes()


def _block_pair(**kw):
    rng = np.random.default_rng(8)
    a = BasicBlock("b", 8, 16, 3, 1, stride=2, **kw)
    b = BasicBlock("b", 8, 16, 3, 1, stride=2)
    shared = {p.name: rng.normal(size=p.shape).astype(np.float32) for p in b.parameters()}
    for blk in (a, b):
        for p in blk.parameters():
            if p.name in shared:
                p.data[...] = shared[p.name]
    return a, b


def _same_pass(a, b):
    x = np.random.default_rng(9).normal(size=(4, 8, 16, 16)).astype(np.float32)
    ya, yb = a.forward(x), b.forward(x)
    g = np.random.default_rng(10).normal(size=ya.shape).astype(np.float32)
    return ya.tobytes() == yb.tobytes() and a.backward(g).tobytes() == b.backward(g).tobytes()


@C7
def test_se_forced_to_one_equals_plain_block():
    se, plain = _block_pair(se_ratio=4)
    se.se.force_excitation = 1.0
    assert _same_pass(se, plain)
    assert all(p.grad.tobytes() == q.grad.tobytes()
               for p, q in zip(plain.parameters(), [t for t in se.parameters() if ".se." not in t.name]))


@C7
def test_dropout_zero_equals_no_dropout():
    rng = RngStream(3)
    dropped, plain = _block_pair(dropout_p=0.5, rng=rng)
    dropped.dropout.p = 0.0
    draws = rng.draws
    assert _same_pass(dropped, plain)
    assert rng.draws == draws
