"""Shared fixtures: reference configs and the pretrained toy parent."""

from __future__ import annotations

import numpy as np
import pytest

from moeup import upcycle
from moeup.checkpoint import Checkpoint, expected_slots
from moeup.config import ModelConfig
from moeup.corpus import VOCAB_SIZE, default_corpus, default_eval_corpus
from moeup.model import build_model
from moeup.numerics import RngStream
from moeup.trainer import TrainConfig, train


def make_config(d_h, d_f, n_l, n_h, n_q, v, n=0, k=0, m=1, k_s=0, s=4096):
    return ModelConfig(
        hidden_size=d_h, intermediate_size=d_f, num_layers=n_l, num_heads=n_h,
        num_query_groups=n_q, head_dim=d_h // n_h, vocab_size=v,
        num_experts=n, top_k=k, granularity=m, shared_experts=k_s, seq_len=s,
    )


# The seven published reference rows: config -> (total, active), values as
# printed (family-style rounding, so e.g. the 1.5B dense model's exact count
# truncates to "1.5B"). ``ulp`` is one unit in the last printed digit.
REFERENCE_ROWS = {
    "dense_152m": (make_config(512, 2048, 12, 8, 8, 99_574), 152e6, 152e6, 1e6),
    "dense_1.5b": (make_config(2048, 7168, 24, 16, 8, 48_586), 1.5e9, 1.5e9, 0.1e9),
    "dense_3.7b": (make_config(3072, 8192, 28, 24, 24, 99_574), 3.7e9, 3.7e9, 0.1e9),
    "dense_13b": (make_config(5120, 13_824, 40, 40, 40, 99_574), 13e9, 13e9, 1e9),
    "moe_8x152m": (make_config(512, 2048, 12, 8, 8, 99_574, n=8, k=2), 417e6, 190e6, 1e6),
    "moe_8x1.5b": (make_config(2048, 7168, 24, 16, 8, 48_586, n=8, k=2), 8.9e9, 2.6e9, 0.1e9),
    "moe_8x3.7b": (make_config(3072, 8192, 28, 24, 24, 99_574, n=8, k=2), 18e9, 5.9e9, 1e9),
}

# Published training budgets and total FLOPs (band checked at factor 1.5).
REFERENCE_TRAINING_FLOPS = [
    ("dense_152m", 1_000e9, 1.59e21),
    ("moe_8x152m", 500e9, 0.91e21),
    ("moe_8x3.7b", 500e9, 1.98e22),
]


def tiny_dense_config(vocab=23, seq_len=16):
    return make_config(16, 32, 2, 2, 2, vocab, s=seq_len)


def tiny_moe_config(vocab=23, n=4, k=2, seq_len=16, m=1, k_s=0):
    return make_config(16, 32, 2, 2, 2, vocab, n=n, k=k, m=m, k_s=k_s, s=seq_len)


def toy_dense_config():
    return make_config(64, 256, 2, 4, 4, VOCAB_SIZE, s=64)


def toy_moe_config(n=4, k=2):
    return make_config(64, 256, 2, 4, 4, VOCAB_SIZE, n=n, k=k, s=64)


def random_checkpoint(config: ModelConfig, seed: int, scale: float = 0.35,
                      dtype=np.float32) -> Checkpoint:
    """Random checkpoint at a healthy weight scale (norms near 1)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_slots(config).items():
        if name.endswith("norm"):
            tensors[name] = (1.0 + 0.1 * rng.normal(size=shape)).astype(dtype)
        else:
            tensors[name] = (scale * rng.normal(size=shape)).astype(dtype)
    return Checkpoint(config=config, tensors=tensors, metadata={"method": "test-random"})


PARENT_PRETRAIN_STEPS = 2000


@pytest.fixture(scope="session")
def toy_corpora():
    return default_corpus(), default_eval_corpus()


@pytest.fixture(scope="session")
def pretrained_parent(toy_corpora):
    """Dense toy parent pre-trained 2000 steps on the bundled corpus.

    Returns (checkpoint_of_trained_parent, elapsed_seconds).
    """
    import time

    train_corpus, _ = toy_corpora
    config = toy_dense_config()
    ckpt = upcycle.from_scratch(config, seed=2024)
    model = build_model(ckpt, max_positions=64, stream=RngStream(2024))
    cfg = TrainConfig(max_lr=3e-3, min_lr=3e-4, total_steps=PARENT_PRETRAIN_STEPS,
                      warmup_steps=20, batch_size=16, seq_len=64,
                      balance_mode="off", seed=7)
    start = time.time()
    model, curve = train(model, train_corpus, cfg)
    elapsed = time.time() - start
    from moeup.model import model_to_checkpoint

    trained = model_to_checkpoint(model, metadata={"method": "pretrained-parent"})
    assert curve.points[-1].lm_loss < curve.points[0].lm_loss
    return trained, elapsed
