"""
Examples that change the answer
===============================

A rising history is consistent with a linear trend and with the upswing of a
triangle wave.  Showing the model a few windows of the true series family
should settle which continuation is right.

Pass a desk checkpoint (for instance the one the acceptance suite caches in
.acceptance_cache/desk.ckpt) to see a trained model; without one the script
trains a small model for a couple of minutes.
"""

import sys

import numpy as np

from tsicf.checkpoint import load_checkpoint
from tsicf.contextgen import MixtureSampler
from tsicf.evaluation import mae
from tsicf.model import ModelConfig, forecast, init_params
from tsicf.synthetic import disambiguation_suite, synthetic_registry
from tsicf.train import TrainConfig, make_training_context, train

if len(sys.argv) > 1:
    params, cfg = load_checkpoint(sys.argv[1])
else:
    cfg = ModelConfig(n_layers=2, d_model=32, n_heads=2, d_ff=32)
    tcfg = TrainConfig(steps=400, batch_size=4, warmup=80, n_examples=6)
    registry = synthetic_registry(n_series=32, length=256, seed=0)
    sampler = MixtureSampler(registry, tcfg.n_examples, cfg.T_max, {"synthetic": 1.0})

    def draw(step):
        rng = np.random.default_rng([0, step])
        return [make_training_context(sampler.draw(rng).resolve(registry, cfg.T_max), cfg) for _ in range(tcfg.batch_size)]

    params = init_params(cfg, seed=0)
    train(params, cfg, tcfg, draw, progress=lambda s, l: s % 100 == 0 and print(f"step {s} loss {l:.3f}"))

tasks = disambiguation_suite(20, 4, seed=3)
task = tasks[0]
print(f"\ntask: {task.kind}, truth is {task.true_family}")
print("history tail:", np.round(task.history[-8:], 2))
print("truth:       ", np.round(task.truth, 2))
print("alternative: ", np.round(task.alternative, 2))
for k in (0, 4):
    pred = forecast(task.history, task.examples[:k], len(task.truth), params, cfg).predictions
    print(f"k={k} forecast:", np.round(pred, 2), f" MAE {mae(pred, task.truth):.3f}")

# Averaged over the small suite.
for k in (0, 1, 4):
    errs = [mae(forecast(t.history, t.examples[:k], len(t.truth), params, cfg).predictions, t.truth) for t in tasks]
    print(f"mean MAE with {k} examples: {np.mean(errs):.3f}")
