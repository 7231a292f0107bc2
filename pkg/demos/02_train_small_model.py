"""
Training a small model
======================

A few hundred Adam steps on synthetic series, with an interruption half way
to show that a resumed run continues exactly where it stopped.
"""

import tempfile
from pathlib import Path

import numpy as np

from tsicf.contextgen import MixtureSampler
from tsicf.model import ModelConfig, forecast, init_params
from tsicf.synthetic import synthetic_registry
from tsicf.train import TrainConfig, load_training_state, make_training_context, train

cfg = ModelConfig(p=4, h=8, d_model=32, n_layers=2, n_heads=2, d_ff=32, T_max=48, n_max=6)
tcfg = TrainConfig(steps=300, batch_size=4, warmup=50, n_examples=4, checkpoint_every=50)

registry = synthetic_registry(n_series=16, length=128, seed=0)
sampler = MixtureSampler(registry, tcfg.n_examples, cfg.T_max, {"synthetic": 1.0})


# Every batch is a pure function of the step number; that is what makes
# resuming exact.
def draw(step):
    rng = np.random.default_rng([0, step])
    return [make_training_context(sampler.draw(rng).resolve(registry, cfg.T_max), cfg) for _ in range(tcfg.batch_size)]


work = Path(tempfile.mkdtemp())
ckpt = work / "small.ckpt"

# Run the first 150 steps and "crash".
train(init_params(cfg, seed=0), cfg, tcfg, draw, checkpoint_path=ckpt, metrics_path=work / "m.csv", stop_after=150)

# Pick the run up from disk and finish it.
params, _, opt, _ = load_training_state(ckpt)
print(f"resuming at step {opt.step}")
result = train(params, cfg, tcfg, draw, opt=opt, checkpoint_path=ckpt, metrics_path=work / "m.csv")

losses = np.array([loss for _, _, loss in result.history])
for lo in range(0, len(losses), 50):
    print(f"steps {lo + 1:3d}-{lo + 50:3d}  mean loss {losses[lo:lo + 50].mean():.3f}")

# Forecast the next 16 points of a fresh sinusoid (two decoding rounds).
t = np.arange(40.0)
history = 3 * np.sin(2 * np.pi * t / 12)
pred = forecast(history, [], 16, params, cfg).predictions
truth = 3 * np.sin(2 * np.pi * np.arange(40.0, 56.0) / 12)
print("\nprediction:", np.round(pred, 2))
print("truth:     ", np.round(truth, 2))
print(f"metrics in {work / 'm.csv'}")
