"""
The command line, end to end
============================

Generate data, train a history-only base model, continue it with in-context
examples, then forecast, evaluate and ablate.  Everything lands in a temp
directory; each step is the same command you would type in a shell.
"""

import shlex
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(tempfile.mkdtemp())
config = work / "run.ini"
config.write_text(f"""
[run]
seed = 0

[model]
p = 8
h = 16
d_model = 32
n_layers = 2
n_heads = 2
d_ff = 32

[train]
steps = 60
batch_size = 4
warmup = 10
n_examples = 4

[gen]
n_series = 8
length = 200
n_tasks = 10

[data]
manifest = {work / "data" / "manifest.ini"}

[eval]
datasets = synthetic/sinusoid, synthetic/linear_trend
history_len = 64
horizon = 16

[ablate]
n_tasks = 10
""")


def tsicf(*args):
    cmd = [sys.executable, "-m", "tsicf.cli", *map(str, args)]
    print("$ tsicf " + " ".join(shlex.quote(str(a)) for a in args))
    subprocess.run(cmd, check=True)


tsicf("gen-data", "--config", config, "--out", work / "data")
tsicf("train", "--config", config, "--out", work / "models")
tsicf("train", "--config", config, "--out", work / "models", "--init-from", work / "models" / "base.ckpt")

(work / "history.csv").write_text("y\n" + "\n".join(str(i % 12) for i in range(50)) + "\n")
tsicf("forecast", "--config", config, "--out", work / "fc", "--checkpoint", work / "models" / "icf.ckpt",
      "--history", work / "history.csv", "--horizon", 32)
print((work / "fc" / "forecast.csv").read_text())

tsicf("eval", "--config", config, "--out", work / "eval", "--checkpoint", work / "models" / "icf.ckpt")
print((work / "eval" / "eval.csv").read_text())

tsicf("ablate", "--config", config, "--out", work / "ablate", "--checkpoint", work / "models" / "icf.ckpt")
print((work / "ablate" / "ablation_summary.csv").read_text())
