"""Train the default small model on 16 synthetic change pairs until it fits them.

Prints the loss and train-set F1 every 100 steps and stops once F1 reaches 0.95.
A few minutes on one CPU core.  Run: python3 demos/overfit_bcd.py
"""
import time

from unicd import ChangeModel, ModelConfig
from unicd.data import generate_dataset
from unicd.train import TrainConfig, evaluate, train

data = generate_dataset("bcd", 16, 32, 32, seed=0)
model = ChangeModel(ModelConfig(task="bcd"))
print(f"{sum(p.data.size for _, p in model.named_parameters()):,} parameters")
t0 = time.perf_counter()


def progress(step, report, m):
    if (step + 1) % 100:
        return False
    f1 = evaluate(m, data).values["f1"]
    print(f"step {step + 1:5d}  loss {report.total.item():.4f}  train F1 {f1:.3f}  {time.perf_counter() - t0:5.0f}s")
    return f1 >= 0.95


result, _ = train(model, data, TrainConfig(task="bcd", max_iters=2000, stage_split=1.0), callback=progress)
print(f"stopped after {result.steps} steps" + (" (target reached)" if result.stopped_early else ""))
