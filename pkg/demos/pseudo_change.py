"""Compare the change head's response to pseudo-changes with and without frequency prompts.

Both variants see the same scenes, seeds and schedule (stage 1, then stage 2).
The held-out probe scenes carry brightness and noise distractors that are not
labelled as change; a lower mean change probability there is better.
Takes about five minutes.  Run: python3 demos/pseudo_change.py
"""
from unicd import ModelConfig
from unicd.cli import run_variant
from unicd.data import generate_dataset
from unicd.metrics import comparison_table
from unicd.train import TrainConfig

data = generate_dataset("bcd", 16, 32, 32, seed=0)
probe = generate_dataset("bcd", 8, 32, 32, seed=1)
tcfg = TrainConfig(task="bcd", max_iters=500)

reports = []
for name, mcfg in [("with prompts", ModelConfig(task="bcd")), ("no prompts", ModelConfig(task="bcd", fcpg=False))]:
    _, rep = run_variant(mcfg, tcfg, data, probe)
    rep.dataset = name
    reports.append(rep)
    print(f"finished {name}")

print(comparison_table(reports))
