# %% [markdown]
# An incremental run
# --------------------
# Base training on BN, then three materials added one by one, on the
# default benchmark (300 train / 90 val images per material). Takes about
# two minutes on one core. Smaller datasets or fewer epochs leave the delta
# heads undertrained and the table near chance.

# %%
from cliff.metrics import evaluate_sequence, render_table
from cliff.synth import default_benchmark
from cliff.training import TrainConfig, run_cliff, train_naive_finetune

tasks = default_benchmark(0)
names = [p.name for p, _ in tasks]
val = [s.validation for _, s in tasks]
cfg = TrainConfig()

# %%
cliff = run_cliff(tasks, cfg)
naive = train_naive_finetune(tasks, cfg)

# %%
reports = [
    evaluate_sequence(cliff.models, val, names, "cliff"),
    evaluate_sequence(naive.models, val, names, "naive"),
]
print(render_table(reports))

# %%
# the frozen base head never moves: only the new material's parts train
final = cliff.models[-1]
sum(p.size for p in final.parameters() if p.requires_grad), sum(p.size for p in final.parameters())
