# %% [markdown]
# Accuracy matrix arithmetic
# --------------------------
# Row s holds accuracies after training step s. The final average is the
# mean of the last row. Forgetting averages, over every task but the last,
# the drop from the best value seen after learning it to the final value.

# %%
import numpy as np

from cliff.metrics import EvalMatrix, avg_accuracy, forgetting, render_table

names = ["BN", "Graphene", "MoS2", "WTe2"]
rows = [
    [91.0],
    [60.0, 88.0],
    [40.0, 70.0, 85.0],
    [30.0, 65.0, 80.0, 90.0],
]
m = EvalMatrix.lower_triangular(names, rows, "toy")
avg_accuracy(m), forgetting(m)

# %%
# by hand
np.mean(rows[-1]), np.mean([91 - 30, 88 - 65, 85 - 80])

# %%
print(render_table([m]))
