import numpy as np
from drcil.model import DrcModel, expand_for_task


def make_random_drc(rng, d=4, in_dim=5, tasks=(2, 2, 2), hidden=7):
    """Untrained DRC model whose branches and head biases are perturbed so
    that no two code paths coincide by accident."""
    model = DrcModel.create([in_dim, hidden, d], tasks[0], rng)
    for n in tasks[1:]:
        model.new_branch.weight.data += rng.normal(0, 0.3, (d, d))
        model = expand_for_task(model, n, rng)
    model.new_branch.weight.data += rng.normal(0, 0.3, (d, d))
    for h in model.heads:
        h.bias.data += rng.normal(size=h.bias.shape)
    return model


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


# one "criterion N: PASS|FAIL ..." line per acceptance check, printed by conftest
ACCEPTANCE_LINES: list[str] = []
