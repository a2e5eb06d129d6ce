"""How the pooling kernels weigh a bag whose views only partly match the query."""

# %%
import numpy as np

from miv.attention import AttentionConfig, cap_pool, dba_pool, init_attention_params, vema_pool
from miv.numerics import ParamStore, make_rng

np.set_printoptions(precision=4, suppress=True)

# %% Distance-based attention on a tiny hand-made bag.
# One row sits on the query, three sit at distance 5. With beta = 1 and the
# two-dimensional expected distance 2, the three far rows score -2.5 each.
q = np.zeros(2)
bag = np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 4.0], [3.0, 4.0]])
w, pooled = dba_pool(q, bag, beta=1.0, norm="l2")
print("DBA weights:", w, " closed form for row 0:", 1 / (1 + 3 * np.exp(-2.5)))
print("pooled:", pooled)

# %% A larger beta flattens the weights towards plain averaging.
for beta in (0.25, 1.0, 4.0, 100.0):
    print(f"beta={beta:>6}:", dba_pool(q, bag, beta)[0])

# %% Variance-excited attention: with a constant bag the gate is sigmoid(0) = 1/2.
rng = make_rng(0)
R = rng.standard_normal((4, 4))
_, _, gated = vema_pool(np.ones(4), np.tile([1.0, 2.0, 3.0, 4.0], (4, 1)), R, np.eye(4))
print("gated query with a zero-variance bag:", gated)

# %% A realistic bag: two views of the query's polyp plus two background views.
d = 64
latent = rng.standard_normal(d)
query = latent + 0.5 * rng.standard_normal(d)
bag = np.stack([latent + 0.5 * rng.standard_normal(d), rng.standard_normal(d),
                latent + 0.5 * rng.standard_normal(d), rng.standard_normal(d)])
for kind in ("dba_l1", "dba_l2", "vema"):
    cfg = AttentionConfig(kind, heads=4, model_dim=d)
    params = ParamStore()
    init_attention_params(cfg, params, make_rng(1))
    res = cap_pool(cfg, params, query, bag)
    print(f"{cfg.label:<12} mean weight per bag row:", res.weights.mean(axis=0))
# At initialization the distance kernels already lean towards rows 0 and 2;
# training sharpens this by shrinking beta.

# %% Shuffling the bag permutes the weights and leaves the pooled vector unchanged.
perm = np.array([2, 0, 3, 1])
cfg = AttentionConfig("dba_l2", 4, d)
params = ParamStore()
init_attention_params(cfg, params, make_rng(1))
a, b = cap_pool(cfg, params, query, bag), cap_pool(cfg, params, query, bag[perm])
print("pooled vectors identical:", np.array_equal(a.v_t, b.v_t))
print("weights follow the rows:", np.array_equal(a.weights[:, perm], b.weights))
