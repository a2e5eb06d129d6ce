"""Contrastive pretraining of a projection head on clustered synthetic sources.

Fifty epochs take a couple of minutes on one core.
"""

# %%
import numpy as np

from miv.contrastive import SimCLRConfig, clustered_sources, nt_xent, pretrain, warmup_cosine_lr

# %% The NT-Xent loss on a hand-made batch: two pairs of identical unit rows.
z = np.zeros((4, 512))
z[:2, 0] = 1.0
z[2:, 1] = 1.0
print("loss:", nt_xent(z, 0.5), " closed form:", np.log(1 + 2 * np.exp(-2)))

# %% The learning-rate schedule: linear warmup, then cosine decay to the floor.
cfg = SimCLRConfig()
for e in (0, 4, 9, 10, 50, 100, 150, 199):
    print(f"epoch {e:>3}: lr {warmup_cosine_lr(e, cfg):.6f}")

# %% Why the temperature is 0.1: the smallest loss reachable with 64 views.
# A perfect embedding puts a pair at similarity 1 and, at best, the 62
# negatives at -1/63 (a regular simplex is the most spread-out arrangement).
for tau in (0.5, 0.1):
    floor = -np.log(np.exp(1 / tau) / (np.exp(1 / tau) + 62 * np.exp(-1 / 63 / tau)))
    print(f"tau={tau}: loss floor {floor:.3f} vs uniform start {np.log(63):.3f}")

# %% Pretrain for 50 epochs at batch 64 with LARS.
def progress(epoch, loss, lr):
    if epoch % 10 == 0 or epoch == 49:
        print(f"epoch {epoch:>2}: loss {loss:.4f}  lr {lr:.4f}")


sources = clustered_sources(512, 256, clusters=16, spread=0.5, seed=0)
result = pretrain(sources, SimCLRConfig(total_epochs=50), progress=progress)
print(f"epoch-mean loss {result.history[0]:.4f} -> {result.history[-1]:.4f} "
      f"(ratio {result.history[-1] / result.history[0]:.3f})")
