"""How many verifier calls it takes to deduplicate N detections."""

# %%
from miv.planner import bagged_lower_bound, build_plan, pairwise_count

# %% Ten detections, bags of four: 45 pairs, at least 12 calls, the greedy plan uses 15.
plan = build_plan(10, 4)
print(plan.to_text(), end="")
print(plan.summary())

# %% The plan's overhead over the lower bound stays below N - 1 calls.
print(f"{'N':>4} {'k':>2} {'pairs':>6} {'bound':>6} {'plan':>5}")
for n in (5, 10, 20, 50):
    for k in (1, 2, 4, 8):
        print(f"{n:>4} {k:>2} {pairwise_count(n):>6} {bagged_lower_bound(n, k):>6} "
              f"{len(build_plan(n, k)):>5}")
