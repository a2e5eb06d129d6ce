"""The desk-scale verification experiment: four pooling configurations on one cohort.

Takes five to ten minutes on one core. Pass ``--quick`` for a one-fold,
three-epoch run that finishes in about a minute.
"""

# %%
import sys

from miv.bagdata import SynthConfig, make_split, patients_of, synth_generate
from miv.experiments import ExperimentSpec, run_experiment
from miv.training import TrainConfig

quick = "--quick" in sys.argv

# %% The cohort: clinical polyp-count mix, half of every bag replaced by background.
spec = ExperimentSpec()
if quick:
    spec = ExperimentSpec(train=TrainConfig(epochs=3), folds=(0,))
records = synth_generate(spec.synth)
patients = patients_of(records)
print(f"{len(patients)} patients, {len(records) // 5} polyps, {len(records)} views "
      f"of width {spec.synth.latent_dim}")
plan = make_split(patients, spec.test_frac, spec.train.k, seed=0)
print(f"{len(plan.test_patients)} held-out test patients, {plan.k} folds")

# %% Cross-validate each configuration and test the fold with the lowest validation loss.
def progress(config, fold):
    print(f"  {config.label:<20} fold {fold.fold}: val loss {fold.best_val_loss:.4f} "
          f"at epoch {fold.best_epoch}, val AUC {fold.val_auc:.3f}")


outcome = run_experiment(spec, progress)
print()
print(outcome.table())
print(f"\n{outcome.seconds:.0f} s")

# %% Confusion counts of the selected models on the test patients.
for r in outcome.results:
    print(f"{r.config.label:<20} {r.test}")
