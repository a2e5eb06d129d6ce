"""Multi-instance verification: does a query embedding match any instance of a bag?

Submodules:

* :mod:`miv.numerics` - layers, losses, seeded RNGs and the gradient checker
* :mod:`miv.bagdata` - polyp views, exemplar construction, patient splits, synthetic cohorts
* :mod:`miv.attention` - query-conditioned bag pooling kernels
* :mod:`miv.model` - the Siamese verification network
* :mod:`miv.training` - fold training, cross-validation and metrics
* :mod:`miv.contrastive` - NT-Xent pretraining of a projection head
* :mod:`miv.planner` - comparison plans for deduplication
* :mod:`miv.formats` / :mod:`miv.cli` - file formats and the command line
"""

__version__ = "0.1.0"

from .attention import AttentionConfig, cap_pool, default_grid  # noqa: E402
from .bagdata import (Exemplar, InstanceRecord, SplitPlan, SynthConfig, build_exemplars,  # noqa: E402
                      make_split, synth_generate, validate_split)
from .model import MIVModel, forward, init_model, predict  # noqa: E402
from .planner import bagged_lower_bound, build_plan, pairwise_count  # noqa: E402
from .training import TrainConfig, compute_auc, cross_validate, evaluate  # noqa: E402

__all__ = [
    "AttentionConfig", "cap_pool", "default_grid", "Exemplar", "InstanceRecord", "SplitPlan",
    "SynthConfig", "build_exemplars", "make_split", "synth_generate", "validate_split", "MIVModel",
    "forward", "init_model", "predict", "bagged_lower_bound", "build_plan", "pairwise_count",
    "TrainConfig", "compute_auc", "cross_validate", "evaluate",
]
