"""Variable-shot meta-learning with a shot-scaled inner learning rate.

Modules:

* ``autodiff``      tape-based reverse mode with second-order support
* ``models``        MLPs, batches and losses
* ``tasks``         sinusoid and transformed-classification task streams
* ``learners``      inner updates, rate policies, meta-objectives, Adam
* ``online``        the online incremental loop and regret ledger
* ``verification``  Monte-Carlo oracles for the scaling rule and variance law
* ``config``/``cli`` experiment configuration and command line
"""

from .autodiff import NonFiniteError, Tensor, finite_diff_check, grad
from .learners import (
    FixedRate,
    MetaLearner,
    MetaOptimizerConfig,
    PerParameterRate,
    PerShotRate,
    ScaledLearningRate,
    ScaledRate,
    inner_update,
    meta_objective_vs,
    scaled_lr,
)
from .models import Batch, MLPSpec, ParamVector, empirical_risk, init_params
from .online import OnlineConfig, RegretLedger, TaskBuffer, run_online, vs_meta_update
from .tasks import DataArrivalSchedule, IncrementalDataset, TaskDistribution, TaskSpec

__version__ = "0.1.0"
