"""Conditional optimal transport between empirically observed conditionals.

Estimators couple the conditionals of two joint distributions given only
paired samples from the joints: transport plans are factorized into
conditional generators (implicit, noise-fed) or softmax conditionals
(explicit, finite labels) and trained by stochastic gradient descent on a
ground-cost term plus squared-MMD marginal-matching regularizers. Exact
desk-scale oracles (closed-form Gaussian Wasserstein distances, analytic
barycenters, assignment OT) verify the estimators end to end.
"""

from .kernels import Kernel, WeightedSamples, gram, median_sigma2, mmd2, mmd2_to_dirac
from .autodiff import Node, Tape, TapeError, grad_check
from .models import (
    ExplicitConditional,
    ImplicitGenerator,
    Mlp,
    MlpConfig,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import (
    Adam,
    CotConfig,
    ExplicitPlan,
    ImplicitPlan,
    NonFiniteLossError,
    TrainingDivergedError,
    cot_cell_loss,
    cot_classification_loss,
    cot_explicit_loss,
    cot_implicit_loss,
    cot_joint_alt_loss,
    cot_prompt_loss,
    estimate_conditional_cost,
    ground_cost,
    joint_conditional_gap,
    lambda_effective,
    regularizer_equivalence_gap,
    train_cell,
    train_classifier,
    train_implicit,
    train_loop,
    write_trace_csv,
)
from .oracles import (
    Gaussian1D,
    DiscretePlan,
    analytic_barycenter,
    empirical_w1_1d,
    exact_assignment_ot,
    exact_ot_1d,
    gaussian_barycenter_1d,
    gaussian_w2sq,
    mccann_interpolate,
    true_conditional_w2sq,
)
from .synthdata import (
    ConditionalGaussianSpec,
    JointDataset,
    RngStream,
    dataset_from_csv,
    dataset_to_csv,
    gen_conditional_gaussian,
    gen_toy_cell,
    gen_toy_classification,
    sample_beta,
)

__version__ = "0.1.0"
