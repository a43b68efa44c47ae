"""Conditional-transport training objectives on the autodiff graph.

All variants share the same skeleton: a ground-cost transport term averaged
over an auxiliary covariate measure (here always the empirical covariates),
plus squared-MMD regularizers that pull the plan's conditional marginals,
evaluated at the observed covariates, toward Diracs at the paired samples:

    loss = E_a[ E c(y, y') ]
         + lambda1 * mean_i MMD^2( plan marginal at x_i, delta_{y_i} )   (source pairs)
         + lambda2 * mean_i MMD^2( plan marginal at x'_i, delta_{y'_i} ) (target pairs)

For implicit plans the marginals are empirical measures over generator
samples; for explicit plans they are simplex vectors over a finite label set
and the MMD uses the label Gram matrix. The regularizer in Dirac form equals
the conditional-matching form up to a plan-independent constant, an identity
checked exactly by :func:`regularizer_equivalence_gap`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .kernels import Kernel, gram
from .models import ExplicitConditional, ImplicitGenerator, compose_explicit_marginal
from .synthdata import JointDataset, RngStream

__all__ = [
    "CotConfig",
    "JointDataset",
    "ImplicitPlan",
    "ExplicitPlan",
    "NonFiniteLossError",
    "TrainingDivergedError",
    "CotLossTerms",
    "ground_cost",
    "kernel_node",
    "mmd2_node",
    "cot_implicit_loss",
    "cot_explicit_loss",
    "cot_classification_loss",
    "cot_cell_loss",
    "cot_prompt_loss",
    "cot_joint_alt_loss",
    "regularizer_equivalence_gap",
    "joint_conditional_gap",
    "lambda_effective",
    "Adam",
    "train_loop",
    "train_implicit",
    "train_classifier",
    "train_cell",
    "TrainResult",
    "write_trace_csv",
    "estimate_conditional_cost",
]

_COSTS = ("sqeuclidean", "cosine")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"non-finite value in loss term {term!r}: {value!r}")
        self.term = term


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, cause: Exception):
        super().__init__(f"training diverged at epoch {epoch}: {cause}")
        self.epoch = epoch


@dataclass(frozen=True)
class CotConfig:
    """Objective variant, regularization weights and optimizer settings."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    cost: str = "sqeuclidean"
    kernel: Kernel = field(default_factory=Kernel)
    variant: str = "implicit"
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int | None = None   # None = full batch
    seed: int = 0
    noise_dim: int = 10
    noise_count: int | None = None  # generated samples per conditional; None = m
    transport_mode: str = "full"    # "full": average over all (covariate, noise)
    lambda_mode: str = "fixed"      # or "m_quarter": scale lambda by m^(1/4)
    inner_estimator: str = "vstat"  # self-interaction term of the generated
    # measure: "vstat" keeps the diagonal (the plug-in squared-norm form);
    # "ustat" drops it, removing the O(1/noise_count) bias when the number of
    # generated samples is capped below m.

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.cost not in _COSTS:
            raise ValueError(f"cost must be one of {_COSTS}")
        if self.transport_mode not in ("full", "paired"):
            raise ValueError("transport_mode must be 'full' or 'paired'")
        if self.lambda_mode not in ("fixed", "m_quarter"):
            raise ValueError("lambda_mode must be 'fixed' or 'm_quarter'")
        if self.inner_estimator not in ("vstat", "ustat"):
            raise ValueError("inner_estimator must be 'vstat' or 'ustat'")


def lambda_effective(lam: float, mode: str, m: int) -> float:
    """Fixed weight, or the m^(1/4) scaling suggested by the consistency rate."""
    if mode == "fixed":
        return lam
    return lam * float(m) ** 0.25


@dataclass
class ImplicitPlan:
    """Factorized implicit plan.

    marginal samples the conditional at x (inputs: x, noise'); transport maps
    a marginal sample onward (inputs: y, x, noise). Their composition is the
    plan's second marginal.
    """

    marginal: ImplicitGenerator
    transport: ImplicitGenerator

    def parameters(self) -> list:
        return self.marginal.parameters() + self.transport.parameters()


@dataclass
class ExplicitPlan:
    """Factorized explicit plan over a finite label set.

    posterior gives label probabilities at x; transition gives probabilities
    conditioned on (one-hot label, x).
    """

    posterior: ExplicitConditional
    transition: ExplicitConditional

    def parameters(self) -> list:
        return self.posterior.parameters() + self.transition.parameters()


@dataclass
class CotLossTerms:
    """Scalar graph nodes for the total loss and its pieces."""

    total: ad.Node
    transport: ad.Node
    reg_source: ad.Node | None = None
    reg_target: ad.Node | None = None

    def values(self) -> dict:
        out = {
            "loss": float(self.total.value),
            "transport": float(self.transport.value),
            "reg1": 0.0 if self.reg_source is None else float(self.reg_source.value),
            "reg2": 0.0 if self.reg_target is None else float(self.reg_target.value),
        }
        return out


def _check_finite(node: ad.Node, term: str) -> ad.Node:
    if not np.isfinite(node.value).all():
        raise NonFiniteLossError(term, node.value)
    return node


# ------------------------------------------------------------- cost & kernel


def ground_cost(tag: str, A, B) -> np.ndarray:
    """Pairwise ground-cost matrix between row sets (plain numpy)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    if tag == "sqeuclidean":
        diff = A[:, None, :] - B[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    if tag == "cosine":
        na = np.linalg.norm(A, axis=1)
        nb = np.linalg.norm(B, axis=1)
        if na.min() == 0.0 or nb.min() == 0.0:
            raise ValueError("cosine cost is undefined for zero-norm rows")
        return 1.0 - (A @ B.T) / np.outer(na, nb)
    raise ValueError(f"unknown cost tag {tag!r}")


def _paired_cost_mean(tag: str, A: ad.Node, B: ad.Node) -> ad.Node:
    """Mean of c(a_row, b_row) over paired rows, on the graph."""
    if tag == "sqeuclidean":
        return ad.total_mean(ad.row_sum(ad.square(ad.sub(A, B))))
    if tag == "cosine":
        ip = ad.row_sum(ad.mul(A, B))
        inv_na = ad.rsqrt(ad.row_sum(ad.square(A)))
        inv_nb = ad.rsqrt(ad.row_sum(ad.square(B)))
        sim = ad.mul(ad.mul(ip, inv_na), inv_nb)
        return ad.total_mean(ad.sadd(ad.smul(sim, -1.0), 1.0))
    raise ValueError(f"unknown cost tag {tag!r}")


def kernel_node(kernel: Kernel, sqdist: ad.Node) -> ad.Node:
    """Apply a radial kernel to a squared-distance node."""
    if kernel.family == "rbf":
        k = ad.exp(ad.smul(sqdist, -1.0 / (2.0 * kernel.sigma2)))
    elif kernel.family == "imq":
        k = ad.rsqrt(ad.sadd(sqdist, kernel.sigma2))
    elif kernel.family == "imq2":
        k = ad.rsqrt(ad.smul(ad.sadd(sqdist, 1.0), 1.0 / kernel.sigma2))
    else:
        raise ValueError(f"unknown kernel family {kernel.family!r}")
    if kernel.rescaled:
        raw = replace(kernel, rescaled=False)
        k = ad.smul(k, 1.0 / raw.diag_value)
    return k


def mmd2_node(kernel: Kernel, A: ad.Node, B, b_self: float | None = None) -> ad.Node:
    """Squared MMD between uniform empirical measures, differentiable in A.

    B is a constant sample set. Its self-interaction mean can be passed in as
    b_self to avoid recomputing a parameter-independent Gram every call.
    """
    A = ad.as_node(A)
    kaa = ad.total_mean(kernel_node(kernel, ad.pairwise_sqdist(A, A)))
    kab = ad.total_mean(kernel_node(kernel, ad.pairwise_sqdist(A, ad.constant(B))))
    if b_self is None:
        b_self = float(np.mean(gram(kernel, B, B)))
    return ad.sadd(ad.sub(kaa, ad.smul(kab, 2.0)), b_self)


def _dirac_reg_node(kernel: Kernel, grid: ad.Node, targets: np.ndarray,
                    n: int, d: int, estimator: str = "vstat") -> ad.Node:
    """mean_i MMD^2( (1/n) sum_j delta_{grid[i, j]}, delta_{targets[i]} ).

    grid holds n generated d-vectors per row i, flattened to (m, n*d);
    targets is (m, d). The expansion is
    (1/n^2) sum_jj' k(g_ij, g_ij') - (2/n) sum_j k(g_ij, y_i) + k(y_i, y_i);
    with estimator="ustat" the first sum excludes j = j' (all kernels here
    have a constant diagonal), which debiases the self-interaction when the
    generated sample count is small.
    """
    self_k = kernel_node(kernel, ad.grouped_self_sqdist(grid, n, d))
    cross_k = kernel_node(kernel, ad.grouped_cross_sqdist(grid, ad.constant(targets), n, d))
    self_mean = ad.row_mean(self_k)
    if estimator == "ustat":
        if n < 2:
            raise ValueError("the debiased estimator needs at least 2 generated samples")
        # (n^2 * mean - n * diag) / (n (n-1))
        self_mean = ad.smul(ad.sadd(ad.smul(self_mean, float(n)), -kernel.diag_value),
                            1.0 / (n - 1))
    per_i = ad.sub(self_mean, ad.smul(ad.row_mean(cross_k), 2.0))
    return ad.sadd(ad.total_mean(per_i), kernel.diag_value)


def _implicit_grid(plan: ImplicitPlan, X: np.ndarray, eta: np.ndarray,
                   eta_prime: np.ndarray, composed: bool):
    """Generator samples at every (covariate, noise index) pair.

    Returns (marginal_grid, composed_grid_or_None, X_rep); rows are grouped
    by covariate: row i*n + j is covariate i with noise pair j.
    """
    m, n = X.shape[0], eta_prime.shape[0]
    X_rep = np.repeat(X, n, axis=0)
    u = plan.marginal.sample([ad.constant(X_rep)], np.tile(eta_prime, (m, 1)))
    w = None
    if composed:
        w = plan.transport.sample([u, ad.constant(X_rep)], np.tile(eta, (m, 1)))
    return u, w, X_rep


def cot_implicit_loss(plan: ImplicitPlan, source: JointDataset, target: JointDataset,
                      noise, config: CotConfig) -> CotLossTerms:
    """Implicit-plan objective.

    noise is a pair (eta, eta_prime) of (n, noise_dim) standard-normal draws;
    n is the number of generated samples per conditional. The transport term
    averages c(marginal sample, transported sample) over the source
    covariates (the auxiliary measure) and the noise pairs; in "paired" mode
    it uses one noise pair per covariate (requires n == len(source)).
    """
    eta, eta_prime = noise
    eta = np.asarray(eta, dtype=np.float64)
    eta_prime = np.asarray(eta_prime, dtype=np.float64)
    if eta.shape != eta_prime.shape:
        raise ValueError("noise draws must share a shape")
    n = eta.shape[0]
    d_y = plan.marginal.out_dim

    # Transport term over the auxiliary (source-covariate) measure.
    if config.transport_mode == "paired":
        if n != len(source):
            raise ValueError("paired transport needs one noise pair per source row")
        u_pair = plan.marginal.sample([ad.constant(source.X)], eta_prime)
        v_pair = plan.transport.sample([u_pair, ad.constant(source.X)], eta)
        transport = _paired_cost_mean(config.cost, u_pair, v_pair)
        u_src = None
    else:
        u_src, v_src, _ = _implicit_grid(plan, source.X, eta, eta_prime, composed=True)
        transport = _paired_cost_mean(config.cost, u_src, v_src)
    _check_finite(transport, "transport")

    reg_source = reg_target = None
    total = transport
    if config.lambda1 > 0:
        if u_src is None:
            u_src, _, _ = _implicit_grid(plan, source.X, eta, eta_prime, composed=False)
        grid = ad.reshape(u_src, (len(source), n * d_y))
        reg_source = _check_finite(
            _dirac_reg_node(config.kernel, grid, source.Y, n, d_y,
                            config.inner_estimator), "reg_source")
        total = ad.add(total, ad.smul(reg_source, config.lambda1))
    if config.lambda2 > 0:
        _, w_tgt, _ = _implicit_grid(plan, target.X, eta, eta_prime, composed=True)
        grid = ad.reshape(w_tgt, (len(target), n * d_y))
        reg_target = _check_finite(
            _dirac_reg_node(config.kernel, grid, target.Y, n, d_y,
                            config.inner_estimator), "reg_target")
        total = ad.add(total, ad.smul(reg_target, config.lambda2))
    return CotLossTerms(_check_finite(total, "total"), transport, reg_source, reg_target)


# ---------------------------------------------------------- explicit variants


def _explicit_forward(plan: ExplicitPlan, X: np.ndarray):
    """Posterior rows (m, n) and transition rows (m*n, n), one block of n
    transition rows (conditioning label j = 0..n-1) per observation."""
    n = plan.posterior.n_labels
    m = X.shape[0]
    post = plan.posterior.forward([ad.constant(X)])
    onehots = np.tile(np.eye(n), (m, 1))
    X_rep = np.repeat(X, n, axis=0)
    trans = plan.transition.forward([ad.constant(onehots), ad.constant(X_rep)])
    return post, trans


def _label_mmd_terms(K: np.ndarray, probs: ad.Node, Y_onehot: np.ndarray) -> ad.Node:
    """mean_i MMD^2(probs_i, delta at the label of row i) on the label Gram."""
    PK = ad.matmul(probs, ad.constant(K))
    self_term = ad.total_mean(ad.row_sum(ad.mul(PK, probs)))
    cross_term = ad.total_mean(ad.row_sum(ad.mul(PK, ad.constant(Y_onehot))))
    self_y = float(np.mean(np.einsum("ij,jk,ik->i", Y_onehot, K, Y_onehot)))
    return ad.sadd(ad.sub(self_term, ad.smul(cross_term, 2.0)), self_y)


def _explicit_core(plan: ExplicitPlan, batch: JointDataset, C: np.ndarray,
                   K: np.ndarray):
    """Transport term and composed-marginal regularizer for one batch."""
    n = plan.posterior.n_labels
    m = len(batch)
    post, trans = _explicit_forward(plan, batch.X)
    # Expected cost: sum_ij c(l_i, l_j) transition(i | j, x) posterior(j | x).
    row_costs = ad.row_sum(ad.mul(trans, ad.constant(np.tile(C.T, (m, 1)))))
    weighted = ad.mul(row_costs, ad.reshape(post, (m * n,)))
    transport = ad.smul(ad.total_sum(weighted), 1.0 / m)
    marginal = compose_explicit_marginal(trans, post)
    reg = _label_mmd_terms(K, marginal, batch.Y)
    return transport, reg


def cot_explicit_loss(plan: ExplicitPlan, source: JointDataset, target: JointDataset,
                      label_points: np.ndarray, config: CotConfig) -> CotLossTerms:
    """Explicit-plan objective over a finite label set.

    label_points embeds the labels (rows) for both the ground cost and the
    label Gram matrix; Y columns of the batches must be one-hot rows over the
    same label order.
    """
    label_points = np.atleast_2d(np.asarray(label_points, dtype=np.float64))
    C = ground_cost(config.cost, label_points, label_points)
    K = gram(config.kernel, label_points, label_points)
    transport, reg_source = _explicit_core(plan, source, C, K)
    _check_finite(transport, "transport")
    total = transport
    if config.lambda1 > 0:
        _check_finite(reg_source, "reg_source")
        total = ad.add(total, ad.smul(reg_source, config.lambda1))
    else:
        reg_source = None
    reg_target = None
    if config.lambda2 > 0 and target is not None:
        post_t = plan.posterior.forward([ad.constant(target.X)])
        reg_target = _check_finite(_label_mmd_terms(K, post_t, target.Y), "reg_target")
        total = ad.add(total, ad.smul(reg_target, config.lambda2))
    return CotLossTerms(_check_finite(total, "total"), transport, reg_source, reg_target)


def cot_classification_loss(plan: ExplicitPlan, batch: JointDataset,
                            label_points: np.ndarray, config: CotConfig) -> CotLossTerms:
    """Classification specialization: the posterior factor is the classifier
    being learnt and only the source-side regularizer is present."""
    cfg = replace(config, lambda2=0.0)
    return cot_explicit_loss(plan, batch, None, label_points, cfg)


def cot_cell_loss(transport_gen: ImplicitGenerator, dosages, unperturbed: np.ndarray,
                  perturbed: list, noise: list, config: CotConfig,
                  target_self_terms: list | None = None) -> CotLossTerms:
    """Dosage-response objective.

    The conditional-marginal factor is the empirical unperturbed population;
    only the transport factor is learnt. For each dosage level x_q the
    generator pushes every unperturbed cell forward, paying the ground cost
    against its own input, and the generated set is pulled toward the
    observed perturbed set at that level by a squared MMD.

    target_self_terms optionally carries the per-dosage constant
    mean-self-Gram of the perturbed sets (precompute once when training).
    """
    dosages = np.asarray(dosages, dtype=np.float64).ravel()
    unperturbed = np.atleast_2d(np.asarray(unperturbed, dtype=np.float64))
    if len(perturbed) != dosages.size or len(noise) != dosages.size:
        raise ValueError("need one perturbed set and one noise block per dosage")
    m = unperturbed.shape[0]
    transports, regs = [], []
    for q, x_q in enumerate(dosages):
        cond = np.full((m, 1), x_q)
        gen = transport_gen.sample([ad.constant(unperturbed), ad.constant(cond)], noise[q])
        transports.append(_paired_cost_mean(config.cost, ad.constant(unperturbed), gen))
        if config.lambda1 > 0:
            b_self = None if target_self_terms is None else target_self_terms[q]
            regs.append(mmd2_node(config.kernel, gen, np.atleast_2d(perturbed[q]),
                                  b_self=b_self))
    transport = transports[0]
    for t in transports[1:]:
        transport = ad.add(transport, t)
    transport = _check_finite(ad.smul(transport, 1.0 / dosages.size), "transport")
    total = transport
    reg_source = None
    if regs:
        reg_source = regs[0]
        for r in regs[1:]:
            reg_source = ad.add(reg_source, r)
        reg_source = _check_finite(ad.smul(reg_source, 1.0 / dosages.size), "reg_source")
        total = ad.add(total, ad.smul(reg_source, config.lambda1))
    return CotLossTerms(_check_finite(total, "total"), transport, reg_source, None)


def cot_prompt_loss(transition: ExplicitConditional, prompt_features: np.ndarray,
                    visual_features: np.ndarray, config: CotConfig) -> CotLossTerms:
    """Prompt-matching objective on synthetic feature tensors.

    prompt_features: (N, d) one row per prompt. visual_features: (K, M, d),
    M local features for each of K images; the per-image conditioning vector
    is the mean of its local features. Both the per-feature distribution v
    and the prompt distribution u are uniform. The cumulative marginal
    (summed over images and local features, total mass K) is renormalized to
    a probability vector before the MMD against u.
    """
    G = np.atleast_2d(np.asarray(prompt_features, dtype=np.float64))
    V = np.asarray(visual_features, dtype=np.float64)
    if V.ndim != 3 or V.shape[2] != G.shape[1]:
        raise ValueError("visual features must be (K, M, d) matching prompt dim")
    K_img, M, d = V.shape
    N = G.shape[0]
    V_flat = V.reshape(K_img * M, d)
    x_bar = np.repeat(V.mean(axis=1), M, axis=0)  # (K*M, d) image conditioning
    probs = transition.forward([ad.constant(V_flat), ad.constant(x_bar)])  # (K*M, N)

    C = ground_cost(config.cost, G, V_flat)  # (N, K*M)
    row_costs = ad.row_sum(ad.mul(probs, ad.constant(C.T)))
    transport = _check_finite(
        ad.smul(ad.total_sum(row_costs), 1.0 / (K_img * M)), "transport")

    total = transport
    reg_source = None
    if config.lambda1 > 0:
        Kg = gram(config.kernel, G, G)
        colsum = ad.matmul(ad.constant(np.ones((1, K_img * M))), probs)  # (1, N)
        w = ad.smul(colsum, 1.0 / (K_img * M))  # renormalized cumulative marginal
        diff = ad.sub(w, ad.constant(np.full((1, N), 1.0 / N)))
        quad = ad.total_sum(ad.mul(ad.matmul(diff, ad.constant(Kg)), diff))
        reg_source = _check_finite(quad, "reg_source")
        total = ad.add(total, ad.smul(reg_source, config.lambda1))
    return CotLossTerms(_check_finite(total, "total"), transport, reg_source, None)


def cot_joint_alt_loss(plan: ImplicitPlan, source: JointDataset, target: JointDataset,
                       kernel_x: Kernel, kernel_y: Kernel, noise,
                       config: CotConfig) -> CotLossTerms:
    """Alternate objective with MMD regularization over joint samples.

    Generated and observed (x, y) pairs are compared with the product kernel
    k_x(x, x') * k_y(y, y'); the covariate Gram factors are constants. Kept
    as the inferior baseline for comparison against the conditional form.
    """
    eta, eta_prime = noise
    m_s, m_t = len(source), len(target)
    if eta.shape[0] != m_s or eta_prime.shape[0] != m_s:
        raise ValueError("joint-alt variant uses one noise pair per source row")

    def joint_mmd(X, gen_node, Y) -> ad.Node:
        Gx = gram(kernel_x, X, X)
        kaa = ad.total_mean(ad.mul(ad.constant(Gx),
                                   kernel_node(kernel_y, ad.pairwise_sqdist(gen_node, gen_node))))
        kab = ad.total_mean(ad.mul(ad.constant(Gx),
                                   kernel_node(kernel_y, ad.pairwise_sqdist(gen_node, ad.constant(Y)))))
        kbb = float(np.mean(Gx * gram(kernel_y, Y, Y)))
        return ad.sadd(ad.sub(kaa, ad.smul(kab, 2.0)), kbb)

    u = plan.marginal.sample([ad.constant(source.X)], eta_prime)
    v = plan.transport.sample([u, ad.constant(source.X)], eta)
    transport = _check_finite(_paired_cost_mean(config.cost, u, v), "transport")
    total = transport
    reg_source = reg_target = None
    if config.lambda1 > 0:
        reg_source = _check_finite(joint_mmd(source.X, u, source.Y), "reg_source")
        total = ad.add(total, ad.smul(reg_source, config.lambda1))
    if config.lambda2 > 0:
        eta_t = eta[:m_t] if m_t <= m_s else np.tile(eta, (int(np.ceil(m_t / m_s)), 1))[:m_t]
        eta_pt = eta_prime[:m_t] if m_t <= m_s else np.tile(eta_prime, (int(np.ceil(m_t / m_s)), 1))[:m_t]
        u_t = plan.marginal.sample([ad.constant(target.X)], eta_pt)
        w_t = plan.transport.sample([u_t, ad.constant(target.X)], eta_t)
        reg_target = _check_finite(joint_mmd(target.X, w_t, target.Y), "reg_target")
        total = ad.add(total, ad.smul(reg_target, config.lambda2))
    return CotLossTerms(_check_finite(total, "total"), transport, reg_source, reg_target)


# ------------------------------------------------- regularizer equivalence


def _validate_plan_table(plan: np.ndarray, joint: np.ndarray) -> np.ndarray:
    plan = np.asarray(plan, dtype=np.float64)
    if plan.shape != joint.shape:
        raise ValueError(f"plan table {plan.shape} must match joint {joint.shape}")
    if plan.min() < 0 or np.abs(plan.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError("plan rows must be probability vectors")
    return plan


def joint_conditional_gap(plan, joint, label_points, kernel: Kernel) -> float:
    """Difference between the Dirac-form and conditional-form regularizers.

    For a discrete joint s over (x, y) with exactly computable conditionals,
    returns sum_{x,y} s(x,y) MMD^2(plan(.|x), delta_y)
          - sum_x s_X(x) MMD^2(plan(.|x), s(.|x)).
    This equals the conditional variance of the label embedding and does not
    depend on the plan; it is nonnegative.
    """
    joint = np.asarray(joint, dtype=np.float64)
    s_x = joint.sum(axis=1)
    if s_x.min() <= 0:
        raise ValueError("every x value must carry positive mass in the joint")
    plan = _validate_plan_table(plan, joint)
    K = gram(kernel, label_points, label_points)
    cond = joint / s_x[:, None]
    r_joint = 0.0
    r_cond = 0.0
    for xi in range(joint.shape[0]):
        p = plan[xi]
        for yi in range(joint.shape[1]):
            e = np.zeros(joint.shape[1])
            e[yi] = 1.0
            diff = p - e
            r_joint += joint[xi, yi] * (diff @ K @ diff)
        diff = p - cond[xi]
        r_cond += s_x[xi] * (diff @ K @ diff)
    return float(r_joint - r_cond)


def regularizer_equivalence_gap(plan_a, plan_b, joint, label_points,
                                kernel: Kernel) -> float:
    """Plan-independence check of the regularizer decomposition.

    Returns [R_joint(a) - R_cond(a)] - [R_joint(b) - R_cond(b)], which is
    exactly zero because the gap is a plan-independent constant of the joint.
    """
    return (joint_conditional_gap(plan_a, joint, label_points, kernel)
            - joint_conditional_gap(plan_b, joint, label_points, kernel))


# ----------------------------------------------------------------- training


class Adam:
    """Adam with bias correction; state per parameter node."""

    def __init__(self, params: list, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    trace: list          # rows (epoch, loss, transport, reg1, reg2)
    params: list

    @property
    def final_loss(self) -> float:
        return self.trace[-1][1] if self.trace else float("nan")


def train_loop(params: list, epoch_loss, config: CotConfig,
               callbacks=()) -> TrainResult:
    """Generic training loop: per epoch call epoch_loss(epoch, stream) to get
    CotLossTerms, backprop, Adam-update. Aborts on non-finite losses with the
    epoch index. Fully reproducible from config.seed."""
    stream = RngStream(config.seed)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    trace = []
    for epoch in range(config.epochs):
        epoch_stream = stream.child(epoch)
        try:
            with ad.Tape() as tape:
                terms = epoch_loss(epoch, epoch_stream)
                tape.backward(terms.total)
        except (NonFiniteLossError, FloatingPointError) as exc:
            raise TrainingDivergedError(epoch, exc) from exc
        vals = terms.values()
        trace.append((epoch, vals["loss"], vals["transport"], vals["reg1"], vals["reg2"]))
        opt.step()
        opt.zero_grad()
        for cb in callbacks:
            cb(epoch, vals)
    return TrainResult(trace, params)


def _epoch_noise(stream: RngStream, n: int, noise_dim: int):
    eta = stream.child(0).normals((n, noise_dim))
    eta_prime = stream.child(1).normals((n, noise_dim))
    return eta, eta_prime


def train_implicit(plan: ImplicitPlan, source: JointDataset, target: JointDataset,
                   config: CotConfig, callbacks=()) -> TrainResult:
    """Train both implicit factors jointly: per epoch draw fresh noise,
    assemble the loss, Adam-update all parameters."""
    n = config.noise_count or len(source)
    variant = cot_joint_alt_loss if config.variant == "joint_alt" else None

    def epoch_loss(epoch, stream):
        noise = _epoch_noise(stream, n, config.noise_dim)
        if variant is not None:
            return variant(plan, source, target, config.kernel, config.kernel,
                           noise, config)
        return cot_implicit_loss(plan, source, target, noise, config)

    return train_loop(plan.parameters(), epoch_loss, config, callbacks)


def train_classifier(plan: ExplicitPlan, data: JointDataset, label_points,
                     config: CotConfig, callbacks=()) -> TrainResult:
    """Train the classification objective, optionally with minibatches."""
    m = len(data)

    def epoch_loss(epoch, stream):
        if config.batch_size and config.batch_size < m:
            idx = stream.child(2).permutation(m)[: config.batch_size]
            batch = data.subset(idx)
        else:
            batch = data
        return cot_classification_loss(plan, batch, label_points, config)

    return train_loop(plan.parameters(), epoch_loss, config, callbacks)


def train_cell(transport_gen: ImplicitGenerator, dosages, unperturbed,
               perturbed, config: CotConfig, callbacks=()) -> TrainResult:
    """Train the dosage-response transport factor."""
    m = np.atleast_2d(unperturbed).shape[0]
    n_levels = len(np.asarray(dosages).ravel())
    target_self = [float(np.mean(gram(config.kernel, p, p))) for p in perturbed]

    def epoch_loss(epoch, stream):
        noise = [stream.child(q).normals((m, config.noise_dim)) for q in range(n_levels)]
        return cot_cell_loss(transport_gen, dosages, unperturbed, perturbed,
                             noise, config, target_self_terms=target_self)

    return train_loop(transport_gen.parameters(), epoch_loss, config, callbacks)


def write_trace_csv(path, trace) -> None:
    """Loss trace as CSV: epoch, loss, transport_term, reg1, reg2."""
    with open(path, "w") as fh:
        fh.write("epoch,loss,transport_term,reg1,reg2\n")
        for epoch, loss, transport, reg1, reg2 in trace:
            fh.write(f"{epoch},{loss!r},{transport!r},{reg1!r},{reg2!r}\n")


def estimate_conditional_cost(plan: ImplicitPlan, x, n_draws: int,
                              stream: RngStream, config: CotConfig) -> float:
    """Monte-Carlo estimate of the plan's transport cost at one covariate:
    mean ground cost between marginal samples and their transported images."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    X_rep = np.repeat(x, n_draws, axis=0)
    eta, eta_prime = _epoch_noise(stream, n_draws, config.noise_dim)
    u = plan.marginal.sample([ad.constant(X_rep)], eta_prime)
    v = plan.transport.sample([u, ad.constant(X_rep)], eta)
    return float(_paired_cost_mean(config.cost, u, v).value)
