import numpy as np
import pytest

import cot
from cot import autodiff as ad
from cot.kernels import Kernel, WeightedSamples, gram, mmd2
from cot.models import ExplicitConditional, ImplicitGenerator
from cot.objectives import (
    Adam,
    CotConfig,
    ExplicitPlan,
    ImplicitPlan,
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
    train_implicit,
    train_loop,
    write_trace_csv,
)
from cot.synthdata import JointDataset, RngStream


def identity_transport(noise_dim=2, d_x=1):
    """A transport generator that returns its y-input exactly:
    relu(y) - relu(-y) through a 2-unit relu layer."""
    gen = ImplicitGenerator([1, d_x], noise_dim, 1, hidden=(2,), activation="relu", seed=0)
    gen.mlp.first_weights[0].value = np.array([[1.0, -1.0]])          # y part
    gen.mlp.first_weights[1].value = np.zeros((d_x, 2))               # x part
    gen.mlp.first_weights[2].value = np.zeros((noise_dim, 2))         # noise part
    gen.mlp.first_bias.value = np.zeros(2)
    W, b = gen.mlp.layers[0]
    W.value = np.array([[1.0], [-1.0]])
    b.value = np.zeros(1)
    return gen


def tiny_plan(seed=0, hidden=(4, 4), noise_dim=2):
    return ImplicitPlan(
        ImplicitGenerator([1], noise_dim, 1, hidden=hidden, seed=seed * 13 + 1),
        ImplicitGenerator([1, 1], noise_dim, 1, hidden=hidden, seed=seed * 13 + 2),
    )


class TestGroundCost:
    def test_sqeuclid_scalar(self):
        assert ground_cost("sqeuclidean", [[0.0]], [[2.0]])[0, 0] == pytest.approx(4.0)

    def test_sqeuclid_2d(self):
        assert ground_cost("sqeuclidean", [[1.0, 0.0]], [[0.0, 1.0]])[0, 0] == pytest.approx(2.0)

    def test_cosine_parallel(self):
        assert ground_cost("cosine", [[2.0, 0.0]], [[5.0, 0.0]])[0, 0] == pytest.approx(0.0)

    def test_cosine_orthogonal(self):
        assert ground_cost("cosine", [[1.0, 0.0]], [[0.0, 1.0]])[0, 0] == pytest.approx(1.0)

    def test_cosine_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            ground_cost("cosine", [[0.0, 0.0]], [[1.0, 0.0]])

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            ground_cost("manhattan", [[0.0]], [[1.0]])


class TestImplicitLoss:
    def test_identity_transport_zero_cost(self):
        stream = RngStream(0)
        plan = ImplicitPlan(
            ImplicitGenerator([1], 2, 1, hidden=(4,), seed=1),
            identity_transport(),
        )
        src = JointDataset(stream.normals((4, 1)), stream.normals((4, 1)))
        tgt = JointDataset(stream.normals((3, 1)), stream.normals((3, 1)))
        noise = (stream.normals((5, 2)), stream.normals((5, 2)))
        cfg = CotConfig(lambda1=0.0, lambda2=0.0)
        terms = cot_implicit_loss(plan, src, tgt, noise, cfg)
        assert terms.total.value == pytest.approx(0.0, abs=1e-15)

    def test_nonnegative_with_zero_lambda(self):
        stream = RngStream(1)
        plan = tiny_plan(2)
        src = JointDataset(stream.normals((4, 1)), stream.normals((4, 1)))
        tgt = JointDataset(stream.normals((3, 1)), stream.normals((3, 1)))
        noise = (stream.normals((6, 2)), stream.normals((6, 2)))
        cfg = CotConfig(lambda1=0.0, lambda2=0.0)
        terms = cot_implicit_loss(plan, src, tgt, noise, cfg)
        assert terms.total.value >= 0.0
        assert terms.total.value == terms.transport.value
        assert terms.reg_source is None and terms.reg_target is None

    def test_single_sample_hand_expansion(self):
        # One source pair, one target pair, one noise draw: the loss is
        # c(u, v) + lam1 (2 - 2 k(u, y)) + lam2 (2 - 2 k(w, y')) with
        # u = marginal(x, e'), v = transport(u, x, e), w = transport(
        # marginal(x', e'), x', e), for a normalized kernel.
        stream = RngStream(2)
        plan = tiny_plan(3)
        x, y = stream.normals((1, 1)), stream.normals((1, 1))
        xp, yp = stream.normals((1, 1)), stream.normals((1, 1))
        eta, eta_p = stream.normals((1, 2)), stream.normals((1, 2))
        k = Kernel("rbf", 0.9)
        cfg = CotConfig(lambda1=2.5, lambda2=1.5, kernel=k)
        terms = cot_implicit_loss(plan, JointDataset(x, y), JointDataset(xp, yp),
                                  (eta, eta_p), cfg)

        u = plan.marginal.sample([ad.constant(x)], eta_p).value
        v = plan.transport.sample([ad.constant(u), ad.constant(x)], eta).value
        w = plan.transport.sample(
            [plan.marginal.sample([ad.constant(xp)], eta_p), ad.constant(xp)], eta
        ).value
        kv = lambda a, b: gram(k, a, b)[0, 0]
        expected = (
            float(np.sum((u - v) ** 2))
            + 2.5 * (2.0 - 2.0 * kv(u, y))
            + 1.5 * (2.0 - 2.0 * kv(w, yp))
        )
        assert terms.total.value == pytest.approx(expected, abs=1e-12)

    def test_regularizers_match_kernel_module(self):
        # The graph-side per-conditional MMD must agree with the reference
        # numpy estimator evaluated on the same generated samples.
        stream = RngStream(3)
        plan = tiny_plan(4)
        m, n = 3, 5
        src = JointDataset(stream.normals((m, 1)), stream.normals((m, 1)))
        tgt = JointDataset(stream.normals((2, 1)), stream.normals((2, 1)))
        noise = (stream.normals((n, 2)), stream.normals((n, 2)))
        k = Kernel("imq", 1.2)
        cfg = CotConfig(lambda1=1.0, lambda2=0.0, kernel=k)
        terms = cot_implicit_loss(plan, src, tgt, noise, cfg)
        vals = []
        for i in range(m):
            x_rep = np.repeat(src.X[i : i + 1], n, axis=0)
            u = plan.marginal.sample([ad.constant(x_rep)], noise[1]).value
            vals.append(cot.mmd2_to_dirac(k, WeightedSamples(u), src.Y[i]))
        assert terms.reg_source.value == pytest.approx(np.mean(vals), abs=1e-10)

    def test_paired_requires_matching_counts(self):
        stream = RngStream(4)
        plan = tiny_plan(5)
        src = JointDataset(stream.normals((4, 1)), stream.normals((4, 1)))
        tgt = JointDataset(stream.normals((4, 1)), stream.normals((4, 1)))
        noise = (stream.normals((3, 2)), stream.normals((3, 2)))
        cfg = CotConfig(transport_mode="paired")
        with pytest.raises(ValueError):
            cot_implicit_loss(plan, src, tgt, noise, cfg)

    def test_total_is_weighted_sum_of_terms(self):
        stream = RngStream(5)
        plan = tiny_plan(6)
        src = JointDataset(stream.normals((3, 1)), stream.normals((3, 1)))
        tgt = JointDataset(stream.normals((2, 1)), stream.normals((2, 1)))
        noise = (stream.normals((4, 2)), stream.normals((4, 2)))
        cfg = CotConfig(lambda1=3.0, lambda2=7.0)
        t = cot_implicit_loss(plan, src, tgt, noise, cfg)
        assert t.total.value == pytest.approx(
            t.transport.value + 3.0 * t.reg_source.value + 7.0 * t.reg_target.value,
            rel=1e-14,
        )


class TestExplicitLoss:
    def uniform_plan(self, n_labels, d_x):
        plan = ExplicitPlan(
            ExplicitConditional([d_x], n_labels, hidden=(4,), seed=0),
            ExplicitConditional([n_labels, d_x], n_labels, hidden=(4,), seed=1),
        )
        for model in (plan.posterior, plan.transition):
            for p in model.parameters():
                p.value = np.zeros_like(p.value)
        return plan

    def test_uniform_conditionals_transport(self):
        # Two labels embedded at 0 and 1 (unit cost off-diagonal); uniform
        # posterior and transition give sum_ij c pi pi = 0.25 + 0.25 per x.
        plan = self.uniform_plan(2, 3)
        stream = RngStream(6)
        batch = JointDataset(stream.normals((5, 3)), np.eye(2)[[0, 1, 0, 1, 0]])
        label_points = np.array([[0.0], [1.0]])
        cfg = CotConfig(lambda1=0.0, lambda2=0.0)
        terms = cot_explicit_loss(plan, batch, None, label_points, cfg)
        assert terms.transport.value == pytest.approx(0.5, abs=1e-12)

    def test_zero_cost_matrix_zero_lambda(self):
        plan = self.uniform_plan(2, 2)
        stream = RngStream(7)
        batch = JointDataset(stream.normals((4, 2)), np.eye(2)[[0, 1, 1, 0]])
        label_points = np.array([[1.0], [1.0]])  # identical embeddings: cost 0
        cfg = CotConfig(lambda1=0.0, lambda2=0.0)
        terms = cot_explicit_loss(plan, batch, None, label_points, cfg)
        assert terms.total.value == pytest.approx(0.0, abs=1e-15)

    def test_matches_loop_expansion(self):
        stream = RngStream(8)
        n, d, m = 3, 2, 4
        plan = ExplicitPlan(
            ExplicitConditional([d], n, hidden=(5,), seed=2),
            ExplicitConditional([n, d], n, hidden=(5,), seed=3),
        )
        X = stream.normals((m, d))
        labels = np.eye(n)[[0, 2, 1, 0]]
        batch = JointDataset(X, labels)
        label_points = stream.normals((n, 2))
        k = Kernel("rbf", 0.8)
        cfg = CotConfig(lambda1=1.7, lambda2=0.0, kernel=k)
        terms = cot_explicit_loss(plan, batch, None, label_points, cfg)

        C = ground_cost("sqeuclidean", label_points, label_points)
        K = gram(k, label_points, label_points)
        transport, reg = 0.0, 0.0
        for q in range(m):
            post = plan.posterior.forward([ad.constant(X[q : q + 1])]).value[0]
            trans = np.stack([
                plan.transition.forward(
                    [ad.constant(np.eye(n)[j : j + 1]), ad.constant(X[q : q + 1])]
                ).value[0]
                for j in range(n)
            ])
            transport += sum(
                C[i, j] * trans[j, i] * post[j] for i in range(n) for j in range(n)
            )
            marg = post @ trans
            e = labels[q]
            diff = marg - e
            reg += diff @ K @ diff
        transport /= m
        reg /= m
        assert terms.transport.value == pytest.approx(transport, abs=1e-12)
        assert terms.reg_source.value == pytest.approx(reg, abs=1e-12)
        assert terms.total.value == pytest.approx(transport + 1.7 * reg, abs=1e-11)

    def test_perfect_plan_zero_regularizer(self):
        # Posterior concentrated on the true label and a transition that
        # copies its conditioning one-hot make the composed marginal equal
        # the label Dirac, so the regularizer vanishes.
        n, d = 2, 1
        plan = self.uniform_plan(n, d)
        # posterior: hidden unit 0 carries sign(x), output logits +-200
        plan.posterior.mlp.first_weights[0].value = np.array([[50.0, 0.0, 0.0, 0.0]])
        plan.posterior.mlp.layers[0][0].value = np.array(
            [[200.0, -200.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        # transition: hidden unit 0 carries which one-hot conditioned it
        plan.transition.mlp.first_weights[0].value = np.array(
            [[50.0, 0.0, 0.0, 0.0], [-50.0, 0.0, 0.0, 0.0]])
        plan.transition.mlp.layers[0][0].value = np.array(
            [[200.0, -200.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        X = np.array([[1.0], [1.0], [-1.0]])
        Y = np.eye(2)[[0, 0, 1]]
        label_points = np.array([[0.0], [1.0]])
        cfg = CotConfig(lambda1=5.0, lambda2=0.0)
        terms = cot_explicit_loss(plan, JointDataset(X, Y), None, label_points, cfg)
        assert terms.reg_source.value == pytest.approx(0.0, abs=1e-6)

    def test_classification_loss_drops_target_term(self):
        plan = self.uniform_plan(2, 2)
        stream = RngStream(9)
        batch = JointDataset(stream.normals((3, 2)), np.eye(2)[[0, 1, 0]])
        cfg = CotConfig(lambda1=1.0, lambda2=9.9)
        terms = cot_classification_loss(plan, batch, np.array([[0.0], [1.0]]), cfg)
        assert terms.reg_target is None


class TestCellLoss:
    def test_identity_transport_zero_cost(self):
        gen = identity_transport(noise_dim=2, d_x=1)
        stream = RngStream(10)
        unp = stream.normals((4, 1))
        pert = [stream.normals((3, 1))]
        noise = [stream.normals((4, 2))]
        cfg = CotConfig(lambda1=0.0, kernel=Kernel("imq", 1.0))
        terms = cot_cell_loss(gen, [2.0], unp, pert, noise, cfg)
        assert terms.transport.value == pytest.approx(0.0, abs=1e-15)

    def test_generated_equals_perturbed_zero_reg(self):
        gen = identity_transport(noise_dim=2, d_x=1)
        stream = RngStream(11)
        unp = stream.normals((4, 1))
        noise = [stream.normals((4, 2))]
        pert = [unp.copy()]  # identity transport reproduces the unperturbed set
        cfg = CotConfig(lambda1=3.0, kernel=Kernel("rbf", 1.0))
        terms = cot_cell_loss(gen, [2.0], unp, pert, noise, cfg)
        assert terms.reg_source.value == pytest.approx(0.0, abs=1e-12)

    def test_two_point_manual_expansion(self):
        stream = RngStream(12)
        gen = ImplicitGenerator([2, 1], 2, 2, hidden=(3,), seed=4)
        unp = stream.normals((2, 2))
        pert = [stream.normals((3, 2)), stream.normals((2, 2))]
        noise = [stream.normals((2, 2)), stream.normals((2, 2))]
        dosages = [1.0, 2.0]
        k = Kernel("imq", 2.0)
        cfg = CotConfig(lambda1=0.7, kernel=k)
        terms = cot_cell_loss(gen, dosages, unp, pert, noise, cfg)

        transport, reg = 0.0, 0.0
        for q, x_q in enumerate(dosages):
            cond = np.full((2, 1), x_q)
            g = gen.sample([ad.constant(unp), ad.constant(cond)], noise[q]).value
            transport += np.mean(np.sum((unp - g) ** 2, axis=1))
            reg += mmd2(k, WeightedSamples(g), WeightedSamples(pert[q]))
        transport /= 2.0
        reg /= 2.0
        assert terms.transport.value == pytest.approx(transport, abs=1e-12)
        assert terms.reg_source.value == pytest.approx(reg, abs=1e-12)
        assert terms.total.value == pytest.approx(transport + 0.7 * reg, abs=1e-12)


class TestPromptLoss:
    def uniform_transition(self, n_prompts, d):
        model = ExplicitConditional([d, d], n_prompts, hidden=(4,), seed=0)
        for p in model.parameters():
            p.value = np.zeros_like(p.value)
        return model

    def test_uniform_matches_prompt_distribution(self):
        stream = RngStream(13)
        N, K, M, d = 3, 2, 4, 2
        trans = self.uniform_transition(N, d)
        G = stream.normals((N, d))
        V = stream.normals((K, M, d))
        cfg = CotConfig(lambda1=5.0, cost="cosine", kernel=Kernel("rbf", 1.0))
        terms = cot_prompt_loss(trans, G, V, cfg)
        assert terms.reg_source.value == pytest.approx(0.0, abs=1e-12)

    def test_parallel_features_zero_cost(self):
        N, K, M, d = 2, 1, 3, 2
        trans = self.uniform_transition(N, d)
        direction = np.array([1.0, 2.0])
        G = np.outer([1.0, 2.0], direction)
        V = np.outer([0.5, 1.0, 3.0], direction).reshape(K, M, d)
        cfg = CotConfig(lambda1=0.0, cost="cosine")
        terms = cot_prompt_loss(trans, G, V, cfg)
        assert terms.transport.value == pytest.approx(0.0, abs=1e-12)

    def test_manual_expansion_small(self):
        stream = RngStream(14)
        N, K, M, d = 2, 1, 2, 3
        trans = ExplicitConditional([d, d], N, hidden=(4,), seed=5)
        G = stream.normals((N, d))
        V = stream.normals((K, M, d))
        k = Kernel("rbf", 1.5)
        cfg = CotConfig(lambda1=2.0, cost="cosine", kernel=k)
        terms = cot_prompt_loss(trans, G, V, cfg)

        x_bar = V.mean(axis=1)[0]
        probs = np.stack([
            trans.forward([ad.constant(V[0, j : j + 1]),
                           ad.constant(x_bar[None, :])]).value[0]
            for j in range(M)
        ])  # (M, N)
        C = ground_cost("cosine", G, V[0])  # (N, M)
        v_j = 1.0 / M
        transport = sum(C[i, j] * probs[j, i] * v_j for i in range(N) for j in range(M))
        w = probs.sum(axis=0) * v_j  # cumulative marginal, mass K = 1
        u = np.full(N, 1.0 / N)
        Kg = gram(k, G, G)
        reg = (w - u) @ Kg @ (w - u)
        assert terms.transport.value == pytest.approx(transport, abs=1e-12)
        assert terms.reg_source.value == pytest.approx(reg, abs=1e-12)
        assert terms.total.value == pytest.approx(transport + 2.0 * reg, abs=1e-12)


class TestJointAltLoss:
    def test_product_gram_identity(self):
        stream = RngStream(15)
        kx, ky = Kernel("rbf", 1.0), Kernel("imq", 0.5)
        X = stream.normals((4, 2))
        Y = stream.normals((4, 1))
        Gx, Gy = gram(kx, X, X), gram(ky, Y, Y)
        # product kernel Gram is the elementwise product of the factor Grams
        assert np.allclose(Gx * Gy, Gy * Gx)
        joint_direct = np.array([
            [gram(kx, X[i:i+1], X[j:j+1])[0, 0] * gram(ky, Y[i:i+1], Y[j:j+1])[0, 0]
             for j in range(4)] for i in range(4)
        ])
        assert np.allclose(Gx * Gy, joint_direct, atol=1e-14)

    def test_matches_double_loop(self):
        stream = RngStream(16)
        plan = tiny_plan(7)
        m = 3
        src = JointDataset(stream.normals((m, 1)), stream.normals((m, 1)))
        tgt = JointDataset(stream.normals((m, 1)), stream.normals((m, 1)))
        noise = (stream.normals((m, 2)), stream.normals((m, 2)))
        kx, ky = Kernel("rbf", 1.0), Kernel("rbf", 1.0)
        cfg = CotConfig(lambda1=1.0, lambda2=0.0, kernel=ky)
        terms = cot_joint_alt_loss(plan, src, tgt, kx, ky, noise, cfg)

        u = plan.marginal.sample([ad.constant(src.X)], noise[1]).value
        def kj(x1, y1, x2, y2):
            return (gram(kx, x1[None], x2[None])[0, 0]
                    * gram(ky, y1[None], y2[None])[0, 0])
        total = 0.0
        for i in range(m):
            for j in range(m):
                total += kj(src.X[i], u[i], src.X[j], u[j]) / m**2
                total += kj(src.X[i], src.Y[i], src.X[j], src.Y[j]) / m**2
                total -= 2.0 * kj(src.X[i], u[i], src.X[j], src.Y[j]) / m**2
        assert terms.reg_source.value == pytest.approx(total, abs=1e-10)

    def test_identical_joints_zero(self):
        # Regularizer vanishes when the generated joint equals the data joint.
        stream = RngStream(17)
        gen = identity_transport(noise_dim=1)
        plan = ImplicitPlan(identity_marginal(), gen)
        X = stream.normals((3, 1))
        Y = stream.normals((3, 1))
        src = JointDataset(X, Y)
        # identity marginal reproduces eta' -> use Y as the noise directly
        noise = (stream.normals((3, 1)), Y.copy())
        cfg = CotConfig(lambda1=1.0, lambda2=0.0)
        terms = cot_joint_alt_loss(plan, src, src, Kernel("rbf", 1.0),
                                   Kernel("rbf", 1.0), noise, cfg)
        assert terms.reg_source.value == pytest.approx(0.0, abs=1e-12)


def identity_marginal():
    """Marginal generator returning its (1-d) noise input exactly."""
    gen = ImplicitGenerator([1], 1, 1, hidden=(2,), activation="relu", seed=0)
    gen.mlp.first_weights[0].value = np.zeros((1, 2))        # x part
    gen.mlp.first_weights[1].value = np.array([[1.0, -1.0]])  # noise part
    gen.mlp.first_bias.value = np.zeros(2)
    W, b = gen.mlp.layers[0]
    W.value = np.array([[1.0], [-1.0]])
    b.value = np.zeros(1)
    return gen


class TestRegularizerEquivalence:
    def joint_and_labels(self, stream, nx=2, ny=2):
        joint = stream.uniforms((nx, ny)) + 0.1
        joint /= joint.sum()
        return joint, np.eye(ny)

    def random_plan(self, stream, nx, ny):
        p = stream.uniforms((nx, ny)) + 0.05
        return p / p.sum(axis=1, keepdims=True)

    def test_same_plan_is_exactly_zero(self):
        stream = RngStream(18)
        joint, labels = self.joint_and_labels(stream)
        plan = self.random_plan(stream, 2, 2)
        gap = regularizer_equivalence_gap(plan, plan, joint, labels, Kernel("rbf", 1.0))
        assert gap == 0.0

    def test_random_plan_pairs(self):
        stream = RngStream(19)
        k = Kernel("rbf", 0.7)
        for trial in range(25):
            s = stream.child(trial)
            nx, ny = 2 + trial % 3, 2 + trial % 2
            joint, labels = self.joint_and_labels(s, nx, ny)
            pa = self.random_plan(s, nx, ny)
            pb = self.random_plan(s, nx, ny)
            gap = regularizer_equivalence_gap(pa, pb, joint, labels, k)
            assert abs(gap) <= 1e-9

    def test_common_gap_nonnegative(self):
        stream = RngStream(20)
        k = Kernel("rbf", 1.0)
        for trial in range(25):
            s = stream.child(trial)
            joint, labels = self.joint_and_labels(s, 3, 3)
            plan = self.random_plan(s, 3, 3)
            assert joint_conditional_gap(plan, joint, labels, k) >= -1e-9

    def test_absent_x_rejected(self):
        joint = np.array([[0.5, 0.5], [0.0, 0.0]])
        with pytest.raises(ValueError):
            joint_conditional_gap(np.full((2, 2), 0.5), joint, np.eye(2), Kernel())


class TestLambdaEffective:
    def test_fixed(self):
        assert lambda_effective(10.0, "fixed", 10000) == 10.0

    def test_m_quarter(self):
        assert lambda_effective(10.0, "m_quarter", 16) == pytest.approx(20.0)


class TestTraining:
    def small_setup(self, seed=0, m=6):
        stream = RngStream(seed)
        plan = tiny_plan(seed + 50)
        src = JointDataset(stream.normals((m, 1)), stream.normals((m, 1)))
        tgt = JointDataset(stream.normals((m, 1)), stream.normals((m, 1)))
        return plan, src, tgt

    def test_zero_epochs_unchanged(self):
        plan, src, tgt = self.small_setup()
        before = [p.value.copy() for p in plan.parameters()]
        res = train_implicit(plan, src, tgt, CotConfig(epochs=0))
        assert res.trace == []
        for b, p in zip(before, plan.parameters()):
            assert np.array_equal(b, p.value)

    def test_same_seed_identical_traces(self):
        cfg = CotConfig(lambda1=5.0, lambda2=5.0, epochs=8, seed=3, noise_count=4,
                        noise_dim=2)
        traces = []
        for _ in range(2):
            plan, src, tgt = self.small_setup(1)
            traces.append(train_implicit(plan, src, tgt, cfg).trace)
        assert traces[0] == traces[1]

    def test_loss_decreases_on_average(self):
        plan, src, tgt = self.small_setup(2, m=12)
        cfg = CotConfig(lambda1=20.0, lambda2=20.0, epochs=60, seed=1,
                        noise_count=12, learning_rate=1e-2, noise_dim=2)
        res = train_implicit(plan, src, tgt, cfg)
        first = np.mean([r[1] for r in res.trace[:10]])
        last = np.mean([r[1] for r in res.trace[-10:]])
        assert last < first

    def test_divergence_aborts_with_epoch(self):
        plan, src, tgt = self.small_setup(3)
        cfg = CotConfig(lambda1=1.0, lambda2=1.0, epochs=50, seed=0,
                        noise_count=6, learning_rate=1e160, noise_dim=2)
        with pytest.raises(TrainingDivergedError) as exc_info:
            train_implicit(plan, src, tgt, cfg)
        assert exc_info.value.epoch >= 1

    def test_callbacks_see_every_epoch(self):
        plan, src, tgt = self.small_setup(4)
        seen = []
        cfg = CotConfig(epochs=5, noise_count=6, noise_dim=2)
        train_implicit(plan, src, tgt, cfg, callbacks=[lambda e, v: seen.append(e)])
        assert seen == list(range(5))

    def test_trace_csv(self, tmp_path):
        plan, src, tgt = self.small_setup(5)
        cfg = CotConfig(epochs=3, noise_count=6, noise_dim=2)
        res = train_implicit(plan, src, tgt, cfg)
        path = tmp_path / "trace.csv"
        write_trace_csv(path, res.trace)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,loss,transport_term,reg1,reg2"
        assert len(lines) == 4

    def test_adam_converges_on_quadratic(self):
        w = ad.param(np.array([5.0, -3.0]))
        opt = Adam([w], lr=0.1)
        for _ in range(300):
            with ad.Tape() as tape:
                tape.backward(ad.total_sum(ad.square(w)))
            opt.step()
            opt.zero_grad()
        assert np.abs(w.value).max() < 1e-3

    def test_estimate_conditional_cost_deterministic(self):
        plan, src, tgt = self.small_setup(6)
        cfg = CotConfig(noise_dim=2)
        v1 = estimate_conditional_cost(plan, [[0.4]], 100, RngStream(9), cfg)
        v2 = estimate_conditional_cost(plan, [[0.4]], 100, RngStream(9), cfg)
        assert v1 == v2


class TestConfigValidation:
    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            CotConfig(lambda1=-1.0)

    def test_bad_lr(self):
        with pytest.raises(ValueError):
            CotConfig(learning_rate=0.0)

    def test_bad_cost(self):
        with pytest.raises(ValueError):
            CotConfig(cost="l3")

    def test_bad_transport_mode(self):
        with pytest.raises(ValueError):
            CotConfig(transport_mode="diag")
