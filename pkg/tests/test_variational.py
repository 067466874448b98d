import math

import numpy as np
import pytest
import torch
from scipy import integrate

from conftest import all_indices, make_model
from kft.kernels import SideInfo
from kft.model import KftModel
from kft.train import TrainConfig
from kft.variational import (
    DenseMode,
    PriorHyper,
    VariationalKft,
    calibration,
    calibration_heatmap,
    chain_second_moment,
    coverage,
    elbo,
    expected_loglik,
    kl_kronecker,
    kl_multivariate_rff,
    kl_univariate,
    kron_cholesky,
    kronecker_sample,
    logdet_lowrank_plus_diag,
    mean_prediction,
    output_moments,
    posterior_predictive,
    recon_ls_univariate,
    recon_wlr_multivariate,
    recon_wlr_univariate,
    sample_core,
    vi_loss_terms,
    vi_param_groups,
    vi_train,
    write_heatmap_csv,
)
from oracles import dense_cell_cov, dense_gaussian_kl, mc_expected_loglik, side_operator


def state_for(variant, space, family, seed=2, init_var=0.05, groups=None, noise_var=0.5, extents=(3, 2, 3), **kw):
    m = make_model(variant, space, extents, rank=2, seed=seed, rff_features=6, groups=groups, **kw)
    st = VariationalKft(m, family, init_var=init_var, seed=seed + 1, prior=PriorHyper(noise_var=noise_var))
    rng = np.random.default_rng(seed + 5)
    with torch.no_grad():
        for plist in [st.core_logvar] + [st.aux_logvar[k] for k in st.aux_logvar]:
            for t in plist:
                t.add_(torch.from_numpy(0.5 * rng.standard_normal(tuple(t.shape))))
    return st


class TestKlUnivariate:
    def test_equal_is_zero(self):
        assert float(kl_univariate(0.3, 2.0, 0.3, 2.0)) == 0.0

    def test_hand_value(self):
        assert float(kl_univariate(1.0, 1.0, 0.0, 1.0)) == 0.5

    def test_quadrature(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            mq, mp = rng.normal(size=2)
            vq, vp = rng.uniform(0.2, 3.0, size=2)

            def integrand(x):
                lq = -0.5 * math.log(2 * math.pi * vq) - (x - mq) ** 2 / (2 * vq)
                lp = -0.5 * math.log(2 * math.pi * vp) - (x - mp) ** 2 / (2 * vp)
                return math.exp(lq) * (lq - lp)

            ref, _ = integrate.quad(integrand, mq - 40 * math.sqrt(vq), mq + 40 * math.sqrt(vq), epsabs=1e-12, limit=200)
            assert float(kl_univariate(mq, vq, mp, vp)) == pytest.approx(ref, abs=1e-6)

    def test_non_positive_variance(self):
        with pytest.raises(ValueError):
            kl_univariate(0.0, 0.0, 0.0, 1.0)


class TestKlMultivariate:
    def test_weinstein_aronszajn(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((6, 3)), rng.standard_normal((3, 6))
        assert np.linalg.det(np.eye(6) + a @ b) == pytest.approx(np.linalg.det(np.eye(3) + b @ a), abs=1e-10)

    @pytest.mark.parametrize("n,n_feat,r", [(5, 3, 2), (12, 8, 3), (30, 10, 4), (4, 6, 5)])
    def test_lowrank_logdet(self, n, n_feat, r):
        a = np.random.default_rng(n).standard_normal((n, n_feat))
        ref = np.linalg.slogdet(0.3 * np.eye(n) + a @ a.T)[1]
        assert float(logdet_lowrank_plus_diag(a, 0.3)) == pytest.approx(ref, abs=1e-10)

    @pytest.mark.parametrize("n", [3, 10, 30])
    def test_rff_matches_dense(self, n):
        rng = np.random.default_rng(n)
        phi = rng.standard_normal((n, 6)) / np.sqrt(6)
        b = rng.standard_normal((n, 2)) * 0.3
        mu_q, mu_p = rng.standard_normal(n), 0.2 * np.ones(n)
        sq, sp = 0.4, 0.7
        got = float(kl_multivariate_rff(mu_q, mu_p, b, sq, phi, sp))
        ref = dense_gaussian_kl(mu_q, b @ b.T + sq * np.eye(n), mu_p, np.linalg.inv(phi @ phi.T + sp * np.eye(n)))
        assert got == pytest.approx(ref, abs=1e-8)

    def test_rff_zero_case(self):
        n = 4
        got = float(kl_multivariate_rff(np.ones(n), np.ones(n), np.zeros((n, 2)), 1.0, np.zeros((n, 3)), 1.0))
        assert got == pytest.approx(0.0, abs=1e-14)

    def test_kronecker_matches_dense(self):
        rng = np.random.default_rng(3)
        precs, factors = [], []
        for n in (3, 4):
            x = rng.standard_normal((n, n))
            precs.append(torch.from_numpy(x @ x.T + n * np.eye(n)))
            factors.append(torch.from_numpy(np.tril(rng.standard_normal((n, n))) + 2 * np.eye(n)))
        diff = torch.from_numpy(rng.standard_normal((2, 3, 4, 2)))
        got = float(kl_kronecker(diff, [DenseMode(p, f) for p, f in zip(precs, factors)]))
        cov_q = np.kron(*(f.numpy() @ f.numpy().T for f in factors))
        cov_p = np.linalg.inv(np.kron(*(p.numpy() for p in precs)))
        d = diff.numpy()
        ref = sum(dense_gaussian_kl(d[a, :, :, b].reshape(-1), cov_q, np.zeros(12), cov_p) for a in range(2) for b in range(2))
        assert got == pytest.approx(ref, rel=1e-10)

    @pytest.mark.parametrize("space", ["dual-exact", "dual-rff"])
    def test_state_kl_matches_dense(self, space):
        st = state_for("wlr", space, "multivariate", groups=[(0,), (1, 2)])
        m = st.model
        mats = m.side_matrices()
        ref = 0.0
        for k, core in enumerate(m.cores):
            cov_q = dense_cell_cov(st, k)
            prec = np.ones((1, 1))
            for p in m.groups[k]:
                if st.is_lowrank(p):
                    phi = mats[p].detach().numpy()
                    prec = np.kron(prec, phi @ phi.T + st.prior.rff_diag * np.eye(len(phi)))
                else:
                    prec = np.kron(prec, side_operator(m, p) + st.prior.kernel_jitter * np.eye(m.extents[p]))
            cov_p = np.linalg.inv(prec)
            c = core.detach().numpy()
            for a in range(c.shape[0]):
                for b in range(c.shape[-1]):
                    v = c[a, ..., b].reshape(-1)
                    ref += dense_gaussian_kl(v, cov_q, np.zeros_like(v), cov_p)
        for t, lv in zip(m.weights, st.aux_logvar["weights"]):
            ref += float(kl_univariate(t, torch.exp(lv), 0.0, 1.0))
        assert float(st.kl()) == pytest.approx(ref, rel=1e-8)


class TestSampling:
    def test_cholesky_kronecker_identity(self):
        rng = np.random.default_rng(4)
        mats = []
        for _ in range(2):
            x = rng.standard_normal((3, 3))
            mats.append(x @ x.T + 3 * np.eye(3))
        L = kron_cholesky([torch.from_numpy(a) for a in mats]).numpy()
        np.testing.assert_allclose(L @ L.T, np.kron(*mats), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("dims", [(2, 2), (3, 2)])
    def test_empirical_covariance(self, dims):
        rng = np.random.default_rng(sum(dims))
        factors = [torch.from_numpy(np.tril(rng.standard_normal((d, d))) + np.eye(d)) for d in dims]
        mean = torch.zeros(1, *dims, 1, dtype=torch.float64)
        S = 100_000
        draws = kronecker_sample(mean, factors, torch.Generator().manual_seed(0), S).reshape(S, -1).numpy()
        target = np.kron(*(f.numpy() @ f.numpy().T for f in factors))
        prods = draws[:, :, None] * draws[:, None, :]
        emp = prods.mean(0)
        se = prods.std(0, ddof=1) / np.sqrt(S)
        assert np.all(np.abs(emp - target) <= 3 * se + 1e-12)

    def test_zero_factor_returns_mean(self):
        mean = torch.randn(2, 3, 2, dtype=torch.float64)
        out = kronecker_sample(mean, [torch.zeros(3, 3, dtype=torch.float64)], torch.Generator().manual_seed(1))
        assert torch.equal(out, mean)

    def test_single_mode_affine(self):
        mean = torch.randn(1, 4, 1, dtype=torch.float64)
        f = torch.randn(4, 4, dtype=torch.float64)
        out = kronecker_sample(mean, [f], torch.Generator().manual_seed(2))
        z = torch.randn(1, 4, 1, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        torch.testing.assert_close(out[0, :, 0], mean[0, :, 0] + f @ z[0, :, 0], rtol=0, atol=1e-14)

    def test_sample_core_uses_state_factors(self):
        st = state_for("wlr", "dual-exact", "multivariate", groups=[(0,), (1, 2)])
        with torch.no_grad():
            draws = sample_core(st, 1, torch.Generator().manual_seed(3), 20000)
        cell = draws[:, 0, :, :, 0].reshape(20000, -1).numpy()
        emp = np.cov(cell.T)
        np.testing.assert_allclose(emp, dense_cell_cov(st, 1), atol=0.05 * np.abs(dense_cell_cov(st, 1)).max())


MC_CASES = [
    ("wlr", "dual-exact", "univariate", None),
    ("wlr", "dual-rff", "univariate", None),
    ("wlr", "primal", "univariate", None),
    ("ls", "dual-exact", "univariate", None),
    ("ls", "dual-rff", "univariate", None),
    ("vanilla", "dual-exact", "univariate", None),
    ("wlr", "dual-exact", "multivariate", [(0,), (1, 2)]),
    ("wlr", "dual-rff", "multivariate", [(0,), (1, 2)]),
    ("ls", "dual-exact", "multivariate", None),
    ("ls", "dual-rff", "multivariate", [(0, 1), (2,)]),
]


class TestReconstruction:
    @pytest.mark.parametrize("variant,space,family,groups", MC_CASES)
    def test_monte_carlo(self, variant, space, family, groups):
        st = state_for(variant, space, family, groups=groups)
        idx = all_indices((3, 2, 3))[::3]
        y = np.random.default_rng(0).standard_normal(len(idx))
        with torch.no_grad():
            cf = float(expected_loglik(st, idx, y))
        mc, se = mc_expected_loglik(st, idx, y, 100_000, seed=1)
        assert abs(cf - mc) <= 3 * se

    @pytest.mark.parametrize("variant,family", [("wlr", "univariate"), ("ls", "univariate"), ("wlr", "multivariate"), ("ls", "multivariate")])
    def test_deterministic_limit(self, variant, family):
        st = state_for(variant, "dual-exact", family)
        with torch.no_grad():
            for t in list(st.core_logvar) + [t for k in st.aux_logvar for t in st.aux_logvar[k]]:
                t.fill_(-math.inf)
            for t in st.cov_b.values():
                t.zero_()
            for t in st.cov_logd.values():
                t.fill_(-math.inf)
        idx = all_indices((3, 2, 3))
        y = np.random.default_rng(1).standard_normal(len(idx))
        with torch.no_grad():
            f = st.model.predict(idx).numpy()
            got = float(expected_loglik(st, idx, y))
        s2 = st.prior.noise_var
        ref = -np.sum((y - f) ** 2) / (2 * s2) - 0.5 * len(y) * math.log(2 * math.pi * s2)
        assert got == pytest.approx(ref, rel=1e-12)

    def test_scalar_wlr_expansion(self):
        k = 0.7
        m = KftModel((1,), variant="wlr", space="primal", rank=1, side={0: SideInfo(0, [[k]])})
        st = VariationalKft(m, "univariate", prior=PriorHyper(noise_var=1.0))
        mu, mu2, s, s2, y = 0.4, -1.3, 0.2, 0.35, 0.9
        with torch.no_grad():
            m.cores[0].fill_(mu)
            m.weights[0].fill_(mu2)
            st.core_logvar[0].fill_(math.log(s))
            st.aux_logvar["weights"][0].fill_(math.log(s2))
            ef, ef2 = output_moments(st, [[0]])
        expected = y * y - 2 * y * mu2 * mu * k + (mu2**2 + s2) * (mu**2 + s) * k * k
        assert float(y * y - 2 * y * ef + ef2) == pytest.approx(expected, rel=1e-14)
        assert float(recon_wlr_univariate(st, [[0]], [y])) == pytest.approx(-expected / 2 - 0.5 * math.log(2 * math.pi), rel=1e-14)

    def test_bias_only_ls(self):
        m = KftModel((2, 3), variant="ls", space="dual-exact", rank=1, side={0: SideInfo(0, [[0.0], [1.0]])})
        st = VariationalKft(m, "univariate")
        rng = np.random.default_rng(2)
        with torch.no_grad():
            for t in m.scales:
                t.zero_()
            for t in st.aux_logvar["scales"]:
                t.fill_(-math.inf)
            for t, lv in zip(m.biases, st.aux_logvar["biases"]):
                t.copy_(torch.from_numpy(rng.standard_normal(tuple(t.shape))))
                lv.copy_(torch.from_numpy(np.log(rng.uniform(0.1, 0.5, tuple(t.shape)))))
            ef, ef2 = output_moments(st, [[1, 2]])
        b0, b1 = m.biases[0][0, 1, 0].item(), m.biases[1][0, 2, 0].item()
        v0 = math.exp(st.aux_logvar["biases"][0][0, 1, 0].item())
        v1 = math.exp(st.aux_logvar["biases"][1][0, 2, 0].item())
        assert float(ef) == pytest.approx(b0 * b1, rel=1e-14)
        assert float(ef2) == pytest.approx((b0**2 + v0) * (b1**2 + v1), rel=1e-14)
        assert float(recon_ls_univariate(st, [[1, 2]], [0.0])) < 0

    def test_diagonal_factors_reduce_to_univariate(self):
        mv = state_for("wlr", "dual-exact", "multivariate", groups=[(0,), (1, 2)])
        m = mv.model
        uv = VariationalKft(m, "univariate", prior=mv.prior)
        with torch.no_grad():
            for p in range(3):
                mv.cov_b[str(p)].zero_()
            for k, g in enumerate(m.groups):
                var = np.ones(())
                for p in g:
                    var = np.multiply.outer(var, np.exp(2 * mv.cov_logd[str(p)].numpy()))
                uv.core_logvar[k].copy_(torch.from_numpy(np.log(var))[None, ..., None].expand_as(uv.core_logvar[k]))
            for kind in uv.aux_logvar:
                for a, b in zip(uv.aux_logvar[kind], mv.aux_logvar[kind]):
                    a.copy_(b)
        idx = all_indices((3, 2, 3))
        y = np.random.default_rng(3).standard_normal(len(idx))
        with torch.no_grad():
            assert float(recon_wlr_multivariate(mv, idx, y)) == pytest.approx(float(expected_loglik(uv, idx, y)), rel=1e-12)

    def test_second_moment_rank_one_is_product(self):
        rng = np.random.default_rng(5)
        a = [torch.from_numpy(rng.standard_normal((4, 1, 1))) for _ in range(3)]
        w = [torch.from_numpy(rng.uniform(0, 1, (4, 1, 1))) for _ in range(3)]
        got = chain_second_moment(a, w)
        ref = torch.ones(4, dtype=torch.float64)
        for ai, wi in zip(a, w):
            ref = ref * (ai[:, 0, 0] ** 2 + wi[:, 0, 0])
        torch.testing.assert_close(got, ref, rtol=1e-14, atol=0)

    def test_wrong_family(self):
        st = state_for("wlr", "dual-exact", "univariate")
        with pytest.raises(ValueError):
            recon_wlr_multivariate(st, [[0, 0, 0]], [0.0])


class TestElbo:
    def test_kl_weight_linear(self):
        st = state_for("wlr", "dual-exact", "univariate")
        idx = all_indices((3, 2, 3))[:6]
        y = np.zeros(6)
        with torch.no_grad():
            e1 = float(elbo(st, idx, y, n_total=18))
            e2 = float(elbo(st, idx, y, n_total=9))
            kl = float(st.kl())
            rec = float(expected_loglik(st, idx, y))
        assert rec - e1 == pytest.approx(kl * 6 / 18, rel=1e-12)
        assert rec - e2 == pytest.approx(2 * (rec - e1), rel=1e-12)

    def test_prior_equals_posterior_kl_zero(self):
        m = KftModel((3, 2), variant="wlr", space="primal", rank=2)
        st = VariationalKft(m, "univariate", prior=PriorHyper(var=0.5, aux_var=0.5), init_var=0.5)
        with torch.no_grad():
            for t in list(m.cores) + list(m.weights):
                t.zero_()
        assert float(st.kl()) == pytest.approx(0.0, abs=1e-14)

    def test_below_log_marginal_likelihood(self):
        k, y, s2 = 0.8, 1.1, 0.3
        m = KftModel((1,), variant="wlr", space="primal", rank=1, side={0: SideInfo(0, [[k]])})
        st = VariationalKft(m, "univariate", prior=PriorHyper(noise_var=s2), init_var=0.3)
        with torch.no_grad():
            m.cores[0].fill_(0.7)
            m.weights[0].fill_(1.2)
            bound = float(elbo(st, [[0]], [y]))

        def integrand(v2, v):
            return math.exp(-(y - v2 * v * k) ** 2 / (2 * s2) - v * v / 2 - v2 * v2 / 2) / (2 * math.pi * math.sqrt(2 * math.pi * s2))

        marg, _ = integrate.dblquad(integrand, -12, 12, -12, 12, epsabs=1e-12)
        assert bound <= math.log(marg)


def fd_check(state, idx, y, groups, h=1e-5):
    errs = []
    for g in groups:
        loss, _, _ = vi_loss_terms(state, idx, y, 24)
        grads = torch.autograd.grad(loss, g.params)
        fd = []
        with torch.no_grad():
            for p in g.params:
                out = torch.zeros_like(p)
                flat, of = p.view(-1), out.view(-1)
                for i in range(flat.numel()):
                    orig = float(flat[i])
                    flat[i] = orig + h
                    up = float(vi_loss_terms(state, idx, y, 24)[0])
                    flat[i] = orig - h
                    dn = float(vi_loss_terms(state, idx, y, 24)[0])
                    flat[i] = orig
                    of[i] = (up - dn) / (2 * h)
                fd.append(out)
        a = torch.cat([t.reshape(-1) for t in grads])
        b = torch.cat([t.reshape(-1) for t in fd])
        errs.append((g.label, float((a - b).norm() / max(float(b.norm()), 1e-12))))
    return errs


VI_COMBOS = [(v, s, "univariate") for v in ("vanilla", "wlr", "ls") for s in ("primal", "dual-exact", "dual-rff")]
VI_COMBOS += [(v, s, "multivariate") for v in ("vanilla", "wlr", "ls") for s in ("dual-exact", "dual-rff")]


class TestGradients:
    @pytest.mark.parametrize("variant,space,family", VI_COMBOS)
    def test_finite_differences_both_phases(self, variant, space, family):
        st = state_for(variant, space, family, extents=(3, 4, 2), init_var=0.1)
        rng = np.random.default_rng(7)
        idx = all_indices((3, 4, 2))[rng.choice(24, 10, replace=False)]
        y = rng.standard_normal(10)
        means, variances = vi_param_groups(st)
        for label, err in fd_check(st, idx, y, means + variances):
            assert err <= 1e-4, label


def planted_wlr_data(seed=0):
    from kft.data import synth

    s = synth((6, 5, 4), rank=2, kind="informative", noise=0.05, seed=seed, index_effect=0.0)
    return s


class TestViTrain:
    def test_recovers_planted_signal(self):
        s = planted_wlr_data()
        ds = s.dataset
        m = KftModel(ds.extents, variant="wlr", space="dual-exact", rank=2, side=s.side, lengthscale=1.0, seed=0)
        st = VariationalKft(m, "univariate", prior=PriorHyper(noise_var=0.01, var=1.0, aux_var=1.0, aux_mean=1.0), init_var=1e-4)
        vi_train(st, (ds.indices, ds.values), TrainConfig(epochs=15, iterations_per_epoch=60, batch_fraction=0.5, lr=0.03))
        pred = mean_prediction(st, ds.indices)
        r2 = 1 - np.sum((pred - ds.values) ** 2) / np.sum((ds.values - ds.values.mean()) ** 2)
        assert r2 >= 0.9

    def test_variance_phase_keeps_means(self):
        st = state_for("ls", "dual-exact", "multivariate")
        idx = all_indices((3, 2, 3))
        y = np.random.default_rng(0).standard_normal(len(idx))
        means, variances = vi_param_groups(st)
        from kft.train import block_coordinate_descent

        before = [p.detach().clone() for g in means for p in g.params]

        def loss_fn(b):
            b = torch.as_tensor(b)
            return vi_loss_terms(st, torch.as_tensor(idx)[b], torch.as_tensor(y)[b], len(y))

        block_coordinate_descent(variances, loss_fn, len(y), TrainConfig(epochs=2, lr=0.1, batch_fraction=0.5))
        after = [p.detach() for g in means for p in g.params]
        assert all(torch.equal(a, b) for a, b in zip(before, after))
        assert not torch.equal(variances[0].params[0].detach(), torch.zeros(0))

    def test_zero_learning_rate(self):
        st = state_for("wlr", "dual-rff", "univariate")
        before = [p.detach().clone() for p in st.parameters()]
        idx = all_indices((3, 2, 3))
        res = vi_train(st, (idx, np.zeros(len(idx))), TrainConfig(epochs=2, lr=0.0))
        assert all(torch.equal(a, b) for a, b in zip(before, st.parameters()))
        phases = [r.phase for r in res.trace]
        assert phases == ["mean-cores", "mean-aux", "theta"] * 2 + ["var-cores", "var-aux"] * 2

    def test_multivariate_needs_dual(self):
        with pytest.raises(ValueError):
            VariationalKft(make_model("wlr", "primal", (3, 2)), "multivariate")


class TestPredictive:
    def test_zero_variance_equals_mean(self):
        st = state_for("wlr", "dual-exact", "univariate")
        with torch.no_grad():
            for t in list(st.core_logvar) + [t for k in st.aux_logvar for t in st.aux_logvar[k]]:
                t.fill_(-math.inf)
        idx = all_indices((3, 2, 3))
        draws = posterior_predictive(st, idx, 5, seed=0, noise=False)
        np.testing.assert_array_equal(draws, np.broadcast_to(mean_prediction(st, idx), draws.shape))

    def test_sample_mean_converges(self):
        st = state_for("ls", "dual-exact", "multivariate")
        idx = all_indices((3, 2, 3))[:4]
        draws = posterior_predictive(st, idx, 10_000, seed=1)
        with torch.no_grad():
            ef, _ = output_moments(st, idx)
        se = draws.std(0, ddof=1) / np.sqrt(10_000)
        assert np.all(np.abs(draws.mean(0) - ef.numpy()) <= 3 * se)

    def test_deterministic(self):
        st = state_for("wlr", "dual-rff", "univariate")
        idx = all_indices((3, 2, 3))[:5]
        np.testing.assert_array_equal(posterior_predictive(st, idx, 50, 3), posterior_predictive(st, idx, 50, 3))

    def test_quantiles_monotone(self):
        st = state_for("wlr", "dual-exact", "univariate")
        draws = posterior_predictive(st, all_indices((3, 2, 3)), 200, 0)
        q = np.quantile(draws, [0.05, 0.15, 0.25, 0.35, 0.45], axis=0)
        assert np.all(np.diff(q, axis=0) >= 0)


class TestCalibration:
    def test_degenerate_interval(self):
        samples = np.zeros((100, 7))
        rep = calibration(samples, np.arange(1.0, 8.0))
        assert rep.rates == (0.0,) * 5
        assert rep.total == 2.5

    def test_exact_rates_and_eta(self):
        grid = np.linspace(0.0, 1.0, 1001)
        targets = (np.arange(20) + 0.5) / 20
        samples = np.repeat(grid[:, None], 20, axis=1)
        rep = calibration(samples, targets, mean_pred=targets)
        np.testing.assert_allclose(rep.rates, [0.9, 0.7, 0.5, 0.3, 0.1], atol=1e-15)
        assert rep.total == pytest.approx(0.0, abs=1e-14)
        assert rep.eta == pytest.approx(-1.0, abs=1e-14)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            calibration(np.zeros((99, 3)), np.zeros(3))

    def test_self_consistency_small(self):
        rng = np.random.default_rng(0)
        mu = rng.standard_normal(2000)
        samples = mu + rng.standard_normal((500, 2000))
        targets = mu + rng.standard_normal(2000)
        assert calibration(samples, targets).total <= 0.1

    def test_heatmap(self, tmp_path):
        idx = all_indices((2, 2, 2))
        rng = np.random.default_rng(1)
        samples = rng.standard_normal((200, 8))
        targets = np.full(8, 10.0)
        rows = calibration_heatmap(idx, samples, targets)
        assert len(rows) == 4 * 5 and all(r[3] == 0.0 for r in rows)
        write_heatmap_csv(rows, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "mode0_index,mode1_index,alpha,coverage" and len(lines) == 21
        assert coverage(samples, targets).shape == (5, 8)
