"""Independent correctness checks of the sampler shared by unit and acceptance tests."""

import numpy as np
from scipy import stats

from mixedmds import model, sampler


def batch_means_se(x, n_batches=50):
    """Monte Carlo standard error of the mean of a correlated series, per column."""
    x = np.asarray(x, dtype=float)
    size = x.shape[0] // n_batches
    means = x[: size * n_batches].reshape((n_batches, size) + x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def oracle_hyperparameters(J=2, **over):
    """Hyperparameters with finite higher moments, so Monte Carlo bands are meaningful."""
    a_w, b_w = model.solve_weight_hyperparams(1.0, 0.1)
    fields = dict(a_w=a_w, b_w=b_w, nu=10.0, mu_sigma2=[0.5] * J, var_sigma2=[0.02] * J,
                  H_init=2, H_max=2,
                  proposal_scale_init={"eta": 0.5, "sigma2": 0.3, "w_ind": 0.3, "w_group": 0.3})
    fields.update(over)
    return model.Hyperparameters(**fields)


def random_state(rng, S=4, n=(3, 2), H=3):
    group = np.repeat(np.arange(len(n)), n)
    return model.ModelState(
        eta=rng.normal(size=(S, H)), w_group=rng.uniform(0.5, 2, len(n)), w_ind=rng.uniform(0.5, 2, (group.size, H)),
        phi=rng.uniform(0.2, 3, (S, H)), mgp_delta=rng.uniform(0.3, 3, H), sigma2=rng.uniform(0.05, 0.5, len(n)),
        group=group,
    )


def gibbs_ratio_errors(n_pairs=100, seed=0):
    """Largest |conditional log ratio - joint log ratio| per conjugate block.

    For random states A and B that differ only in one Gibbs block, the
    analytic full conditional must reproduce the joint density ratio.
    """
    rng = np.random.default_rng(seed)
    errors = {"mgp_delta1": 0.0, "mgp_deltah": 0.0, "phi": 0.0}
    for _ in range(n_pairs):
        A = random_state(rng)
        data = model.DistanceDataset(d=np.maximum(model.simulate_distances(A, rng), 1e-9), group=A.group, S=A.S)
        hp = model.Hyperparameters(mu_sigma2=[0.2, 0.3], var_sigma2=[0.1, 0.2]).resolve(data)
        for h, name in ((0, "mgp_delta1"), (int(rng.integers(1, A.H)), "mgp_deltah")):
            B = A.copy()
            B.mgp_delta[h] = rng.uniform(0.1, 5)
            shape, rate = sampler.mgp_delta_conditional(A, hp, h)
            shape_b, rate_b = sampler.mgp_delta_conditional(B, hp, h)
            assert (shape, rate) == (shape_b, rate_b)
            cond = (stats.gamma.logpdf(B.mgp_delta[h], shape, scale=1 / rate)
                    - stats.gamma.logpdf(A.mgp_delta[h], shape, scale=1 / rate))
            joint = model.log_joint(B, data, hp) - model.log_joint(A, data, hp)
            errors[name] = max(errors[name], abs(cond - joint))
        B = A.copy()
        B.phi = rng.uniform(0.1, 5, A.phi.shape)
        shape, rate = sampler.phi_conditional(A, hp)
        cond = np.sum(stats.gamma.logpdf(B.phi, shape, scale=1 / rate) - stats.gamma.logpdf(A.phi, shape, scale=1 / rate))
        joint = model.log_joint(B, data, hp) - model.log_joint(A, data, hp)
        errors["phi"] = max(errors["phi"], abs(cond - joint))
    return errors


def prior_moments(hp, S=3, n=(2, 2)):
    """Exact prior means and variances of the checked quantities."""
    J = len(n)
    w_mean, w_var = model.weight_moments(hp.a_w, hp.b_w, hp.weight_prior)
    shape, scale = hp.noise_prior
    return {
        "mgp_delta": (np.array([hp.a1, hp.a2]), np.array([hp.a1, hp.a2])),
        "phi": (np.ones((S, 2)), np.full((S, 2), 2.0 / hp.nu)),
        "sigma2": (scale / (shape - 1), scale**2 / ((shape - 1) ** 2 * (shape - 2))),
        "w_group": (np.full(J, w_mean), np.full(J, w_var)),
        "w_ind": (np.full((sum(n), 2), w_mean), np.full((sum(n), 2), w_var)),
    }


def prior_run_zscores(n_iter=20_000, seed=0, S=3, n=(2, 2)):
    """z-scores of sampled prior means and variances against their exact values.

    Runs the sampler with the likelihood switched off, so it targets the prior.
    """
    group = np.repeat(np.arange(len(n)), n)
    d = np.ones((group.size, model.n_pairs(S)))
    data = model.DistanceDataset(d=d, group=group, S=S)
    hp = oracle_hyperparameters(J=len(n))
    chain = sampler.run_chain(data, hp, schedule=sampler.Schedule(n_iter, 1000, 1), seed=seed,
                              use_likelihood=False, adapt_proposals=False)
    exact = prior_moments(hp.resolve(data), S, n)
    out = {}
    for name, (mean, var) in exact.items():
        x = chain.stack(name)
        z_mean = (x.mean(axis=0) - mean) / batch_means_se(x)
        # variance via the mean of squared deviations from the exact mean
        sq = (x - mean) ** 2
        z_var = (sq.mean(axis=0) - var) / batch_means_se(sq)
        out[name] = (np.atleast_1d(z_mean), np.atleast_1d(z_var))
    return out


def geweke_functionals(state):
    """Twenty bounded-moment scalar functions of a state (S=3, H=2, n=(2, 1))."""
    return np.concatenate([
        np.log(state.mgp_delta),
        np.log(state.phi).ravel(),
        np.log(state.sigma2),
        np.log(state.w_group),
        np.log(state.w_ind).ravel(),
        np.log1p(state.eta[[0, 1], [0, 1]] ** 2),
    ])


def geweke_zscores(n_marginal=20_000, n_successive=40_000, seed=0):
    """Joint-distribution test: prior-then-data draws versus alternating
    sampler transitions and data regeneration."""
    rng = np.random.default_rng(seed)
    S, n, H = 3, (2, 1), 2
    group = np.repeat(np.arange(len(n)), n)
    hp = oracle_hyperparameters(J=len(n))
    dummy = model.DistanceDataset(d=np.ones((group.size, model.n_pairs(S))), group=group, S=S)
    hp = hp.resolve(dummy)

    def simulate(state):
        d = model.simulate_distances(state, rng)
        return model.DistanceDataset(d=np.maximum(d, 1e-300), group=group, S=S)

    marginal = np.stack([geweke_functionals(model.sample_prior(S, group, H, hp, rng)) for _ in range(n_marginal)])

    state = model.sample_prior(S, group, H, hp, rng)
    kernel = sampler.Sampler(simulate(state), hp, state, rng, adapt_proposals=False)
    successive = np.empty((n_successive, marginal.shape[1]))
    for t in range(n_successive):
        kernel.sweep()
        kernel.set_data(simulate(kernel.state))
        successive[t] = geweke_functionals(kernel.state)
    se = np.sqrt(marginal.var(axis=0, ddof=1) / n_marginal + batch_means_se(successive) ** 2)
    return (marginal.mean(axis=0) - successive.mean(axis=0)) / se
