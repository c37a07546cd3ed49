"""Shared test oracles."""
import numpy as np

from dasbs.approximators import BregmanDivergence, DenseMultiplier
from dasbs.state_space import SpaceSpec


def random_dense_problem(seed, spec=SpaceSpec(3, 4), hidden=(8, 6), batch=5):
    """Dense multiplier with every layer randomised plus a regression batch."""
    r = np.random.default_rng(seed)
    model = DenseMultiplier(spec, hidden, True, n_fourier=4, seed=seed)
    for k, v in model.params.items():
        model.params[k] = r.normal(scale=0.5, size=v.shape)
    x = r.integers(0, spec.n_states, (batch, spec.dim))
    t = r.random(batch)
    targets = np.exp(r.normal(size=(batch, spec.dim, spec.n_states)))
    weights = r.random(batch)
    return model, t, x, targets, weights


def gradient_probes(model, t, x, targets, weights, probes, rng, h=1e-5,
                    divergence=BregmanDivergence()):
    """Relative errors of analytic vs central-difference partial derivatives.

    Relative error uses max(|analytic|, |numeric|, 1e-6) as the denominator so
    vanishing partials are compared in absolute terms.
    """
    _, grads, _ = model.loss_and_grad(t, x, targets, weights, divergence)
    names = list(model.params)
    errs = []
    for _ in range(probes):
        name = names[rng.integers(len(names))]
        p = model.params[name]
        idx = tuple(rng.integers(s) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        lp = model.loss_and_grad(t, x, targets, weights, divergence)[0]
        p[idx] = old - h
        lm = model.loss_and_grad(t, x, targets, weights, divergence)[0]
        p[idx] = old
        num = (lp - lm) / (2 * h)
        ana = grads[name][idx]
        errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return np.array(errs)
