import numpy as np

from ms2edge.autograd import Graph, Var, value
from oracles import central_diff


def vjp_error(fn, inputs, seed=0, eps=1e-6, wrt=None):
    """Relative error ||analytic - numeric|| / ||numeric|| of d<fn(x), r>/dx for each input.

    fn maps a list of Vars to a Var; inputs are promoted to float64 and every
    coordinate is differenced.
    """
    rng = np.random.default_rng(seed)
    xs = [Var(np.asarray(x, np.float64), requires_grad=True) for x in inputs]
    with Graph() as g:
        out = fn(xs)
    r = rng.standard_normal(out.shape)
    g.backward(out, seed=r)
    errs = []
    for k, x in enumerate(xs):
        if wrt is not None and k not in wrt:
            continue

        def f(v, k=k):
            vals = [Var(a.data) for a in xs]
            vals[k] = Var(v)
            return float((np.asarray(value(fn(vals)), np.float64) * r).sum())

        num = central_diff(f, x.data, eps)
        ana = np.zeros_like(x.data) if x.grad is None else x.grad
        errs.append(float(np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12)))
    return errs
