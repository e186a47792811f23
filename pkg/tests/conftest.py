import pytest

from swingbspde.model import LatticeModel, ModelParams, TimeGrid, VolumeGrid, build_model
from swingbspde.solver import marginal_left, solve_dp


def gbm(N, S0=100.0, K=100.0, sigma=0.3, r=0.0, T=0.5):
    return build_model(ModelParams("gbm-call", S0=S0, K=K, sigma=sigma, r=r), TimeGrid(T, N))


def deterministic(N, tstar=0.5, T=1.0):
    return build_model(ModelParams("indicator-deterministic", tstar=tstar), TimeGrid(T, N))


def exponential(N, lam=1.0, T=1.0):
    return build_model(ModelParams("indicator-exponential", lam=lam), TimeGrid(T, N))


def constant(N, S0=3.0, T=1.0):
    return build_model(ModelParams("constant", S0=S0), TimeGrid(T, N))


def solved(model, L, M=None):
    vg = VolumeGrid(L, model.time_grid, M)
    J = solve_dp(model, vg)
    return vg, J, marginal_left(J)


def random_lattice(rng, N, max_nodes=3, T=1.0):
    """Random Markov chain with one root node and sparse zero payoffs."""
    sizes = [1] + [int(rng.integers(1, max_nodes + 1)) for _ in range(N)]
    X, succ, prob, labels = [], [], [], []
    for i in range(N + 1):
        X.append(rng.uniform(0.0, 5.0, sizes[i]) * (rng.random(sizes[i]) < 0.8))
        labels.append(tuple(str(k) for k in range(sizes[i])))
        if i < N:
            b = int(rng.integers(1, 3))
            succ.append(rng.integers(0, sizes[i + 1], (sizes[i], b)))
            p = rng.uniform(0.1, 1.0, (sizes[i], b))
            prob.append(p / p.sum(axis=1, keepdims=True))
    return LatticeModel(TimeGrid(T, N), tuple(labels), tuple(X), tuple(succ), tuple(prob), name="random")


# the shipped models at desk scale, with their rate caps
SHIPPED = {
    "gbm-toy": (lambda: gbm(50), 2.0),
    "indicator-deterministic": (lambda: deterministic(200), 2.0),
    "indicator-exponential": (lambda: exponential(200), 1.0),
    "constant": (lambda: constant(40), 1.5),
}


@pytest.fixture(params=sorted(SHIPPED))
def shipped(request):
    build, L = SHIPPED[request.param]
    model = build()
    vg, J, D = solved(model, L)
    return model, vg, J, D
