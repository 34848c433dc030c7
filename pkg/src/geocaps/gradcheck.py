"""Central finite-difference verification of the autodiff core.

Every check builds a scalar loss from a tensor-graph function, runs one
backward pass, and compares each input gradient against central finite
differences of the same forward function evaluated at float64.  The
finite-difference side never touches ``backward``, so it is an
independent oracle for the reverse-mode rules.

Relative error for a gradient pair (g, g_fd) is
``max|g - g_fd| / max(1, max|g_fd|)``: normalized by the gradient's own
magnitude, absolute for small gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["CheckResult", "fd_gradients", "check_function", "primitive_suite", "composite_suite", "run_suites"]

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self):
        status = "ok" if self.ok else "FAIL"
        return f"{self.name:<28} instances={self.instances:<3} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} {status}"


def fd_gradients(f: Callable[..., float], args: Sequence[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradients of a scalar-valued numpy function."""
    grads = []
    args = [np.array(a, dtype=np.float64) for a in args]
    for k, a in enumerate(args):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*args)
            flat[i] = orig - h
            fm = f(*args)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check_function(
    graph_fn: Callable[..., Tensor],
    args: Sequence[np.ndarray],
    h: float = 1e-6,
) -> float:
    """Max relative error between backward gradients and finite differences.

    ``graph_fn`` maps parameter tensors to a scalar Tensor.  All arguments
    are promoted to float64 leaves.
    """
    params = [T.parameter(np.array(a, dtype=np.float64)) for a in args]
    loss = graph_fn(*params)
    if loss.size != 1:
        raise ValueError("check_function needs a scalar-valued graph function")
    loss.backward()

    def forward(*arrays):
        with T.no_grad():
            consts = [T.constant(a) for a in arrays]
            return float(graph_fn(*consts).data.reshape(()))

    fd = fd_gradients(forward, [p.data for p in params], h=h)
    worst = 0.0
    for p, g_fd in zip(params, fd):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        denom = max(1.0, float(np.abs(g_fd).max()) if g_fd.size else 0.0)
        err = float(np.abs(g - g_fd).max()) / denom if g_fd.size else 0.0
        worst = max(worst, err)
    return worst


def _scalarize(out: Tensor) -> Tensor:
    """Deterministic weighted sum so repeated forward evaluations agree.

    Weights are distinct in magnitude and alternate in sign, so no output
    element is dropped or symmetrically cancelled.
    """
    idx = np.arange(out.size, dtype=np.float64)
    w = (0.5 + idx / max(out.size - 1, 1)) * np.where(idx % 2 == 0, 1.0, -1.0)
    return T.tsum(out * T.constant(w.reshape(out.shape)))


def _away_from_zero(x: np.ndarray, margin: float = 0.15) -> np.ndarray:
    return x + margin * np.sign(x) + np.where(x == 0, margin, 0.0)


def _spread(rng: np.random.Generator, shape) -> np.ndarray:
    """Values with distinct magnitudes so max/relu kinks stay away from FD."""
    x = rng.normal(size=shape)
    jitter = np.linspace(0, 0.37, x.size).reshape(shape)
    return _away_from_zero(x + jitter)


def _run_instances(name: str, tol: float, n: int, seed: int, one: Callable[[np.random.Generator], float]) -> CheckResult:
    worst = 0.0
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        worst = max(worst, one(rng))
    return CheckResult(name, n, worst, tol)


def primitive_suite(instances: int = 20, seed: int = 2024) -> list[CheckResult]:
    """FD checks for every primitive operation of the tensor core."""
    results = []

    def case(name, fn):
        results.append(_run_instances(name, PRIMITIVE_TOL, instances, seed + len(results), fn))

    case("matmul", lambda rng: check_function(
        lambda a, b: _scalarize(T.matmul(a, b)),
        [rng.normal(size=(4, 3)), rng.normal(size=(3, 5))]))
    case("matmul_batched", lambda rng: check_function(
        lambda a, b: _scalarize(T.matmul(a, b)),
        [rng.normal(size=(2, 3, 4, 3)), rng.normal(size=(3, 2))]))
    case("add_broadcast", lambda rng: check_function(
        lambda a, b: _scalarize(a + b),
        [rng.normal(size=(4, 1, 3)), rng.normal(size=(5, 1))]))
    case("mul_broadcast", lambda rng: check_function(
        lambda a, b: _scalarize(a * b),
        [rng.normal(size=(2, 4)), rng.normal(size=(3, 2, 4))]))
    case("div", lambda rng: check_function(
        lambda a, b: _scalarize(a / b),
        [rng.normal(size=(3, 4)), _away_from_zero(rng.normal(size=(3, 4)))]))
    case("relu", lambda rng: check_function(
        lambda a: _scalarize(T.relu(a)),
        [_spread(rng, (6, 5))]))
    case("softmax", lambda rng: check_function(
        lambda a: _scalarize(T.softmax(a, axis=-1)),
        [rng.normal(size=(4, 6))]))
    case("max_along", lambda rng: check_function(
        lambda a: _scalarize(T.max_along(a, axis=1)),
        [_spread(rng, (3, 7, 2))]))
    case("sum", lambda rng: check_function(
        lambda a: _scalarize(T.tsum(a, axis=1)),
        [rng.normal(size=(3, 5, 2))]))
    case("mean", lambda rng: check_function(
        lambda a: _scalarize(T.tmean(a, axis=-1)),
        [rng.normal(size=(4, 6))]))
    case("variance", lambda rng: check_function(
        lambda a: _scalarize(T.tvar(a, axis=0)),
        [rng.normal(size=(5, 3))]))
    case("concat", lambda rng: check_function(
        lambda a, b: _scalarize(T.concat([a, b], axis=1)),
        [rng.normal(size=(2, 3)), rng.normal(size=(2, 4))]))
    case("stack", lambda rng: check_function(
        lambda a, b: _scalarize(T.stack([a, b], axis=0)),
        [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))]))
    case("getitem", lambda rng: check_function(
        lambda a: _scalarize(a[..., 1:3]),
        [rng.normal(size=(4, 5))]))
    case("take", lambda rng: check_function(
        lambda a: _scalarize(T.take(a, np.array([0, 2, 2, 1]), axis=1)),
        [rng.normal(size=(3, 4))]))
    case("reshape_transpose", lambda rng: check_function(
        lambda a: _scalarize(T.transpose(T.reshape(a, (3, 4)), (1, 0))),
        [rng.normal(size=(2, 6))]))
    case("square", lambda rng: check_function(
        lambda a: _scalarize(T.square(a)),
        [rng.normal(size=(4, 3))]))
    case("sqrt", lambda rng: check_function(
        lambda a: _scalarize(T.sqrt(a)),
        [rng.uniform(0.5, 2.0, size=(4, 3))]))
    case("exp", lambda rng: check_function(
        lambda a: _scalarize(T.texp(a)),
        [rng.normal(size=(3, 3))]))
    case("log", lambda rng: check_function(
        lambda a: _scalarize(T.tlog(a)),
        [rng.uniform(0.5, 3.0, size=(3, 3))]))
    case("pow", lambda rng: check_function(
        lambda a: _scalarize(a ** 3.0),
        [_away_from_zero(rng.normal(size=(3, 4)))]))
    case("normalize", lambda rng: check_function(
        lambda a: _scalarize(T.normalize(a, axis=-1)),
        [_away_from_zero(rng.normal(size=(4, 5)))]))
    case("scalar_arith", lambda rng: check_function(
        lambda a: _scalarize((2.5 * a - 1.0) / 3.0 + a * a),
        [rng.normal(size=(3, 4))]))
    return results


def composite_suite(instances: int = 20, seed: int = 7100) -> list[CheckResult]:
    """FD checks for the domain compositions built from the primitives."""
    from . import diffgeo as DG
    from . import nets
    from .nets import NetSpec
    from .objects import d_caps_graph, object_loss_graph  # noqa: F401  (used below)

    results = []

    def case(name, fn):
        results.append(_run_instances(name, COMPOSITE_TOL, instances, seed + len(results), fn))

    def res_case(rng):
        w1 = rng.normal(size=(5, 5)) * 0.5
        w2 = rng.normal(size=(5, 5)) * 0.5
        x = rng.normal(size=(4, 5))
        return check_function(
            lambda xx, a, b: _scalarize(nets.res_block(xx, a, b)), [x, w1, w2])

    case("res_block", res_case)

    def pose_chain_case(rng):
        a = np.concatenate([rng.normal(size=3), _unit_quat(rng)])
        b = np.concatenate([rng.normal(size=3), _unit_quat(rng)])
        pts = rng.normal(size=(6, 3))

        def fn(pa, pb, x):
            comp = DG.tpose_compose(pa, DG.tpose_inverse(pb))
            return _scalarize(DG.tpose_apply(comp, x))

        return check_function(fn, [a, b, pts])

    case("pose_compose_apply", pose_chain_case)

    def vote_pose_case(rng):
        spec_e = NetSpec(in_dim=3, width=8, res_blocks=1, out_dim=None)
        spec_p = NetSpec(in_dim=8, width=8, res_blocks=1, out_dim=7)
        params = nets.init_mlp(spec_e, rng, prefix="qe", dtype=np.float64)
        params.update(nets.init_mlp(spec_p, rng, prefix="qp", dtype=np.float64))
        names = sorted(params)
        x = rng.normal(size=(1, 1, 1, 5, 3))
        weights = rng.uniform(0.1, 1.0, size=(1, 1, 1, 5, 1))

        def fn(*tensors):
            p = dict(zip(names, tensors))
            emb = nets.apply_mlp(T.constant(x), p, spec_e, prefix="qe")
            pooled = T.max_along(emb * T.constant(weights), axis=-2)
            vote = nets.apply_mlp(pooled, p, spec_p, prefix="qp")
            return _scalarize(nets.split_pose_vote(vote))

        return check_function(fn, [params[n].data for n in names])

    case("pose_voting_net", vote_pose_case)

    def fold_case(rng):
        spec = NetSpec(in_dim=6, width=8, res_blocks=1, out_dim=3)
        params = nets.init_mlp(spec, rng, prefix="g", dtype=np.float64)
        names = sorted(params)
        feat = rng.normal(size=4)
        grid = rng.uniform(-0.5, 0.5, size=(9, 2))

        def fn(f, *tensors):
            p = dict(zip(names, tensors))
            return _scalarize(nets.fold_points(f, T.constant(grid), p, spec, prefix="g"))

        return check_function(fn, [feat] + [params[n].data for n in names])

    case("fold_decoder", fold_case)

    def consensus_case(rng):
        votes = rng.normal(size=(3, 4, 6))
        eps = rng.normal(size=(3, 6))

        def fn(v):
            mu, sigma = nets.consensus_moments(v, axis=1)
            return _scalarize(mu + sigma * T.constant(eps))

        return check_function(fn, [votes])

    case("consensus_percept", consensus_case)

    def d_caps_case(rng):
        u = np.concatenate([rng.normal(size=3), _unit_quat(rng), rng.normal(size=4)])
        t = np.concatenate([rng.normal(size=3), _unit_quat(rng), rng.normal(size=4)])
        return check_function(lambda a: d_caps_graph(a, T.constant(t[None]))[0], [u[None]])

    case("capsule_distance", d_caps_case)

    def chamfer_case(rng):
        x = rng.normal(size=(7, 3))
        y = rng.normal(size=(5, 3))
        return check_function(lambda yy: DG.chamfer_sq_graph(x, yy), [y])

    case("chamfer", chamfer_case)

    def object_loss_case(rng):
        return _object_loss_check(rng)

    case("object_loss", object_loss_case)
    return results


def _unit_quat(rng: np.random.Generator) -> np.ndarray:
    from .geometry import quat_canonicalize

    return quat_canonicalize(rng.normal(size=4))


def _object_loss_check(rng: np.random.Generator) -> float:
    """End-to-end object loss: decode object capsule, pose parts, compare
    against constant targets plus a Chamfer term."""
    from .config import desk_config
    from .objects import ObjectModel, object_loss_graph
    from .parts import PartModel

    cfg = desk_config()
    cfg.parts.feature_dim = 3
    cfg.parts.n_parts = 2
    cfg.parts.decoder_points = 9
    cfg.parts.net_width = 6
    cfg.parts.net_res_blocks = 1
    cfg.parts.fold_width = 6
    cfg.parts.fold_res_blocks = 1
    cfg.objects.feature_dim = 5
    cfg.objects.net_width = 6
    cfg.objects.net_res_blocks = 1
    cfg.objects.decoder_width = 6
    cfg.objects.decoder_res_blocks = 1
    part_model = PartModel(cfg.parts, rng, dtype=np.float64)
    dec = ObjectModel(cfg.objects, cfg.parts, rng, dtype=np.float64)
    names = sorted(n for n in dec.params if n.startswith("dec"))
    h_q = np.concatenate([rng.normal(size=3) * 0.1, _unit_quat(rng)])
    h_f = rng.normal(size=5)
    X = rng.normal(size=(1, 12, 3))
    targets = np.concatenate(
        [rng.normal(size=(1, 2, 3)) * 0.3,
         np.stack([[_unit_quat(rng) for _ in range(2)]])[0][None],
         rng.normal(size=(1, 2, 3))], axis=-1)

    def fn(hf, *tensors):
        dec_params = dict(zip(names, tensors))
        capsules = dec.decode(T.constant(h_q[None]), T.expand_dims(hf, 0), params=dec_params)
        loss_t, parts_term, chamfer_term = object_loss_graph(
            X, capsules, targets, part_model, lam=0.01)
        return loss_t

    return check_function(fn, [h_f] + [dec.params[n].data for n in names])


def run_suites(instances: int = 20, seed: int = 2024) -> list[CheckResult]:
    return primitive_suite(instances, seed) + composite_suite(instances, seed + 1000)
