"""Self-verification: solver cross-checks and finite-difference gradient checks.

Everything here returns plain CheckResult records so the command line can
print one line per check and the test suite can assert on them. The
perturbed maximizer layer is excluded from finite differencing on purpose:
its forward pass is piecewise constant in the activations for a fixed
sample set, so difference quotients are 0 or huge regardless of
correctness. Its gradient estimator is instead validated against
common-random-number finite differences of the solver itself
(jacobian_perturbed vs solve_perturbed).
"""

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import matchers
from .autodiff import BatchNormState, Tensor, backward


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class GradCheckReport:
    passed: bool
    elements: int
    worst_err: float
    worst_tol: float
    worst_label: str

    @property
    def detail(self):
        return (f"{self.elements} elements, worst |analytic-fd| {self.worst_err:.3g} "
                f"vs allowed {self.worst_tol:.3g} at {self.worst_label}")


def gradcheck(fn, tensors, rel_tol=1e-3, abs_floor=1e-6, step=1e-4, kink_guard=None):
    """Central-difference check of d fn() / d tensor for every element.

    ``fn`` must rebuild its graph from the given tensors on every call and
    return a scalar Tensor. ``kink_guard(tensor, index)`` may return True
    to skip an element sitting too close to a non-differentiable point.
    Passing needs |analytic - fd| <= abs_floor + rel_tol*max(|analytic|,|fd|)
    everywhere.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros(t.data.shape)
                for t in tensors]

    checked = 0
    worst = GradCheckReport(True, 0, 0.0, np.inf, "")
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        an = analytic[ti].reshape(-1)
        for i in range(flat.size):
            if kink_guard is not None and kink_guard(ti, t, i):
                continue
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            err = abs(an[i] - fd)
            tol = abs_floor + rel_tol * max(abs(an[i]), abs(fd))
            if err > tol:
                # A kink inside the stencil makes the wide difference lie even
                # when the analytic gradient is right; shrinking the step moves
                # the stencil off the kink, while a genuinely wrong gradient
                # keeps disagreeing at every step size.
                for retry in (step / 10.0, step / 100.0):
                    flat[i] = orig + retry
                    up = float(fn().data)
                    flat[i] = orig - retry
                    down = float(fn().data)
                    flat[i] = orig
                    fd = (up - down) / (2.0 * retry)
                    err = abs(an[i] - fd)
                    tol = abs_floor + rel_tol * max(abs(an[i]), abs(fd))
                    if err <= tol:
                        break
            checked += 1
            if err > tol and (worst.passed or err - tol > worst.worst_err - worst.worst_tol):
                worst = GradCheckReport(False, 0, err, tol,
                                        f"tensor {ti} ({t.name or 'unnamed'}) elem {i}")
            elif worst.passed and err > worst.worst_err:
                worst = GradCheckReport(True, 0, err, tol,
                                        f"tensor {ti} ({t.name or 'unnamed'}) elem {i}")
    worst.elements = checked
    return worst


# ---------------------------------------------------------------------
# solver checks
# ---------------------------------------------------------------------

def _random_problem(rng, k_max=8, eps_range=(0.3, 4.0)):
    k = int(rng.integers(1, k_max + 1))
    return matchers.MatchProblem(
        rng.standard_normal(k) * 2.0,
        float(rng.standard_normal() * 2.0),
        float(np.exp(rng.uniform(np.log(eps_range[0]), np.log(eps_range[1])))))


def _tie_problem(rng, kind):
    """Instances with exact ties: margin==best activation, duplicate best, or both."""
    k = int(rng.integers(2, 9))
    a = rng.standard_normal(k) * 2.0
    i, j = rng.choice(k, size=2, replace=False)
    if kind % 3 == 0:
        mu = float(a.max())
    elif kind % 3 == 1:
        a[i] = a[j] = a.max() + 1.0
        mu = float(rng.standard_normal() * 2.0)
    else:
        a[i] = a[j] = a.max() + 1.0
        mu = float(a[i])
    return matchers.MatchProblem(a, mu, 1.0)


def check_exact_vs_brute(seed=0, instances=1000, tie_instances=50, solve_fn=None):
    """solve_fn (default solve_exact) must match brute_force_vertices exactly."""
    solve_fn = solve_fn or matchers.solve_exact
    rng = np.random.default_rng(seed)
    problems = [_random_problem(rng) for _ in range(instances)]
    problems += [_tie_problem(rng, t) for t in range(tie_instances)]
    for n, prob in enumerate(problems):
        got = solve_fn(prob).as_vector()
        want = matchers.brute_force_vertices(prob).as_vector()
        if not np.array_equal(got, want):
            return CheckResult("exact-vs-brute", False,
                               f"instance {n}: got {got}, brute force {want}")
    return CheckResult("exact-vs-brute", True,
                       f"{len(problems)} instances ({tie_instances} with exact ties)")


def check_entropy_closed_form(seed=1, instances=100, tol=1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        prob = _random_problem(rng)
        diff = np.abs(matchers.solve_entropy(prob).as_vector()
                      - matchers.numeric_solve_entropy(prob).as_vector()).max()
        worst = max(worst, diff)
    return CheckResult("entropy-closed-form", worst <= tol,
                       f"{instances} instances, worst coordinate diff {worst:.3g} (tol {tol})")


def check_entropy_jacobian(seed=2, instances=20, tol=1e-6, step=1e-5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        prob = _random_problem(rng)
        jac = matchers.jacobian_entropy(prob)
        fd = np.zeros_like(jac)
        for i in range(prob.k):
            up = prob.a.copy()
            up[i] += step
            down = prob.a.copy()
            down[i] -= step
            pp = matchers.solve_entropy(matchers.MatchProblem(up, prob.mu, prob.eps)).p
            pm = matchers.solve_entropy(matchers.MatchProblem(down, prob.mu, prob.eps)).p
            fd[i] = (pp - pm) / (2.0 * step)
        worst = max(worst, float(np.abs(jac - fd).max()))
    return CheckResult("entropy-jacobian", worst <= tol,
                       f"{instances} instances, worst entry diff {worst:.3g} (tol {tol})")


def check_perturbed_jacobian(seed=3, samples=1_000_000, tol=5e-2, step=1e-2):
    """Sampled Jacobian vs finite differences of the sampled solver.

    Common random numbers: every solve under the same config reuses one
    Philox stream, so the difference quotient is low-variance even though
    each single solve is a step function of the activations.
    """
    rng = np.random.default_rng(seed)
    prob = _random_problem(rng, eps_range=(0.8, 1.5))
    cfg = matchers.PerturbedConfig(samples=samples, seed=seed)
    jac = matchers.jacobian_perturbed(prob, cfg)
    fd = np.zeros_like(jac)
    for i in range(prob.k):
        up = prob.a.copy()
        up[i] += step
        down = prob.a.copy()
        down[i] -= step
        pp = matchers.solve_perturbed(matchers.MatchProblem(up, prob.mu, prob.eps), cfg).p
        pm = matchers.solve_perturbed(matchers.MatchProblem(down, prob.mu, prob.eps), cfg).p
        fd[i] = (pp - pm) / (2.0 * step)
    worst = float(np.abs(jac - fd).max())
    return CheckResult("perturbed-jacobian", worst <= tol,
                       f"K={prob.k}, {samples} samples, worst entry diff {worst:.3g} (tol {tol})")


def check_temperature_limit(seed=4, instances=500, eps=50.0, gap=0.2, mass=0.99):
    """At high temperature the relaxation concentrates on the exact vertex."""
    rng = np.random.default_rng(seed)
    min_mass = 1.0
    for n in range(instances):
        while True:
            k = int(rng.integers(1, 9))
            a = rng.standard_normal(k) * 1.5
            mu = float(rng.standard_normal() * 1.5)
            v = np.sort(np.concatenate([a, [mu]]))
            if v.size == 1 or v[-1] - v[-2] >= gap:
                break
        prob = matchers.MatchProblem(a, mu, eps)
        soft = matchers.solve_entropy(prob).as_vector()
        hard = matchers.solve_exact(prob).as_vector()
        if int(soft.argmax()) != int(hard.argmax()):
            return CheckResult("temperature-limit", False,
                               f"instance {n}: argmax {soft.argmax()} vs vertex {hard.argmax()}")
        min_mass = min(min_mass, float(soft.max()))
    return CheckResult("temperature-limit", min_mass >= mass,
                       f"{instances} instances with gap >= {gap}, "
                       f"smallest top mass {min_mass:.5f} (need >= {mass})")


def check_order_preservation(seed=5, instances=1000, epsilon_num=1e-5):
    """Nonzero entries of relu(bn(a)) rank exactly like solve_entropy's p.

    bn uses one scalar (gamma, beta) pair with gamma > 0 and the batch
    statistics of the vector itself; the margin fed to solve_entropy is
    the threshold that bn implies, mean - beta * std / gamma.
    """
    rng = np.random.default_rng(seed)
    for n in range(instances):
        k = int(rng.integers(2, 9))
        a = rng.standard_normal(k) * 2.0
        gamma = float(0.1 + 1.9 * rng.random())
        beta = float(rng.standard_normal())
        mean = a.mean()
        std = np.sqrt(a.var() + epsilon_num)
        bn_out = np.maximum(gamma * (a - mean) / std + beta, 0.0)
        mu = float(mean - beta * std / gamma)
        soft = matchers.solve_entropy(matchers.MatchProblem(a, mu, 1.0)).p
        pos = np.nonzero(bn_out > 0)[0]
        if not np.array_equal(pos[np.argsort(bn_out[pos], kind="stable")],
                              pos[np.argsort(soft[pos], kind="stable")]):
            return CheckResult("order-preservation", False,
                               f"instance {n}: a={a}, gamma={gamma}, beta={beta}")
    return CheckResult("order-preservation", True,
                       f"{instances} activation vectors, scalar-BN thresholds")


def check_bn_relu_approximation(seed=6, instances=200):
    """Informational: L1 gap between the BN-ReLU surrogate and solve_entropy."""
    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(instances):
        k = int(rng.integers(2, 9))
        a = rng.standard_normal(k) * 2.0
        mu = float(rng.standard_normal())
        approx, _ = matchers.bn_relu_normalize(np.maximum(a - mu, 0.0))
        soft = matchers.solve_entropy(matchers.MatchProblem(a, mu, 1.0)).p
        soft_sum = soft.sum()
        soft = soft / soft_sum if soft_sum > 0 else soft
        gaps.append(float(np.abs(approx - soft).sum()))
    gaps = np.asarray(gaps)
    return CheckResult("bn-relu-approximation", True,
                       f"normalized L1 gap mean {gaps.mean():.3f}, "
                       f"max {gaps.max():.3f} over {instances} instances (logged, not asserted)")


def run_solver_checks(seed=0, solve_fn=None, quick=False):
    """All solver cross-checks; ``quick`` shrinks the sampled-Jacobian run."""
    return [
        check_exact_vs_brute(seed, solve_fn=solve_fn),
        check_entropy_closed_form(seed + 1),
        check_entropy_jacobian(seed + 2),
        check_perturbed_jacobian(seed + 3, samples=100_000 if quick else 1_000_000),
        check_temperature_limit(seed + 4),
        check_order_preservation(seed + 5),
        check_bn_relu_approximation(seed + 6),
    ]


# ---------------------------------------------------------------------
# gradient checks, op by op
# ---------------------------------------------------------------------

def _relu_guard(ti, t, i, margin=1e-3):
    return abs(t.data.reshape(-1)[i]) < margin


def _scalarize(out, probe_seed):
    """Contract the output with a probe that is fixed per check instance.

    The probe must not change between the analytic pass and the many
    finite-difference re-evaluations, so it is redrawn from its own seed
    on every call.
    """
    probe = Tensor(np.random.default_rng(probe_seed).standard_normal(out.data.shape))
    return ad.tensor_sum(ad.mul(out, probe))


def _op_cases(seed):
    """(name, instance-builder) pairs; each builder returns (fn, tensors, guard)."""
    def tensor(rng, shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    def probe_seed(rng):
        return int(rng.integers(2 ** 32))

    def case_add(rng):
        a = tensor(rng, (2, 3, 2))
        b = tensor(rng, (3, 1))
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.add(a, b), ps)), [a, b], None

    def case_mul(rng):
        a = tensor(rng, (2, 4))
        b = tensor(rng, (2, 4))
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.mul(a, b), ps)), [a, b], None

    def case_scalar_mul(rng):
        a = tensor(rng, (3, 3))
        c = float(rng.standard_normal())
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.scalar_mul(a, c), ps)), [a], None

    def case_relu(rng):
        a = tensor(rng, (3, 4))
        a.data[np.abs(a.data) < 5e-3] += 0.01
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.relu(a), ps)), [a], _relu_guard

    def case_concat(rng):
        a = tensor(rng, (2, 2, 3, 3))
        b = tensor(rng, (2, 3, 3, 3))
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.concat([a, b], axis=1), ps)), [a, b], None

    def case_reshape(rng):
        a = tensor(rng, (2, 6))
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.reshape(a, (3, 4)), ps)), [a], None

    def case_transpose(rng):
        a = tensor(rng, (2, 3, 4))
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.transpose(a, (2, 0, 1)), ps)), [a], None

    def case_matmul(rng):
        a = tensor(rng, (3, 4))
        b = tensor(rng, (4, 2))
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.matmul(a, b), ps)), [a, b], None

    def case_sum(rng):
        a = tensor(rng, (2, 3, 4))
        axis = [None, 0, (1, 2), -1][int(rng.integers(4))]
        keep = bool(rng.integers(2))
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.tensor_sum(a, axis=axis, keepdims=keep), ps)), [a], None

    def case_mean(rng):
        a = tensor(rng, (2, 3, 4))
        axis = [None, 1, (0, 2)][int(rng.integers(3))]
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.tensor_mean(a, axis=axis), ps)), [a], None

    def case_softmax(rng):
        a = tensor(rng, (3, 5))
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.softmax(a, axis=-1), ps)), [a], None

    def case_cross_entropy(rng):
        a = tensor(rng, (4, 3))
        labels = rng.integers(0, 3, size=4)
        red = ["mean", "sum"][int(rng.integers(2))]
        return (lambda: ad.cross_entropy(a, labels, reduction=red)), [a], None

    def case_cross_entropy_none(rng):
        a = tensor(rng, (3, 4))
        labels = rng.integers(0, 4, size=3)
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.cross_entropy(a, labels, reduction="none"), ps)), [a], None

    def case_conv2d(rng):
        stride = int(rng.integers(1, 3))
        pad = ["same", "valid"][int(rng.integers(2))]
        kk = 3 if pad == "same" else int(rng.integers(1, 4))
        x = tensor(rng, (2, 2, 5, 5))
        k = tensor(rng, (3, 2, kk, kk), scale=0.5)
        b = tensor(rng, (3,)) if rng.integers(2) else None
        tensors = [x, k] + ([b] if b is not None else [])
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.conv2d(x, k, bias=b, stride=stride, padding=pad), ps),
                tensors, None)

    def case_avg_pool(rng):
        x = tensor(rng, (2, 2, 5, 5))
        win = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        border = ["count_valid", "zero_pad"][int(rng.integers(2))]
        pad = ["same", "valid"][int(rng.integers(2))]
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.avg_pool(x, win, stride=1, border=border, padding=pad), ps),
                [x], None)

    def case_batch_norm_train(rng):
        x = tensor(rng, (3, 2, 3, 3))
        st = BatchNormState(2)
        st.gamma.data[:] = 1.0 + 0.3 * rng.standard_normal(2)
        st.beta.data[:] = 0.3 * rng.standard_normal(2)
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.batch_norm(x, st), ps)), [x, st.gamma, st.beta], None

    def case_batch_norm_eval(rng):
        x = tensor(rng, (2, 2, 3, 3))
        st = BatchNormState(2)
        st.gamma.data[:] = 1.0 + 0.3 * rng.standard_normal(2)
        st.beta.data[:] = 0.3 * rng.standard_normal(2)
        st.running_mean = rng.standard_normal(2) * 0.2
        st.running_var = 1.0 + 0.2 * rng.random(2)
        st.mode = "eval"
        ps = probe_seed(rng)
        return (lambda: _scalarize(ad.batch_norm(x, st), ps)), [x, st.gamma, st.beta], None

    def case_margin_softmax(rng):
        a = tensor(rng, (2, 3, 2, 2))
        mu = float(rng.standard_normal() * 0.5)
        eta = float(1.0 + 3.0 * rng.random())
        eps = float(0.5 + rng.random())
        ps = probe_seed(rng)
        return (lambda: _scalarize(matchers.margin_softmax_layer(a, mu, eta, eps), ps)), [a], None

    return [
        ("add", case_add), ("mul", case_mul), ("scalar_mul", case_scalar_mul),
        ("relu", case_relu), ("concat", case_concat), ("reshape", case_reshape),
        ("transpose", case_transpose), ("matmul", case_matmul),
        ("sum", case_sum), ("mean", case_mean), ("softmax", case_softmax),
        ("cross_entropy", case_cross_entropy), ("cross_entropy_none", case_cross_entropy_none),
        ("conv2d", case_conv2d), ("avg_pool", case_avg_pool),
        ("batch_norm_train", case_batch_norm_train),
        ("batch_norm_eval", case_batch_norm_eval),
        ("margin_softmax_layer", case_margin_softmax),
    ]


def run_op_grad_checks(seed=0, instances=20):
    """Finite-difference every tape op on ``instances`` micro-instances each."""
    results = []
    for name, builder in _op_cases(seed):
        rng = np.random.default_rng((seed, zlib.crc32(name.encode())))
        worst = None
        failed = None
        total = 0
        for _ in range(instances):
            fn, tensors, guard = builder(rng)
            report = gradcheck(fn, tensors, kink_guard=guard)
            total += report.elements
            if not report.passed and failed is None:
                failed = report
            if worst is None or report.worst_err > worst.worst_err:
                worst = report
        chosen = failed or worst
        results.append(CheckResult(
            f"grad-{name}", failed is None,
            f"{instances} instances, {total} elements, "
            f"worst |analytic-fd| {chosen.worst_err:.3g} at {chosen.worst_label}"))
    return results


def run_block_grad_checks(seed=0, instances=20):
    """Finite-difference the residual blocks end to end (loss through logits)."""
    from . import blocks

    results = []
    for mixing in ("bn_relu", "margin_softmax"):
        rng = np.random.default_rng((seed, 77 if mixing == "bn_relu" else 78))
        failed = None
        worst = None
        total = 0
        for _ in range(instances):
            shortcut = ["add", "concat", "identity"][int(rng.integers(3))]
            d_in = 3
            d_value = d_in if shortcut == "identity" else 2
            cfg = blocks.TemplateBlockConfig(
                num_classes=3, d_in=d_in, d_value=d_value,
                patch_window=(2, 2), shortcut=shortcut,
                pre_pool_bn=bool(rng.integers(2)),
                shortcut_avgpool2=bool(rng.integers(2)),
                mixing=mixing, score_bn=bool(rng.integers(2)),
                margin_mu=0.5, margin_eta=3.0, margin_eps=1.0)
            params = blocks.TemplateBlockParams.create(cfg, _test_factory(rng))
            x = Tensor(rng.standard_normal((2, d_in, 3, 3)), requires_grad=True)
            labels = rng.integers(0, 3, size=2)

            ps = int(rng.integers(2 ** 32))

            def fn(ps=ps, cfg=cfg, params=params, x=x, labels=labels):
                out = blocks.template_block_forward(x, cfg, params)
                probe = _scalarize(out.f_out, ps)
                flat = ad.reshape(ad.transpose(out.patch_scores, (0, 2, 3, 1)),
                                  (2 * 3 * 3, 3))
                aux = ad.cross_entropy(flat, np.repeat(labels, 9))
                return ad.add(probe, aux)

            tensors = [x] + [t for _, t in params.parameters()]
            report = gradcheck(fn, tensors)
            total += report.elements
            if not report.passed and failed is None:
                failed = report
            if worst is None or report.worst_err > worst.worst_err:
                worst = report
        chosen = failed or worst
        results.append(CheckResult(
            f"grad-template-block-{mixing}", failed is None,
            f"{instances} instances, {total} elements, "
            f"worst |analytic-fd| {chosen.worst_err:.3g} at {chosen.worst_label}"))

    rng = np.random.default_rng((seed, 79))
    failed = None
    worst = None
    total = 0
    for _ in range(instances):
        stride = int(rng.integers(1, 3))
        w_in, w_out = 2, 3
        act = blocks.ActivationSpec(kind=["bn_relu", "margin_softmax"][int(rng.integers(2))],
                                    mu=0.2, eta=3.0, eps=1.0)
        params = blocks.ResidualBlockParams.create(w_in, w_out, stride, act,
                                                   _test_factory(rng))
        x = Tensor(rng.standard_normal((2, w_in, 4, 4)), requires_grad=True)
        ps = int(rng.integers(2 ** 32))

        def fn(ps=ps, params=params, act=act, x=x):
            return _scalarize(blocks.residual_block_baseline(x, params, act), ps)

        tensors = [x] + [t for _, t in params.parameters()]
        report = gradcheck(fn, tensors)
        total += report.elements
        if not report.passed and failed is None:
            failed = report
        if worst is None or report.worst_err > worst.worst_err:
            worst = report
    chosen = failed or worst
    results.append(CheckResult(
        "grad-residual-block", failed is None,
        f"{instances} instances, {total} elements, "
        f"worst |analytic-fd| {chosen.worst_err:.3g} at {chosen.worst_label}"))
    return results


def _test_factory(rng):
    # randomizes even zero-init parameters: a gradient check at the zero
    # point would leave the embedding path unexercised
    def factory(name, shape, kind):
        return Tensor(rng.standard_normal(shape) * 0.4, requires_grad=True, name=name)
    return factory


def run_grad_checks(seed=0, instances=20):
    return run_op_grad_checks(seed, instances) + run_block_grad_checks(seed, instances)
