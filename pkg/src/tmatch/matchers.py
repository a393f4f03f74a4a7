"""Best-matching-kernel selection with a no-match margin.

Given activations a_1..a_K and a margin mu, the selection problem asks for
mixing weights (p, q) on the K+1-vertex simplex (q is the no-match mass)
maximizing q*mu + p.a. Three solvers are provided:

* ``solve_exact``      -- the linear program; always returns a vertex.
* ``solve_perturbed``  -- Monte-Carlo average of argmax vertices under
                          Gaussian perturbation of the objective; smooth
                          in expectation, with a sampled Jacobian.
* ``solve_entropy``    -- entropy-regularized relaxation; closed form is
                          a soft-max over the activations with the margin
                          appended, with an analytic Jacobian.

The BN-ReLU utilities expose the correspondence between batch-norm
followed by ReLU and a scaled approximate maximizer: the per-channel
threshold it implements and the normalization constant eta. The two
layer functions at the bottom are batch-statistics-free drop-in
replacements for BN-ReLU on [N, K, H, W] activation maps.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, make_op


@dataclass
class MatchProblem:
    """Activations, margin and temperature for one selection instance."""

    a: np.ndarray
    mu: float
    eps: float = 1.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim != 1 or self.a.size < 1:
            raise ValueError(f"activations must be a non-empty vector, got shape {self.a.shape}")
        if not np.isfinite(self.a).all():
            raise ValueError("activations must be finite")
        self.mu = float(self.mu)
        if not np.isfinite(self.mu):
            raise ValueError("margin must be finite")
        self.eps = float(self.eps)
        if not (self.eps > 0 and np.isfinite(self.eps)):
            raise ValueError(f"temperature must be positive and finite, got {self.eps}")

    @property
    def k(self):
        return self.a.size


@dataclass
class SimplexPoint:
    """Mixing weights p over K kernels plus no-match mass q; q + sum(p) = 1."""

    p: np.ndarray
    q: float

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.q = float(self.q)
        if (self.p < 0).any() or self.q < 0:
            raise ValueError("simplex point has a negative coordinate")
        total = self.q + self.p.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"simplex point mass {total} deviates from 1 by more than 1e-9")

    def as_vector(self):
        """Concatenated (p, q) as one K+1 vector."""
        return np.concatenate([self.p, [self.q]])


@dataclass
class PerturbedConfig:
    """Monte-Carlo sample count and RNG seed for the perturbed solver."""

    samples: int = 64
    seed: int = 0

    def __post_init__(self):
        self.samples = int(self.samples)
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        self.seed = int(self.seed)


def _objective(prob, p, q):
    return q * prob.mu + float(np.dot(p, prob.a))


def solve_exact(prob):
    """Vertex solution of the selection LP.

    One-hot at the best activation when it beats the margin, otherwise all
    mass on q. Ties: margin wins an exact tie with the best activation;
    among tied activations the lowest index wins.
    """
    best = int(np.argmax(prob.a))  # lowest index on ties
    p = np.zeros(prob.k)
    if prob.a[best] > prob.mu:
        p[best] = 1.0
        return SimplexPoint(p, 0.0)
    return SimplexPoint(p, 1.0)


def brute_force_vertices(prob):
    """Oracle: evaluate the objective at all K+1 simplex vertices.

    Visits the q vertex first and replaces the incumbent only on a strict
    improvement, which reproduces solve_exact's tie-breaking.
    """
    best_value = prob.mu  # q vertex
    best_index = -1
    for k in range(prob.k):
        if prob.a[k] > best_value:
            best_value = prob.a[k]
            best_index = k
    p = np.zeros(prob.k)
    if best_index < 0:
        return SimplexPoint(p, 1.0)
    p[best_index] = 1.0
    return SimplexPoint(p, 0.0)


def solve_entropy(prob):
    """Closed-form solution of the entropy-regularized relaxation.

    p_k = exp(eps*a_k) / (exp(eps*mu) + sum_k' exp(eps*a_k')), and q gets
    the margin term's share. Computed with max subtraction so large
    eps*activations cannot overflow; every coordinate is strictly positive.
    """
    scores = prob.eps * np.concatenate([prob.a, [prob.mu]])
    scores -= scores.max()
    e = np.exp(scores)
    e /= e.sum()
    return SimplexPoint(e[:-1], e[-1])


def jacobian_entropy(prob):
    """d p* / d a of solve_entropy: eps * (diag(p*) - p* p*^T), K x K."""
    p = solve_entropy(prob).p
    return prob.eps * (np.diag(p) - np.outer(p, p))


def numeric_solve_entropy(prob, max_iter=100_000, stall=1e-10, move_stall=1e-9,
                          step_scale=0.3):
    """Oracle for solve_entropy: mirror ascent on the simplex.

    Maximizes q*mu + p.a - (1/eps)(q log q + p.log p) by exponentiated
    gradient steps from the uniform point, run in log coordinates for
    stability. Stops once the objective improves by less than ``stall``
    and no coordinate moved by more than ``move_stall``; the objective is
    flat near the optimum, so the movement condition is what pins the
    coordinates down.
    """
    k = prob.k
    c = np.concatenate([prob.a, [prob.mu]])
    log_x = np.full(k + 1, -np.log(k + 1.0))
    x = np.exp(log_x)
    eta = step_scale * prob.eps

    def objective(lx, xx):
        return float(np.dot(c, xx) - (1.0 / prob.eps) * np.dot(xx, lx))

    prev = objective(log_x, x)
    for _ in range(max_iter):
        grad = c - (1.0 / prob.eps) * (1.0 + log_x)
        log_x = log_x + eta * grad
        log_x -= log_x.max()
        log_x -= np.log(np.exp(log_x).sum())
        new_x = np.exp(log_x)
        cur = objective(log_x, new_x)
        moved = np.abs(new_x - x).max()
        x = new_x
        if abs(cur - prev) < stall and moved < move_stall:
            return SimplexPoint(x[:k], x[k])
        prev = cur
    raise RuntimeError(
        f"mirror ascent did not stall within {max_iter} iterations "
        f"(last objective {prev!r})")


def _draw_perturbations(k, cfg):
    """Common random numbers for the perturbed solver and its Jacobian.

    Philox is counter-based, so the same (seed, shape) always yields the
    same stream regardless of what else has been sampled.
    """
    gen = np.random.Generator(np.random.Philox(key=cfg.seed))
    z = gen.standard_normal((cfg.samples, k))
    z_margin = gen.standard_normal(cfg.samples)
    return z_margin, z


def _perturbed_choices(prob, cfg):
    """Index of the winning vertex per sample: 0 = no-match, k+1 = kernel k."""
    z_margin, z = _draw_perturbations(prob.k, cfg)
    scores = np.empty((cfg.samples, prob.k + 1))
    scores[:, 0] = prob.mu + z_margin / prob.eps
    scores[:, 1:] = prob.a[None, :] + z / prob.eps
    return scores.argmax(axis=1), z


def solve_perturbed(prob, cfg):
    """Monte-Carlo mean of argmax vertices under Gaussian perturbation."""
    choice, _ = _perturbed_choices(prob, cfg)
    counts = np.bincount(choice, minlength=prob.k + 1)
    freq = counts / float(cfg.samples)
    return SimplexPoint(freq[1:], freq[0])


def jacobian_perturbed(prob, cfg):
    """Sampled d p* / d a: eps * E[vertex_p z^T], K x K.

    Entry (i, j) estimates the sensitivity of p*_j to a_i. Shares the
    sample stream with solve_perturbed under the same config.
    """
    choice, z = _perturbed_choices(prob, cfg)
    jac = np.zeros((prob.k, prob.k))
    for j in range(prob.k):
        rows = z[choice == j + 1]
        if rows.size:
            jac[:, j] = rows.sum(axis=0)
    jac *= prob.eps / float(cfg.samples)
    return jac


# ---------------------------------------------------------------------
# BN-ReLU correspondence
# ---------------------------------------------------------------------

def bn_relu_threshold(state, gamma_floor=1e-12):
    """Per-channel matching threshold implied by batch-norm parameters.

    Returns (thresholds, flagged): thresholds[k] = mean_k - beta_k *
    sqrt(var_k) / gamma_k computed from the running statistics; channels
    whose |gamma| falls below ``gamma_floor`` are listed in ``flagged``
    and carry NaN instead of a value.
    """
    if not state.initialized:
        raise ValueError("bn_relu_threshold needs initialized running statistics")
    gamma = state.gamma.data
    beta = state.beta.data
    flagged = [int(i) for i in np.nonzero(np.abs(gamma) < gamma_floor)[0]]
    mu = np.full(state.channels, np.nan)
    ok = np.abs(gamma) >= gamma_floor
    mu[ok] = state.running_mean[ok] - beta[ok] * np.sqrt(state.running_var[ok]) / gamma[ok]
    return mu, flagged


def bn_relu_normalize(p_hat):
    """Normalize non-negative mixing weights to the simplex.

    Returns (p_star, eta) with eta = sum(p_hat). The all-zero input is the
    defined degenerate case: p_star stays zero and eta is 0.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if (p_hat < 0).any():
        bad = int(np.argmax(p_hat < 0))
        raise ValueError(f"negative mixing weight {p_hat[bad]} at index {bad}")
    eta = float(p_hat.sum())
    if eta == 0.0:
        return np.zeros_like(p_hat), 0.0
    return p_hat / eta, eta


# ---------------------------------------------------------------------
# activation layers (tape ops over [N, K, H, W] maps)
# ---------------------------------------------------------------------

def margin_softmax_layer(activations, mu, eta, eps):
    """Soft-max over activations with the margin appended, scaled by eta.

    Per pixel: out_k = eta * exp(eps*a_k) / (exp(eps*mu) + sum exp(eps*a)).
    A batch-statistics-free replacement for BN-ReLU; the per-pixel output
    sum is always strictly below eta (the missing mass is the no-match
    share).
    """
    if activations.data.ndim != 4:
        raise ValueError(f"expected [N, K, H, W] activations, got {activations.shape}")
    mu, eta, eps = float(mu), float(eta), float(eps)
    if eps <= 0:
        raise ValueError(f"temperature must be positive, got {eps}")
    if eta <= 0:
        raise ValueError(f"scale eta must be positive, got {eta}")

    scaled = eps * activations.data
    top = np.maximum(scaled.max(axis=1, keepdims=True), eps * mu)
    num = np.exp(scaled - top)
    den = np.exp(eps * mu - top) + num.sum(axis=1, keepdims=True)
    p = num / den
    out = eta * p

    def grad_fn(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (eta * eps * p * (g - inner),)

    return make_op(out, (activations,), grad_fn)


def perturbed_layer_bytes(shape, samples):
    """Backward-pass memory estimate for perturbed_maximizer_layer."""
    n, k, h, w = shape
    return int(samples) * n * k * h * w * 8


def perturbed_maximizer_layer(activations, mu, eta, eps, samples, seed):
    """Monte-Carlo perturbed maximizer as a layer, scaled by eta.

    Per pixel, the output is eta times the empirical mean of the argmax
    vertex's p part under Gaussian perturbation of the margin and the
    activations. The backward pass reuses the forward samples for the
    sampled-Jacobian estimate, so the layer is deterministic per seed.
    """
    if activations.data.ndim != 4:
        raise ValueError(f"expected [N, K, H, W] activations, got {activations.shape}")
    mu, eta, eps = float(mu), float(eta), float(eps)
    if eps <= 0 or eta <= 0:
        raise ValueError("eta and eps must be positive")
    samples = int(samples)
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")

    n, k, h, w = activations.shape
    gen = np.random.Generator(np.random.Philox(key=seed))
    z = gen.standard_normal((samples, n, k, h, w))
    z_margin = gen.standard_normal((samples, n, 1, h, w))

    kernel_scores = activations.data[None] + z / eps
    margin_scores = mu + z_margin / eps
    best = kernel_scores.argmax(axis=2, keepdims=True)      # [S, N, 1, H, W]
    best_score = np.take_along_axis(kernel_scores, best, axis=2)
    matched = best_score > margin_scores                     # margin wins ties

    vertex = np.zeros_like(kernel_scores)
    np.put_along_axis(vertex, best, matched.astype(np.float64), axis=2)
    out = eta * vertex.mean(axis=0)

    def grad_fn(g):
        # d out_j / d a_i = eta*eps*E[vertex_j z_i]; contract with g first
        picked = np.take_along_axis(np.broadcast_to(g[None], kernel_scores.shape),
                                    best, axis=2)
        weight = np.where(matched, picked, 0.0)              # [S, N, 1, H, W]
        return (eta * eps * (z * weight).mean(axis=0),)

    return make_op(out, (activations,), grad_fn)
