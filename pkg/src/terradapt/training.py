"""Offline meta-training of the basis network.

The trainer learns basis weights w such that, for any short window of logged
driving, a window-specific linear parameter vector solved in closed form
explains the measured dynamics residuals:

    theta*(w) = argmin_theta  sum_t ||y_t - (Phi_w(x_t, e_t) theta) u_t||^2
                              + lambda_r ||theta - theta_r||^2

    J(w) = sum_t ||y_t - (Phi_w theta*(w)) u_t||^2

With h_i = Phi_i u the per-sample model is linear in theta, y_t ~ H_t theta,
so theta* solves the ridge normal equations

    (sum_t H_t^T H_t + lambda_r I) theta* = sum_t H_t^T y_t + lambda_r theta_r

by Cholesky factorization (never an explicit inverse). The gradient of J
through theta* uses the implicit-function adjoint of that linear system:
one extra solve with the already-factored matrix per window, after which

    dJ/dH_t = r_t (2 theta* - mu)^T - (H_t mu) theta*^T,   r_t = H_t theta* - y_t,
    G mu = 2 sum_t H_t^T r_t,

and the chain rule pushes dJ/dH into the network. Each optimizer step is
followed by spectral normalization, so the constraint holds after every
training step, not just at the end. Window costs in a minibatch are
independent given the (read-only) network, so they could run in parallel;
this implementation evaluates them sequentially.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .basis import BasisNet
from .serialize import load_arrays, save_arrays, write_csv

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries diagnostics."""


@dataclass
class TrajectoryDataset:
    """Uniformly sampled driving logs: states, inputs, features, residuals.

    Arrays are stacked (n_traj, length, dim); dt is the sample period.
    """

    x: np.ndarray
    u: np.ndarray
    e: np.ndarray
    y: np.ndarray
    dt: float

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.e = np.asarray(self.e, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if not (self.x.ndim == self.u.ndim == self.e.ndim == self.y.ndim == 3):
            raise ValueError("dataset arrays must be (n_traj, length, dim)")
        shapes = {a.shape[:2] for a in (self.x, self.u, self.e, self.y)}
        if len(shapes) != 1:
            raise ValueError(f"dataset arrays disagree on (n_traj, length): {shapes}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name, a in (("x", self.x), ("u", self.u), ("e", self.e), ("y", self.y)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"dataset array {name} contains non-finite values")

    @property
    def n_traj(self):
        return self.x.shape[0]

    @property
    def length(self):
        return self.x.shape[1]

    def save(self, path, meta: dict | None = None):
        m = {"dt": self.dt}
        m.update(meta or {})
        save_arrays(path, {"x": self.x, "u": self.u, "e": self.e, "y": self.y},
                    kind="dataset", meta=m)

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        arrays, meta = load_arrays(path, expect_kind="dataset")
        return cls(arrays["x"], arrays["u"], arrays["e"], arrays["y"], float(meta["dt"]))


@dataclass
class WindowSpec:
    """A contiguous slice of one trajectory: traj index, start, length."""

    traj: int
    start: int
    length: int

    def validate(self, dataset: TrajectoryDataset):
        if not 0 <= self.traj < dataset.n_traj:
            raise ValueError(f"trajectory index {self.traj} out of range")
        if self.length < 1 or self.length > dataset.length:
            raise ValueError(f"window length {self.length} invalid for trajectory "
                             f"of length {dataset.length}")
        if self.start < 0 or self.start + self.length > dataset.length:
            raise ValueError(f"window [{self.start}, {self.start + self.length}) "
                             f"exceeds trajectory length {dataset.length}")

    def slice(self, dataset: TrajectoryDataset):
        self.validate(dataset)
        sl = slice(self.start, self.start + self.length)
        return (dataset.x[self.traj, sl], dataset.u[self.traj, sl],
                dataset.e[self.traj, sl], dataset.y[self.traj, sl])


@dataclass
class TrainerConfig:
    """Meta-training settings. Defaults follow the published recipe where one
    exists (learning rate, regularization pull point, window bounds, windows
    per batch); sizes are desk scale."""

    learning_rate: float = 0.001
    theta_r: tuple = (1.0, 1.0, 1.0, 1.0)
    lambda_r: float = 0.1
    window_min_s: float = 1.2
    window_max_s: float = 30.0
    batch_windows: int = 70
    n_theta: int = 4
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    max_iters: int = 1500
    conv_tol: float = 1e-5
    conv_window: int = 50
    seed: int = 0
    track_norms: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lambda_r < 0:
            raise ValueError("learning_rate must be positive and lambda_r nonnegative")
        if not 0 < self.window_min_s <= self.window_max_s:
            raise ValueError("need 0 < window_min_s <= window_max_s")
        if self.batch_windows < 1 or self.max_iters < 1:
            raise ValueError("batch_windows and max_iters must be at least 1")
        if len(self.theta_r) != self.n_theta:
            raise ValueError(f"theta_r has {len(self.theta_r)} entries, n_theta={self.n_theta}")
        log.info(
            "trainer settings accepted: lr=%g theta_r=%s lambda_r=%g "
            "window=[%g, %g]s batch=%d n_theta=%d hidden=%s",
            self.learning_rate, tuple(self.theta_r), self.lambda_r,
            self.window_min_s, self.window_max_s, self.batch_windows,
            self.n_theta, tuple(self.hidden))


def build_h(phi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Stack h_i = Phi_i u as columns: (T, n_theta, n, m), (T, m) -> (T, n, n_theta)."""
    return np.einsum("tinm,tm->tni", phi, u)


def solve_theta_star(h: np.ndarray, y: np.ndarray, lambda_r: float, theta_r: np.ndarray):
    """Ridge solution of the window least squares problem.

    h is (T, n, n_theta), y is (T, n). Returns (theta_star, residual_cost)
    where the cost excludes the regularization term. Requires a nonempty
    window and lambda_r > 0 or enough excitation to keep the normal matrix
    positive definite.
    """
    h = np.asarray(h, dtype=float)
    y = np.asarray(y, dtype=float)
    if h.ndim != 3 or y.ndim != 2 or h.shape[0] != y.shape[0] or h.shape[1] != y.shape[1]:
        raise ValueError(f"inconsistent window shapes h{h.shape}, y{y.shape}")
    if h.shape[0] == 0:
        raise ValueError("window is empty")
    theta_r = np.asarray(theta_r, dtype=float).reshape(-1)
    n_theta = h.shape[2]
    if theta_r.shape[0] != n_theta:
        raise ValueError(f"theta_r has {theta_r.shape[0]} entries, expected {n_theta}")
    g = np.einsum("tni,tnj->ij", h, h) + lambda_r * np.eye(n_theta)
    b = np.einsum("tni,tn->i", h, y) + lambda_r * theta_r
    fac = cho_factor(g, lower=True)
    theta = cho_solve(fac, b)
    r = np.einsum("tni,i->tn", h, theta) - y
    return theta, float(np.sum(r * r))


def window_cost(net, window, lambda_r: float, theta_r) -> tuple[float, np.ndarray]:
    """Meta-objective of one window under the current basis.

    window is (x, u, e, y) arrays. Returns (cost, theta_star).
    """
    xw, uw, ew, yw = window
    phi = net.eval_batch(xw, ew)
    theta, cost = solve_theta_star(build_h(phi, uw), yw, lambda_r, theta_r)
    return cost, theta


def window_cost_and_grad(net: BasisNet, window, lambda_r: float, theta_r):
    """Window cost plus exact gradient w.r.t. every network parameter.

    An empty window contributes nothing: theta* degenerates to theta_r and
    the gradient is identically zero.
    """
    xw, uw, ew, yw = (np.asarray(a, dtype=float) for a in window)
    theta_r = np.asarray(theta_r, dtype=float).reshape(-1)
    if xw.shape[0] == 0:
        zero = {"W": [np.zeros_like(w) for w in net.weights],
                "b": [np.zeros_like(b) for b in net.biases]}
        return 0.0, theta_r.copy(), zero
    phi, acts = net.forward_batch(xw, ew, want_cache=True)
    h = build_h(phi, uw)
    n_theta = h.shape[2]
    g_mat = np.einsum("tni,tnj->ij", h, h) + lambda_r * np.eye(n_theta)
    b_vec = np.einsum("tni,tn->i", h, yw) + lambda_r * theta_r
    fac = cho_factor(g_mat, lower=True)
    theta = cho_solve(fac, b_vec)
    r = np.einsum("tni,i->tn", h, theta) - yw
    cost = float(np.sum(r * r))
    # adjoint of the linear solve: one extra triangular solve, same factor
    mu = cho_solve(fac, 2.0 * np.einsum("tni,tn->i", h, r))
    h_mu = np.einsum("tni,i->tn", h, mu)
    d_h = (np.einsum("tn,i->tni", r, 2.0 * theta - mu)
           - np.einsum("tn,i->tni", h_mu, theta))
    d_phi = np.einsum("tni,tm->tinm", d_h, uw)
    grads = net.backward(acts, d_phi)
    return cost, theta, grads


def sample_window(rng, dataset: TrajectoryDataset, cfg: TrainerConfig) -> WindowSpec:
    """Random window: uniform trajectory, uniform length in seconds, uniform start."""
    traj = int(rng.integers(dataset.n_traj))
    length_s = rng.uniform(cfg.window_min_s, cfg.window_max_s)
    length = int(np.clip(round(length_s / dataset.dt), 1, dataset.length))
    start = int(rng.integers(dataset.length - length + 1))
    return WindowSpec(traj, start, length)


class Adam:
    """Standard Adam on a flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    net: BasisNet
    history: list = field(default_factory=list)   # dicts: iteration, loss, wall_time_s, max_w_norm
    converged: bool = False
    iterations: int = 0


def _exact_max_norm(net: BasisNet) -> float:
    return max(float(np.linalg.svd(w, compute_uv=False)[0]) for w in net.weights)


def train_step(net: BasisNet, adam: Adam, dataset: TrajectoryDataset,
               cfg: TrainerConfig, rng) -> float:
    """One meta-iteration: sample windows, accumulate gradients, Adam step,
    then re-project onto the spectral constraint. Returns the minibatch loss."""
    total = 0.0
    grad_flat = np.zeros(net.get_flat_params().size)
    theta_r = np.asarray(cfg.theta_r, dtype=float)
    for _ in range(cfg.batch_windows):
        w = sample_window(rng, dataset, cfg)
        cost, _, grads = window_cost_and_grad(net, w.slice(dataset), cfg.lambda_r, theta_r)
        total += cost
        grad_flat += net.grads_to_flat(grads)
    net.set_flat_params(adam.step(net.get_flat_params(), grad_flat))
    net.spectral_normalize()
    return total


def train(dataset: TrajectoryDataset, cfg: TrainerConfig,
          net: BasisNet | None = None) -> TrainResult:
    """Run meta-training to convergence or the iteration cap.

    Deterministic for a fixed config seed: the same seed yields the same
    window sequence, loss history, and final weights. Convergence is declared
    when the mean loss over the last conv_window iterations changes by less
    than conv_tol relative to the previous conv_window block.
    """
    n = dataset.y.shape[2]
    m = dataset.u.shape[2]
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = BasisNet.init(dataset.x.shape[2], dataset.e.shape[2], n, m,
                            cfg.n_theta, hidden=cfg.hidden,
                            activation=cfg.activation, rng=rng)
    adam = Adam(net.get_flat_params().size, cfg.learning_rate)
    result = TrainResult(net=net)
    losses = []
    t0 = time.perf_counter()
    for it in range(cfg.max_iters):
        loss = train_step(net, adam, dataset, cfg, rng)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"non-finite minibatch loss at iteration {it}; "
                f"last losses: {losses[-5:]}, "
                f"max |param|: {np.max(np.abs(net.get_flat_params())):.3e}")
        losses.append(loss)
        rec = {"iteration": it, "loss": loss, "wall_time_s": time.perf_counter() - t0}
        if cfg.track_norms:
            rec["max_w_norm"] = _exact_max_norm(net)
        result.history.append(rec)
        result.iterations = it + 1
        if len(losses) >= 2 * cfg.conv_window:
            prev = float(np.mean(losses[-2 * cfg.conv_window : -cfg.conv_window]))
            cur = float(np.mean(losses[-cfg.conv_window :]))
            if abs(prev - cur) < cfg.conv_tol * max(abs(prev), 1e-12):
                result.converged = True
                break
    return result


def write_loss_history(path, history) -> None:
    """Loss history CSV: iteration, minibatch loss, wall time since start."""
    write_csv(path, ["iteration", "loss", "wall_time_s"],
              [(h["iteration"], h["loss"], h["wall_time_s"]) for h in history])


def gradcheck_meta(net: BasisNet, windows, lambda_r: float, theta_r,
                   h_step: float = 1e-5) -> float:
    """Compare the analytic meta-gradient against central finite differences.

    windows is a list of (x, u, e, y) tuples; the objective is the summed
    window cost. Returns the maximum elementwise relative error over all
    parameters. Everything runs in float64.
    """
    theta_r = np.asarray(theta_r, dtype=float)

    def total_cost(candidate: BasisNet) -> float:
        c = 0.0
        for w in windows:
            xw = np.asarray(w[0])
            if xw.shape[0] == 0:
                continue
            c += window_cost(candidate, w, lambda_r, theta_r)[0]
        return c

    grad_flat = np.zeros(net.get_flat_params().size)
    for w in windows:
        _, _, grads = window_cost_and_grad(net, w, lambda_r, theta_r)
        grad_flat += net.grads_to_flat(grads)

    probe = copy.deepcopy(net)
    base = net.get_flat_params()
    fd = np.zeros_like(base)
    for i in range(base.size):
        p = base.copy()
        p[i] = base[i] + h_step
        probe.set_flat_params(p)
        up = total_cost(probe)
        p[i] = base[i] - h_step
        probe.set_flat_params(p)
        down = total_cost(probe)
        fd[i] = (up - down) / (2.0 * h_step)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(grad_flat)), 1e-8)
    return float(np.max(np.abs(grad_flat - fd) / denom))
