"""Reference enhancement: Bregman iteration, forward-backward splitting and
the two mixed-ROF solvers.

The mixed-ROF subproblem is

    min_u  mu1 * |grad_w u|_1 + mu2 * (|grad_x (u - u_p)|_1 + |grad_y (u - u_p)|_1) + 0.5 * |u - v|^2

with the l1 norm taken over directed graph edges. ``solve_fast`` is the
PDE-free cut iteration, ``solve_split_bregman`` the linear-solve oracle.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg, splu

from . import parallel
from .config import GraphConfig, RegistrationConfig, VariationalConfig
from .exceptions import ConfigurationError, ShapeError, SolverConvergenceError
from .grid_ops import (
    as_image,
    check_same_shape,
    cut,
    grad_x,
    grad_y,
    gradient_matrices,
    laplacian_matrix,
    shrink,
)
from .logs import diagnostics, log_iteration
from .nltv import NltvGraph, build_graph, graph_from_config, nl_grad, nl_grad_matrix, nl_laplacian_matrix
from .registration import DeformationField, field_from_grid, invert_field, register, warp, warp_adj

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixedRofProblem:
    v: np.ndarray
    u_p: np.ndarray
    graph: NltvGraph
    mu1: float = 0.5
    mu2: float = 0.25
    lambda1: float = 0.02
    lambda2: float = 0.02

    def __post_init__(self):
        v = as_image(self.v, "v")
        u_p = as_image(self.u_p, "u_p")
        check_same_shape(v, u_p, "v and u_p")
        if tuple(self.graph.shape) != v.shape:
            raise ShapeError(f"graph shape {self.graph.shape} does not match image {v.shape}")
        if self.mu1 < 0 or self.mu2 < 0:
            raise ConfigurationError(f"mu1, mu2 must be non-negative, got {self.mu1}, {self.mu2}")
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ConfigurationError(f"lambda1, lambda2 must be positive, got {self.lambda1}, {self.lambda2}")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "u_p", u_p)

    @property
    def admissible(self) -> bool:
        """0 < 20 * lambda1 + 4 * lambda2 < 1, the convergence condition of the fast solver."""
        return 0 < 20 * self.lambda1 + 4 * self.lambda2 < 1

    @cached_property
    def max_weighted_degree(self) -> float:
        return float(self.graph.weighted_degree().max(initial=0.0))

    @cached_property
    def nonlocal_step(self) -> float:
        """Step of the nonlocal dual block in ``solve_fast``.

        lambda1 as long as 2 * lambda1 * d + 4 * lambda2 < 1 for the largest
        weighted degree d; otherwise shortened to 95% of the bound. Graphs
        with at most 10 unit-weight edges per pixel keep lambda1 whenever the
        problem is admissible.
        """
        d = self.max_weighted_degree
        if 2 * self.lambda1 * d + 4 * self.lambda2 < 1:
            return self.lambda1
        return 0.95 * (1 - 4 * self.lambda2) / (2 * d)


class IterationRecord(NamedTuple):
    iteration: int
    step: float
    gamma: float


def mixed_rof_objective(u, p: MixedRofProblem) -> float:
    u = as_image(u)
    check_same_shape(u, p.v, "u and v")
    value = 0.5 * float(((u - p.v) ** 2).sum())
    if p.mu1 > 0:
        value += p.mu1 * float(np.abs(nl_grad(u, p.graph)).sum())
    if p.mu2 > 0:
        d = u - p.u_p
        value += p.mu2 * float(np.abs(grad_x(d)).sum() + np.abs(grad_y(d)).sum())
    return value


class _StackedOperator(NamedTuple):
    """Nonlocal and local difference rows of the mixed-ROF problem stacked into one matrix."""

    K: sparse.csr_matrix
    offset: np.ndarray
    mu: np.ndarray
    weight: np.ndarray


def _stacked_operator(p: MixedRofProblem, nonlocal_weight: float, local_weight: float) -> _StackedOperator:
    blocks, offsets, mus, weights = [], [], [], []
    if p.mu1 > 0:
        blocks.append(nl_grad_matrix(p.graph))
        offsets.append(np.zeros(p.graph.n_edges))
        mus.append(np.full(p.graph.n_edges, p.mu1))
        weights.append(np.full(p.graph.n_edges, nonlocal_weight))
    if p.mu2 > 0:
        u_p = p.u_p.ravel()
        for g in gradient_matrices(p.v.shape):
            blocks.append(g)
            offsets.append(g @ u_p)
            mus.append(np.full(g.shape[0], p.mu2))
            weights.append(np.full(g.shape[0], local_weight))
    K = sparse.vstack(blocks, format="csr")
    return _StackedOperator(K, np.concatenate(offsets), np.concatenate(mus), np.concatenate(weights))


def solve_fast(p: MixedRofProblem, iters: int = 500, tol: float = 1e-6,
               trace: list[IterationRecord] | None = None) -> np.ndarray:
    """PDE-free iteration: clamp the dual variables, then update u explicitly.

    Every difference row j carries a dual b_j and is updated as

        b_j = cut(K_j u - c_j + b_j, mu_j / t_j),    u = v - sum_j t_j K_j^T b_j

    with t_j = ``p.nonlocal_step`` on graph edges and lambda2 on the local
    differences.

    Args:
        p: Problem; must satisfy ``p.admissible``.
        iters: Iteration cap.
        tol: Stop once max |u^{k+1} - u^k| < tol.
        trace: When given, one IterationRecord per iteration is appended,
            ``gamma`` being sum_j t_j / 2 * |b_j^k - b_j^{k-1}|^2.

    Returns:
        The final iterate u.
    """
    if not p.admissible:
        raise ConfigurationError(
            f"20*lambda1 + 4*lambda2 = {20 * p.lambda1 + 4 * p.lambda2:.4g} is outside (0, 1)"
        )
    shape = p.v.shape
    v = p.v.ravel()
    if not (p.mu1 > 0 or p.mu2 > 0):
        if trace is not None:
            trace.append(IterationRecord(1, 0.0, 0.0))
        return p.v.copy()
    op = _stacked_operator(p, p.nonlocal_step if p.mu1 > 0 else p.lambda1, p.lambda2)
    threshold = op.mu / op.weight
    adjoint = (op.K.T @ sparse.diags(op.weight)).tocsr()
    diagnose = trace is not None or diagnostics.isEnabledFor(logging.DEBUG)

    u = v.copy()
    b = np.zeros(op.K.shape[0])
    for iteration in range(1, iters + 1):
        new_b = cut(op.K @ u - op.offset + b, threshold)
        gamma = 0.5 * float((op.weight * (new_b - b) ** 2).sum()) if diagnose else float("nan")
        b = new_b
        u_next = v - adjoint @ b
        step = float(np.abs(u_next - u).max())
        u = u_next
        if trace is not None:
            trace.append(IterationRecord(iteration, step, gamma))
        log_iteration("mixed_rof_fast", iteration, gamma, step)
        if step < tol:
            break
    return u.reshape(shape)


@dataclass(frozen=True)
class SplitBregmanConfig:
    """Settings of the split Bregman oracle.

    The penalties are ``penalty_scale`` times lambda1 and lambda2; the
    minimizer does not depend on them, only the speed does. For the first
    ``balance_until`` iterations the scale is doubled or halved whenever the
    primal and dual residuals are more than ten times apart.
    ``lu_preconditioner`` factors the system matrix once per penalty and
    hands the factorization to conjugate gradient as preconditioner.
    """

    iters: int = 500
    tol: float = 1e-6
    cg_tol: float = 1e-8
    cg_maxiter: int = 1000
    penalty_scale: float = 1.0
    balance_until: int = 0
    lu_preconditioner: bool = False

    def __post_init__(self):
        if not self.penalty_scale > 0:
            raise ConfigurationError(f"penalty_scale must be positive, got {self.penalty_scale}")
        if self.iters < 1 or self.cg_maxiter < 1:
            raise ConfigurationError("iteration caps must be at least 1")


def system_operator(p: MixedRofProblem, penalty_scale: float = 1.0) -> sparse.csr_matrix:
    """I - 2 * rho1 * Laplacian_w - rho2 * Laplacian with rho_j = penalty_scale * lambda_j."""
    n = p.v.size
    op = sparse.identity(n, format="csr")
    if p.mu1 > 0:
        op = op - 2 * penalty_scale * p.lambda1 * nl_laplacian_matrix(p.graph)
    if p.mu2 > 0:
        op = op - penalty_scale * p.lambda2 * laplacian_matrix(p.v.shape)
    return op.tocsr()


def _preconditioner(operator: sparse.csr_matrix) -> LinearOperator:
    lu = splu(operator.tocsc())
    return LinearOperator(operator.shape, matvec=lu.solve, dtype=np.float64)


def solve_split_bregman(p: MixedRofProblem, cfg: SplitBregmanConfig = SplitBregmanConfig(),
                        trace: list[IterationRecord] | None = None) -> np.ndarray:
    """Split Bregman oracle: conjugate-gradient u-step, shrink d-steps, Bregman b-updates.

    Stops once the largest change of u and the largest constraint violation
    |K u - c - d| are both below ``cfg.tol``.

    Raises:
        SolverConvergenceError: conjugate gradient did not reach ``cfg.cg_tol``.
    """
    shape = p.v.shape
    if not (p.mu1 > 0 or p.mu2 > 0):
        return p.v.copy()
    op = _stacked_operator(p, p.lambda1, p.lambda2)
    v = p.v.ravel()
    scale = cfg.penalty_scale
    operator = system_operator(p, scale)
    preconditioner = _preconditioner(operator) if cfg.lu_preconditioner else None

    u = v.copy()
    d = np.zeros(op.K.shape[0])
    b = np.zeros_like(d)
    for iteration in range(1, cfg.iters + 1):
        rho = scale * op.weight
        rhs = v + op.K.T @ (rho * (d - b + op.offset))
        u_next, info = cg(operator, rhs, x0=u, rtol=cfg.cg_tol, atol=0.0, maxiter=cfg.cg_maxiter, M=preconditioner)
        if info != 0:
            residual = float(np.linalg.norm(operator @ u_next - rhs) / max(np.linalg.norm(rhs), 1e-300))
            raise SolverConvergenceError(f"conjugate gradient stopped with info={info}", residual)
        ku = op.K @ u_next - op.offset
        d_prev = d
        d = shrink(ku + b, op.mu / rho)
        b = b + ku - d
        step = float(np.abs(u_next - u).max())
        primal = float(np.abs(ku - d).max())
        u = u_next
        if trace is not None:
            trace.append(IterationRecord(iteration, step, float("nan")))
        log_iteration("mixed_rof_split_bregman", iteration, primal, step)
        if step < cfg.tol and primal < cfg.tol:
            break
        if iteration <= cfg.balance_until:
            dual = float(np.linalg.norm(op.K.T @ (rho * (d - d_prev))))
            primal_norm = float(np.linalg.norm(ku - d))
            factor = 2.0 if primal_norm > 10 * dual else 0.5 if dual > 10 * primal_norm else 1.0
            if factor != 1.0:
                # scaled duals follow the penalty
                scale *= factor
                b = b / factor
                operator = system_operator(p, scale)
                preconditioner = _preconditioner(operator) if cfg.lu_preconditioner else None
    return u.reshape(shape)


def convergence_operator(graph: NltvGraph, lambda1: float, lambda2: float) -> sparse.csr_matrix:
    """I + 2 * lambda1 * Laplacian_w + lambda2 * Laplacian, positive definite for admissible lambdas."""
    n = graph.n_pixels
    op = sparse.identity(n) + 2 * lambda1 * nl_laplacian_matrix(graph) + lambda2 * laplacian_matrix(graph.shape)
    return op.tocsr()


def _check_stack(frames, what: str) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] == 0 or frames.shape[1] == 0 or frames.shape[2] == 0:
        raise ShapeError(f"{what} must be a non-empty (N, H, W) stack, got shape {frames.shape}")
    return frames


def data_energy(u, fields: list[DeformationField], fed) -> float:
    """sum_i |Phi_i u - f_i|^2."""
    u = as_image(u)
    fed = _check_stack(fed, "fed frames")
    return float(sum(((warp(u, f) - frame) ** 2).sum() for f, frame in zip(fields, fed)))


def forward_step(u, fields: list[DeformationField], fed, delta: float = 1.0) -> np.ndarray:
    """v = u - (delta / N) * sum_i Phi_i^T (Phi_i u - f_i^k)."""
    u = as_image(u)
    fed = _check_stack(fed, "fed frames")
    if len(fields) != fed.shape[0]:
        raise ShapeError(f"{len(fields)} fields for {fed.shape[0]} frames")
    if fed.shape[1:] != u.shape:
        raise ShapeError(f"frames of shape {fed.shape[1:]} do not match u {u.shape}")
    if not delta > 0:
        raise ConfigurationError(f"delta must be positive, got {delta}")

    def frame_gradient(i: int) -> np.ndarray:
        return warp_adj(warp(u, fields[i]) - fed[i], fields[i])

    gradient = np.zeros_like(u)
    for term in parallel.ordered_map(frame_gradient, range(len(fields))):
        gradient += term
    return u - (delta / len(fields)) * gradient


class BregmanState(NamedTuple):
    u: np.ndarray
    fed: np.ndarray
    k: int = 0

    @classmethod
    def start(cls, u, frames) -> "BregmanState":
        return cls(as_image(u).copy(), _check_stack(frames, "frames").copy(), 0)


def bregman_outer(state: BregmanState, frames, fields: list[DeformationField], graph: NltvGraph,
                  u_p, cfg: VariationalConfig = VariationalConfig(),
                  energies: list[float] | None = None) -> BregmanState:
    """One Bregman step: inner forward-backward passes, then f_i^{k+1} = f_i^k + f_i - Phi_i u^{k+1}.

    The prox runs on intensities multiplied by ``cfg.intensity_scale``.
    """
    frames = _check_stack(frames, "frames")
    scale = cfg.intensity_scale
    u = state.u
    previous = data_energy(u, fields, state.fed)
    for inner in range(cfg.inner_loop):
        v = forward_step(u, fields, state.fed, cfg.delta)
        if cfg.mu1 > 0 or cfg.mu2 > 0:
            problem = MixedRofProblem(v * scale, np.asarray(u_p) * scale, graph, cfg.mu1, cfg.mu2, cfg.lambda1, cfg.lambda2)
            u = solve_fast(problem, cfg.rof_iters, cfg.rof_tol) / scale
        else:
            u = v
        energy = data_energy(u, fields, state.fed)
        if energies is not None:
            energies.append(energy)
        log_iteration("bregman_inner", inner, energy, abs(previous - energy))
        if previous > 0 and abs(previous - energy) / previous < cfg.early_exit_tol:
            break
        previous = energy
    fed = state.fed + frames - np.stack([warp(u, f) for f in fields])
    return BregmanState(u, fed, state.k + 1)


class EnhancementResult(NamedTuple):
    reference: np.ndarray
    registered: np.ndarray
    pullback: list[DeformationField]
    pushforward: list[DeformationField]
    inversion_residuals: list[float]
    data_residuals: list[float]


def register_frames(u: np.ndarray, frames: np.ndarray, cfg: RegistrationConfig,
                    description: str | None = None) -> list[DeformationField]:
    """Pull-back fields Phi_i taking the reference u onto every frame."""
    def one(frame: np.ndarray) -> DeformationField:
        return field_from_grid(register(u, frame, cfg), u.shape, "pull-back")

    return parallel.ordered_map(one, list(frames), description=description)


def enhance_reference(frames, u0, cfg: VariationalConfig = VariationalConfig(),
                      registration_cfg: RegistrationConfig = RegistrationConfig(),
                      graph_cfg: GraphConfig = GraphConfig(), progress: bool = False,
                      on_middle_loop: Callable[[int, np.ndarray], None] | None = None) -> EnhancementResult:
    """Alternate registration to the current reference and Bregman steps, ``middle_loop`` times.

    Each pass registers every frame to the current u, rebuilds the graph and
    runs up to ``cfg.bregman_steps`` Bregman steps. A pass ends early once
    max |Phi_i u - f_i| < ``cfg.residual_tol`` or the l2 data residual fell by
    less than ``cfg.stall_tol`` of its previous value. The fed frames carry
    over from one pass to the next.

    Returns:
        EnhancementResult holding the enhanced reference u, the registered
        frames R_i = warp(f_i, push-forward_i) and the fields in both directions.
    """
    frames = _check_stack(frames, "frames")
    u0 = as_image(u0, "initial reference")
    if frames.shape[1:] != u0.shape:
        raise ShapeError(f"frames of shape {frames.shape[1:]} do not match reference {u0.shape}")
    state = BregmanState.start(u0, frames)
    u_p = u0
    data_residuals = []
    for middle in range(cfg.middle_loop):
        description = f"Registering frames (pass {middle + 1}/{cfg.middle_loop})" if progress else None
        fields = register_frames(state.u, frames, registration_cfg, description)
        graph = graph_from_config(state.u, graph_cfg) if cfg.mu1 > 0 else _empty_graph(u0.shape)
        previous = np.inf
        for step in range(cfg.bregman_steps):
            state = bregman_outer(state, frames, fields, graph, u_p, cfg)
            mismatch = np.stack([warp(state.u, f) for f in fields]) - frames
            residual = float(np.sqrt((mismatch**2).sum()))
            logger.debug(f"pass {middle + 1}, Bregman step {step + 1}: data residual {residual:.4g}")
            if np.abs(mismatch).max() < cfg.residual_tol or previous - residual < cfg.stall_tol * previous:
                break
            previous = residual
        u_p = state.u
        data_residuals.append(residual)
        logger.info(f"middle loop {middle + 1}/{cfg.middle_loop}: data residual {residual:.4g} after {step + 1} steps")
        if on_middle_loop is not None:
            on_middle_loop(middle, state.u)

    description = "Registering frames to the enhanced reference" if progress else None
    pullback = register_frames(state.u, frames, registration_cfg, description)
    inversions = parallel.ordered_map(lambda f: invert_field(f, registration_cfg.invert_iters), pullback)
    pushforward = [inv.field for inv in inversions]
    registered = np.stack([warp(frame, f) for frame, f in zip(frames, pushforward)])
    return EnhancementResult(
        reference=state.u,
        registered=registered,
        pullback=pullback,
        pushforward=pushforward,
        inversion_residuals=[inv.residual for inv in inversions],
        data_residuals=data_residuals,
    )


def _empty_graph(shape: tuple[int, int]) -> NltvGraph:
    empty = np.zeros(0, dtype=np.int64)
    return NltvGraph(tuple(shape), empty, empty, np.zeros(0), empty, 0)


def random_problem(size: int, rng: np.random.Generator, cfg: VariationalConfig = VariationalConfig(),
                   graph_cfg: GraphConfig = GraphConfig()) -> MixedRofProblem:
    """Random admissible mixed-ROF instance on a size x size image, for checks and benchmarks.

    Intensities are drawn in [0, 1] and scaled by ``cfg.intensity_scale`` as in
    the Bregman inner loop; the graph is built on the unscaled image.
    """
    image = rng.random((size, size))
    prior = np.clip(image + 0.05 * rng.standard_normal(image.shape), 0, 1)
    window = min(graph_cfg.window, size if size % 2 else size - 1)
    graph = build_graph(image, patch=min(graph_cfg.patch, window), window=window, k=graph_cfg.k, h=graph_cfg.h)
    scale = cfg.intensity_scale
    return MixedRofProblem(image * scale, prior * scale, graph, cfg.mu1, cfg.mu2, cfg.lambda1, cfg.lambda2)
