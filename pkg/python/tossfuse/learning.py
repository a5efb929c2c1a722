"""
    Learning contact geometry and friction from pose trajectories.

    Every transition `(x, u, x')` scores a candidate contact model by the
    best impulse explaining it: the weighted sum of prediction error,
    complementarity violation, penetration and dissipation violation,
    minimised over the friction cones. That inner problem is a convex
    quadratic program, solved batched by accelerated projected gradient in
    `(lambda_n, beta)` with `lambda_t = mu * beta`, so the feasible set does
    not move with `mu`. The outer loop differentiates the loss at the inner
    optimum (envelope theorem) with respect to vertices and `mu`.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from tossfuse.config import ImpulseSolverConfig, TrainConfig
from tossfuse.dynamics import GRAVITY, ContactImpulse, ContactModel, StateTransition, phi
from tossfuse.errors import InvalidInputError, UninformativeDataError
from tossfuse.geometry import TriangleMesh, convex_hull_mesh
from tossfuse.sampler import TransitionSampler

logger = logging.getLogger(__name__)

DTYPE = torch.float64
LOSS_TERMS = ('prediction', 'complementarity', 'penetration', 'dissipation')
# Contact-frame row order: normal, then the two tangents.
FRAME_ROWS = [2, 0, 1]


def _tensor(value) -> torch.Tensor:
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


@dataclass
class TransitionBatch:
    rotation: torch.Tensor
    position: torch.Tensor
    velocity: torch.Tensor
    next_rotation: torch.Tensor
    next_position: torch.Tensor
    next_velocity: torch.Tensor
    impulse: torch.Tensor
    dt: torch.Tensor

    @classmethod
    def from_transitions(cls, transitions: Sequence[StateTransition]) -> 'TransitionBatch':
        if not len(transitions):
            raise InvalidInputError('no transitions given')
        return cls(
            _tensor([t.state.pose.matrix for t in transitions]),
            _tensor([t.state.pose.translation for t in transitions]),
            _tensor([t.state.velocity for t in transitions]),
            _tensor([t.next_state.pose.matrix for t in transitions]),
            _tensor([t.next_state.pose.translation for t in transitions]),
            _tensor([t.next_state.velocity for t in transitions]),
            _tensor([t.impulse for t in transitions]),
            _tensor([t.dt for t in transitions]),
        )

    def __len__(self) -> int:
        return self.dt.shape[0]

    def select(self, index) -> 'TransitionBatch':
        return TransitionBatch(*(getattr(self, name)[index] for name in self.__dataclass_fields__))


def _heights(rotation: torch.Tensor, position: torch.Tensor, vertices: torch.Tensor) -> torch.Tensor:
    return torch.einsum('bj,kj->bk', rotation[:, 2, :], vertices) + position[:, None, 2]


def _directions(rotation: torch.Tensor, vertices: torch.Tensor) -> torch.Tensor:
    """
    `(B, K, 3, 6)`: generalized direction of a unit impulse along each
    contact-frame axis, equal to the rows of the contact Jacobian.
    """
    batch, count = rotation.shape[0], vertices.shape[0]
    rows = rotation[:, FRAME_ROWS, :][:, None, :, :].expand(batch, count, 3, 3)
    arms = vertices[None, :, None, :].expand(batch, count, 3, 3)
    linear = torch.eye(3, dtype=DTYPE)[FRAME_ROWS].expand(batch, count, 3, 3)
    return torch.cat([linear, torch.linalg.cross(arms, rows, dim=-1)], dim=-1)


def _mass_matrices(model: ContactModel) -> Tuple[torch.Tensor, torch.Tensor]:
    return _tensor(model.mass_matrix), _tensor(model.inverse_mass_matrix)


def _momentum_gap(batch: TransitionBatch, model: ContactModel, mass: torch.Tensor) -> torch.Tensor:
    """`M (v' - v) - dt f_gravity - u`, what contact impulses must explain."""
    gravity = torch.zeros(6, dtype=DTYPE)
    gravity[2] = -model.mass * GRAVITY
    return (batch.next_velocity - batch.velocity) @ mass - batch.dt[:, None] * gravity - batch.impulse


def _tangential_velocity(batch: TransitionBatch, vertices: torch.Tensor) -> torch.Tensor:
    directions = _directions(batch.next_rotation, vertices)
    return torch.einsum('bkdj,bj->bkd', directions, batch.next_velocity)[..., 1:]


def _safe_norm(vectors: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.clamp((vectors * vectors).sum(-1), min=1e-30))


def loss_terms(batch: TransitionBatch, model: ContactModel, vertices: torch.Tensor, mu: torch.Tensor,
               impulses: torch.Tensor) -> Dict[str, torch.Tensor]:
    """
    Per-transition loss components for `(B, K, 3)` impulses in contact-frame
    order. Differentiable in `vertices`, `mu` and `impulses`.
    """
    mass, inverse_mass = _mass_matrices(model)
    directions = _directions(batch.rotation, vertices)
    residual = _momentum_gap(batch, model, mass) - torch.einsum('bkdj,bkd->bj', directions, impulses)
    prediction = torch.einsum('bi,ij,bj->b', residual, inverse_mass, residual)

    heights = _heights(batch.next_rotation, batch.next_position, vertices)
    normal = impulses[..., 0]
    complementarity = ((normal * heights) ** 2).sum(-1)
    penetration = (torch.relu(-heights) ** 2).sum(-1)

    sliding = _tangential_velocity(batch, vertices)
    power = (impulses[..., 1:] * sliding).sum(-1) + mu * normal * _safe_norm(sliding)
    dissipation = (power ** 2).sum(-1)
    return dict(zip(LOSS_TERMS, (prediction, complementarity, penetration, dissipation)))


def weighted_total(terms: Dict[str, torch.Tensor], weights: Sequence[float]) -> torch.Tensor:
    return sum(w * terms[name] for w, name in zip(weights, LOSS_TERMS))


def _scale(mu: torch.Tensor) -> torch.Tensor:
    one = torch.ones((), dtype=DTYPE)
    return torch.stack([one, mu * one, mu * one])


def inner_quadratic(batch: TransitionBatch, model: ContactModel, vertices: torch.Tensor, mu: torch.Tensor,
                    weights: Sequence[float]) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    `Q (B, 3K, 3K)` and `b (B, 3K)` such that the loss in `z = (lambda_n, beta)`
    is `z'Qz - 2b'z + const`.
    """
    c_pred, c_comp, _, c_diss = weights
    mass, inverse_mass = _mass_matrices(model)
    count = vertices.shape[0]
    columns = (_directions(batch.rotation, vertices) * _scale(mu)[None, None, :, None]).reshape(len(batch), 3 * count, 6)
    quadratic = c_pred * columns @ inverse_mass @ columns.transpose(1, 2)
    linear = c_pred * columns @ inverse_mass @ _momentum_gap(batch, model, mass)[:, :, None]

    heights = _heights(batch.next_rotation, batch.next_position, vertices)
    diagonal = torch.zeros(len(batch), count, 3, dtype=DTYPE)
    diagonal[..., 0] = c_comp * heights ** 2
    quadratic = quadratic + torch.diag_embed(diagonal.reshape(len(batch), -1))

    sliding = _tangential_velocity(batch, vertices)
    direction = torch.cat([_safe_norm(sliding)[..., None], sliding], dim=-1)
    blocks = c_diss * mu ** 2 * direction[..., :, None] * direction[..., None, :]
    quadratic = quadratic + _block_diagonal(blocks)
    return quadratic, linear[..., 0]


def _block_diagonal(blocks: torch.Tensor) -> torch.Tensor:
    """`(B, K, 3, 3)` blocks into `(B, 3K, 3K)` block-diagonal matrices."""
    batch, count = blocks.shape[:2]
    eye = torch.eye(count, dtype=blocks.dtype)
    return torch.einsum('bkij,kl->bkilj', blocks, eye).reshape(batch, 3 * count, 3 * count)


def project_cones(z: torch.Tensor) -> torch.Tensor:
    """Second-order cone projection of each `(lambda_n, beta)` triple."""
    shape = z.shape
    z = z.reshape(shape[0], -1, 3)
    s, x = z[..., 0], z[..., 1:]
    norm = torch.linalg.norm(x, dim=-1)
    inside = norm <= s
    polar = norm <= -s
    half = 0.5 * (s + norm)
    unit = x / torch.clamp(norm, min=1e-300)[..., None]
    projected = torch.cat([half[..., None], half[..., None] * unit], dim=-1)
    projected = torch.where(inside[..., None], z, projected)
    projected = torch.where(polar[..., None], torch.zeros_like(z), projected)
    return projected.reshape(shape)


@dataclass
class InnerSolution:
    z: torch.Tensor
    residual: torch.Tensor
    iterations: int

    def converged(self, tolerance: float) -> torch.Tensor:
        return self.residual < tolerance


def solve_inner(quadratic: torch.Tensor, linear: torch.Tensor, config: Optional[ImpulseSolverConfig] = None,
                warm_start: Optional[torch.Tensor] = None) -> InnerSolution:
    """
    Accelerated projected gradient on `z'Qz - 2b'z` over the cones, step
    `1 / L` from the exact Lipschitz constant, restarted whenever momentum
    points uphill. Returns the iterate with the smallest stationarity residual.
    """
    config = config or ImpulseSolverConfig()
    lipschitz = torch.clamp(2.0 * torch.linalg.eigvalsh(quadratic)[:, -1], min=1e-12)[:, None]

    def gradient(z):
        return 2.0 * ((quadratic @ z[:, :, None])[..., 0] - linear)

    def stationarity(z):
        mapped = project_cones(z - gradient(z) / lipschitz)
        return (lipschitz * (z - mapped)).abs().amax(dim=1)

    z = project_cones(torch.zeros_like(linear) if warm_start is None else warm_start.clone())
    best, best_residual = z.clone(), stationarity(z)
    momentum = z.clone()
    t = torch.ones(len(linear), 1, dtype=DTYPE)
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        if bool((best_residual < config.tolerance).all()):
            iterations -= 1
            break
        step = project_cones(momentum - gradient(momentum) / lipschitz)
        uphill = ((momentum - step) * (step - z)).sum(dim=1, keepdim=True) > 0
        t_next = 0.5 * (1.0 + torch.sqrt(1.0 + 4.0 * t * t))
        t_next = torch.where(uphill, torch.ones_like(t), t_next)
        momentum = torch.where(uphill, step, step + ((t - 1.0) / t_next) * (step - z))
        z, t = step, t_next
        residual = stationarity(z)
        better = residual < best_residual
        best = torch.where(better[:, None], z, best)
        best_residual = torch.where(better, residual, best_residual)
    return InnerSolution(best, best_residual, iterations)


def _parameters(model: ContactModel) -> Tuple[torch.Tensor, torch.Tensor]:
    return _tensor(model.vertices), torch.tensor(model.mu, dtype=DTYPE)


def _impulse_from_z(z: torch.Tensor, mu: float, count: int) -> ContactImpulse:
    stacked = z.reshape(count, 3).detach().numpy().copy()
    return ContactImpulse(stacked[:, 0].copy(), mu * stacked[:, 1:])


def solve_impulses(model: ContactModel, transition: StateTransition,
                   weights: Sequence[float] = TrainConfig().loss_weights,
                   config: Optional[ImpulseSolverConfig] = None) -> ContactImpulse:
    """
    Loss-minimising impulse for one transition. The result lies inside the
    friction cones; `converged` is cleared when the iteration cap was hit.
    """
    config = config or ImpulseSolverConfig()
    batch = TransitionBatch.from_transitions([transition])
    vertices, mu = _parameters(model)
    with torch.no_grad():
        quadratic, linear = inner_quadratic(batch, model, vertices, mu, weights)
        solution = solve_inner(quadratic, linear, config)
    impulse = _impulse_from_z(solution.z[0], model.mu, len(model.vertices))
    impulse.iterations = solution.iterations
    impulse.residual = float(solution.residual[0])
    impulse.converged = bool(solution.residual[0] < config.tolerance)
    if not impulse.converged:
        logger.warning('Impulse solve stopped at residual %.2e', impulse.residual)
    return impulse


def contactnets_loss(model: ContactModel, transition: StateTransition, impulse: ContactImpulse,
                     weights: Sequence[float] = TrainConfig().loss_weights) -> Tuple[float, Dict[str, float]]:
    """
    Weighted total and the four components for a given impulse.
    """
    if len(impulse.normal) != len(model.vertices):
        raise InvalidInputError('impulse and model disagree on the contact count')
    if impulse.cone_violation(model.mu) > 1e-12:
        raise InvalidInputError('impulse lies outside the friction cone')
    batch = TransitionBatch.from_transitions([transition])
    vertices, mu = _parameters(model)
    with torch.no_grad():
        terms = loss_terms(batch, model, vertices, mu, _tensor(impulse.stacked())[None])
        total = weighted_total(terms, weights)
    return float(total[0]), {name: float(value[0]) for name, value in terms.items()}


def loss_gradients(model: ContactModel, transition: StateTransition, impulse: ContactImpulse,
                   term: Optional[str] = None,
                   weights: Sequence[float] = TrainConfig().loss_weights) -> Tuple[np.ndarray, float]:
    """
    Gradient of one loss term (or the weighted total) with respect to the
    vertices and `mu`, impulse held fixed.
    """
    batch = TransitionBatch.from_transitions([transition])
    vertices, mu = _parameters(model)
    vertices.requires_grad_(True)
    mu.requires_grad_(True)
    terms = loss_terms(batch, model, vertices, mu, _tensor(impulse.stacked())[None])
    value = (terms[term] if term else weighted_total(terms, weights)).sum()
    grad_vertices, grad_mu = torch.autograd.grad(value, (vertices, mu), allow_unused=True)
    grad_vertices = np.zeros_like(model.vertices) if grad_vertices is None else grad_vertices.numpy()
    return grad_vertices, 0.0 if grad_mu is None else float(grad_mu)


def contact_active(model: ContactModel, transitions: Sequence[StateTransition], margin: float) -> np.ndarray:
    return np.array([min(phi(model, t.state.pose).min(), phi(model, t.next_state.pose).min()) < margin
                     for t in transitions])


@dataclass
class TrainResult:
    model: ContactModel
    initial_loss: float
    final_loss: float
    history: List[float] = field(default_factory=list)
    epochs: int = 0
    unconverged_solves: int = 0


def _dataset_loss(batch, model, vertices, mu, weights, solver, warm):
    with torch.no_grad():
        quadratic, linear = inner_quadratic(batch, model, vertices, mu, weights)
        solution = solve_inner(quadratic, linear, solver, warm)
    impulses = solution.z.reshape(len(batch), -1, 3) * _scale(mu)
    total = weighted_total(loss_terms(batch, model, vertices, mu, impulses), weights).sum()
    return total, solution


def fit(initial_model: ContactModel, transitions: Sequence[StateTransition],
        config: Optional[TrainConfig] = None) -> TrainResult:
    """
    Outer gradient descent on vertices and `mu`, returning the best model seen.
    """
    config = config or TrainConfig()
    if not len(transitions):
        raise InvalidInputError('no transitions to learn from')
    active = contact_active(initial_model, transitions, config.contact_margin)
    if not active.any():
        raise UninformativeDataError(
            f'none of {len(transitions)} transitions comes within {config.contact_margin} m of the ground')

    torch.manual_seed(config.seed)
    batch = TransitionBatch.from_transitions(transitions)
    weights = config.loss_weights
    vertices, mu = _parameters(initial_model)
    vertices.requires_grad_(True)
    mu.requires_grad_(config.learn_mu)
    groups = [{'params': [vertices], 'lr': config.lr_vertices}]
    if config.learn_mu:
        groups.append({'params': [mu], 'lr': config.lr_mu})
    optimizer = torch.optim.Adam(groups) if config.optimizer == 'adam' else torch.optim.SGD(groups)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(config.epochs, 1)) \
        if config.cosine_decay else None
    sampler = TransitionSampler(len(batch), config.batch_size, random=config.batch_size > 0, seed=config.seed)
    full_batch = len(sampler) == 1

    warm = torch.zeros(len(batch), 3 * len(initial_model.vertices), dtype=DTYPE)
    history: List[float] = []
    best = None
    unconverged = 0
    epoch = 0
    for epoch in range(config.epochs + 1):
        total, solution = _dataset_loss(batch, initial_model, vertices, mu, weights, config.solver, warm)
        warm = solution.z
        unconverged += int((~solution.converged(config.solver.tolerance)).sum())
        value = float(total.detach())
        history.append(value)
        if best is None or value < best[0]:
            best = (value, vertices.detach().clone(), float(mu.detach()))
        if epoch % 50 == 0:
            logger.info('Epoch %d: loss %.6e, mu %.4f', epoch, value, float(mu.detach()))
        if epoch == config.epochs:
            break
        window = config.early_stop_window
        if len(history) > window:
            reference = history[-1 - window]
            if abs(reference - value) <= config.early_stop_tol * max(abs(reference), 1e-300):
                logger.info('Early stop at epoch %d', epoch)
                break

        if full_batch:
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
        else:
            for index in sampler:
                index = torch.as_tensor(index)
                sub = batch.select(index)
                sub_total, sub_solution = _dataset_loss(sub, initial_model, vertices, mu, weights,
                                                        config.solver, warm[index])
                warm[index] = sub_solution.z
                optimizer.zero_grad()
                sub_total.backward()
                optimizer.step()
        with torch.no_grad():
            mu.clamp_(min=0.0)
        if schedule is not None:
            schedule.step()

    if unconverged:
        logger.warning('%d inner solves hit the iteration cap', unconverged)
    best_loss, best_vertices, best_mu = best
    model = initial_model.replace(vertices=best_vertices.numpy().copy(), mu=best_mu)
    logger.info('Trained %d epochs: loss %.6e -> %.6e, mu %.4f -> %.4f',
                epoch, history[0], best_loss, initial_model.mu, best_mu)
    return TrainResult(model, history[0], best_loss, history, epoch, unconverged)


def train(initial_model: ContactModel, transitions: Sequence[StateTransition],
          config: Optional[TrainConfig] = None) -> ContactModel:
    return fit(initial_model, transitions, config).model


def refined_geometry(model: ContactModel) -> TriangleMesh:
    """Convex hull of the learned contact vertices."""
    return convex_hull_mesh(model.vertices)
