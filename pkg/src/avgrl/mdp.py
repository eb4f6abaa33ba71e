"""Finite-MDP data model and exact average-reward solvers.

Everything in this module is a pure function over immutable numpy inputs;
these solvers are the ground truth that the learning code is tested
against. All numerics are float64: a dense direct solve is cheap at the
scale of a few hundred states, and the oracle/gradient agreement tests
need the headroom.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.csgraph

QTable = np.ndarray  # real matrix indexed (state, action), finite entries

_ROW_SUM_TOL = 1e-12
_BALANCE_TOL = 1e-8
_NORMALIZATION_TOL = 1e-10
_POISSON_RESIDUAL_TOL = 1e-9


class MdpValidationError(ValueError):
    """Raised when a transition tensor, reward matrix, or policy is malformed."""


class DegeneracyError(ArithmeticError):
    """Raised when a chain is not ergodic enough for a unique solution."""


class NonConvergenceError(ArithmeticError):
    """Raised when an iterative solver exhausts its budget.

    Carries the last sup-norm residual so callers can distinguish
    near-misses from divergence.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class EnumerationSizeError(ValueError):
    """Raised when brute-force policy enumeration would exceed its guard."""


@dataclass(frozen=True)
class TabularMdp:
    """A finite MDP: transition tensor p(s'|s,a), reward matrix r(s,a).

    ``r_inf`` is the reward bound sup |r|; ``terminal_mask`` marks states
    whose entry triggers an environment reset (empty/False for purely
    continuing MDPs).
    """

    n_states: int
    n_actions: int
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    r_inf: float
    terminal_mask: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=np.float64))
        object.__setattr__(self, "reward", np.asarray(self.reward, dtype=np.float64))
        if self.terminal_mask is not None:
            object.__setattr__(self, "terminal_mask", np.asarray(self.terminal_mask, dtype=bool))
        self.validate()

    def validate(self):
        s, a = self.n_states, self.n_actions
        if s < 1 or a < 1:
            raise MdpValidationError("n_states and n_actions must be positive")
        if self.transition.shape != (s, a, s):
            raise MdpValidationError(
                f"transition shape {self.transition.shape} != {(s, a, s)}"
            )
        if self.reward.shape != (s, a):
            raise MdpValidationError(f"reward shape {self.reward.shape} != {(s, a)}")
        if np.any(self.transition < 0.0):
            raise MdpValidationError("transition entries must be nonnegative")
        row_sums = self.transition.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > _ROW_SUM_TOL:
            raise MdpValidationError("transition rows must sum to 1 within 1e-12")
        if self.r_inf < 0.0:
            raise MdpValidationError("r_inf must be nonnegative")
        if np.max(np.abs(self.reward)) > self.r_inf + 1e-12:
            raise MdpValidationError("|reward| must be bounded by r_inf")
        if self.terminal_mask is not None and self.terminal_mask.shape != (s,):
            raise MdpValidationError("terminal_mask must have one entry per state")

    def policy_transition(self, policy: "TabularPolicy") -> np.ndarray:
        """State transition matrix P_pi(s'|s) induced by a policy."""
        return np.einsum("sa,sat->st", policy.probs, self.transition)

    def policy_reward(self, policy: "TabularPolicy") -> np.ndarray:
        """Expected one-step reward r_pi(s) under a policy."""
        return np.einsum("sa,sa->s", policy.probs, self.reward)

    def to_json_dict(self) -> dict:
        doc = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "r_inf": self.r_inf,
        }
        if self.terminal_mask is not None:
            doc["terminal"] = self.terminal_mask.tolist()
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TabularMdp":
        for key in ("n_states", "n_actions", "transition", "reward", "r_inf"):
            if key not in doc:
                raise MdpValidationError(f"MDP document missing field '{key}'")
        return cls(
            n_states=int(doc["n_states"]),
            n_actions=int(doc["n_actions"]),
            transition=np.asarray(doc["transition"], dtype=np.float64),
            reward=np.asarray(doc["reward"], dtype=np.float64),
            r_inf=float(doc["r_inf"]),
            terminal_mask=np.asarray(doc["terminal"], dtype=bool) if "terminal" in doc else None,
        )

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load_json(cls, path) -> "TabularMdp":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class TabularPolicy:
    """Stationary Markov policy: probs[s, a] = pi(a|s), rows on the simplex."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.ndim != 2:
            raise MdpValidationError("policy must be a (states x actions) matrix")
        if np.any(self.probs < 0.0):
            raise MdpValidationError("policy entries must be nonnegative")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > _ROW_SUM_TOL:
            raise MdpValidationError("policy rows must sum to 1 within 1e-12")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: np.ndarray, n_actions: int) -> "TabularPolicy":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    def greedy_actions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def is_deterministic(self) -> bool:
        return bool(np.all(self.probs.max(axis=1) == 1.0))


@dataclass(frozen=True)
class StationaryDistribution:
    """Stationary state distribution d(s) of an ergodic induced chain."""

    d: np.ndarray

    def joint(self, policy: TabularPolicy) -> np.ndarray:
        """State-action occupancy d(s, a) = d(s) * pi(a|s)."""
        return self.d[:, None] * policy.probs


@dataclass(frozen=True)
class ErgodicityReport:
    ok: bool
    witness: TabularPolicy | None = None
    detail: str = ""


def _chain_is_ergodic(p_pi: np.ndarray) -> bool:
    """Irreducible (one strongly connected class) and aperiodic.

    Aperiodicity is read off the spectrum: an irreducible row-stochastic
    matrix has exactly one eigenvalue on the unit circle iff the chain is
    aperiodic, so we require a single eigenvalue of modulus >= 1 - 1e-9.
    """
    n = p_pi.shape[0]
    if n == 1:
        return True
    n_comp, _ = scipy.sparse.csgraph.connected_components(
        p_pi > 0.0, directed=True, connection="strong"
    )
    if n_comp != 1:
        return False
    moduli = np.abs(np.linalg.eigvals(p_pi))
    return int(np.sum(moduli >= 1.0 - 1e-9)) == 1


def validate_ergodic(
    mdp: TabularMdp, n_probe_policies: int = 10, rng_seed: int = 0
) -> ErgodicityReport:
    """Probabilistic ergodicity check over randomly probed policies.

    A strictly positive transition tensor is sufficient and short-circuits
    the probe loop. Otherwise both interior (Dirichlet) and deterministic
    random policies are probed; reducible or periodic induced chains fail
    and the violating policy is returned as a witness. Passing probes do
    not prove ergodicity over all policies.
    """
    mdp.validate()
    if np.all(mdp.transition > 0.0):
        return ErgodicityReport(ok=True, detail="all transition entries positive")
    rng = np.random.default_rng(rng_seed)
    s, a = mdp.n_states, mdp.n_actions
    probes: list[TabularPolicy] = []
    for _ in range(n_probe_policies):
        probes.append(TabularPolicy(rng.dirichlet(np.ones(a), size=s)))
        probes.append(TabularPolicy.deterministic(rng.integers(0, a, size=s), a))
    for policy in probes:
        if not _chain_is_ergodic(mdp.policy_transition(policy)):
            return ErgodicityReport(ok=False, witness=policy, detail="probe induced a non-ergodic chain")
    return ErgodicityReport(ok=True, detail=f"{len(probes)} probes passed")


def stationary_distribution(mdp: TabularMdp, policy: TabularPolicy) -> StationaryDistribution:
    """Solve d^T P_pi = d^T, sum(d) = 1 by a dense direct linear solve.

    The balance system (P_pi^T - I) d = 0 is augmented with a
    normalization row and solved by least squares; a rank check rejects
    chains whose stationary distribution is not unique.
    """
    p_pi = mdp.policy_transition(policy)
    n = mdp.n_states
    core = p_pi.T - np.eye(n)
    if np.linalg.matrix_rank(core, tol=1e-10) < n - 1:
        raise DegeneracyError("induced chain has no unique stationary distribution")
    a_mat = np.vstack([core, np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    d, *_ = np.linalg.lstsq(a_mat, b, rcond=None)
    d = np.where(np.abs(d) < 1e-14, 0.0, d)
    if np.any(d < 0.0):
        raise DegeneracyError("stationary solve produced negative mass")
    d = d / d.sum()
    if np.max(np.abs(d @ p_pi - d)) > _BALANCE_TOL:
        raise DegeneracyError("stationary solve failed the balance equation")
    return StationaryDistribution(d=d)


def stationary_distribution_power(
    mdp: TabularMdp, policy: TabularPolicy, tol: float = 1e-13, max_iter: int = 1_000_000
) -> StationaryDistribution:
    """Independent cross-check of the direct solve via power iteration."""
    p_pi = mdp.policy_transition(policy)
    d = np.full(mdp.n_states, 1.0 / mdp.n_states)
    for _ in range(max_iter):
        d_next = d @ p_pi
        if np.max(np.abs(d_next - d)) < tol:
            return StationaryDistribution(d=d_next / d_next.sum())
        d = d_next
    raise NonConvergenceError("power iteration did not converge", float(np.max(np.abs(d @ p_pi - d))))


def average_reward(mdp: TabularMdp, policy: TabularPolicy) -> float:
    """Long-run reward per step: sum_{s,a} d(s,a) r(s,a)."""
    d_sa = stationary_distribution(mdp, policy).joint(policy)
    return float(np.sum(d_sa * mdp.reward))


def _policy_entropy(policy: TabularPolicy) -> np.ndarray:
    """Per-state entropy -sum_a pi log pi with the 0 log 0 := 0 convention."""
    p = policy.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0.0, p * np.log(p), 0.0)
    return -plogp.sum(axis=1)


def soft_average_reward(mdp: TabularMdp, policy: TabularPolicy) -> float:
    """Average of the entropy-augmented reward r(s,a) - log pi(a|s)."""
    dist = stationary_distribution(mdp, policy)
    d_sa = dist.joint(policy)
    return float(np.sum(d_sa * mdp.reward) + np.sum(dist.d * _policy_entropy(policy)))


def evaluate_bias(
    mdp: TabularMdp, policy: TabularPolicy, entropy_augmented: bool = False
) -> tuple[float, QTable]:
    """Solve the average-reward Poisson equation for a fixed policy.

    Returns (rho, Q) with
        Q(s,a) = r(s,a) - rho + sum_{s'} p(s'|s,a) sum_{a'} pi(a'|s') (Q(s',a') - ent)
    where ent = log pi(a'|s') in the entropy-augmented variant and 0
    otherwise. The additive-constant gauge is fixed by zero mean of Q
    under the stationary state-action distribution.
    """
    s, a = mdp.n_states, mdp.n_actions
    dist = stationary_distribution(mdp, policy)
    d_sa = dist.joint(policy)

    n = s * a
    # Row layout: unknowns [Q(0,0), Q(0,1), ..., Q(S-1,A-1), rho].
    sys_a = np.zeros((n + 1, n + 1))
    sys_b = np.zeros(n + 1)
    # p(s'|s,a) pi(a'|s') as an (s, a, s', a') tensor flattened into (n, n).
    flow = np.einsum("sat,tb->satb", mdp.transition, policy.probs).reshape(n, n)
    sys_a[:n, :n] = np.eye(n) - flow
    sys_a[:n, n] = 1.0
    rhs = mdp.reward.reshape(n).copy()
    if entropy_augmented:
        rhs += mdp.transition.reshape(n, s) @ _policy_entropy(policy)
    sys_b[:n] = rhs
    sys_a[n, :n] = d_sa.reshape(n)  # gauge row: E_d[Q] = 0
    try:
        sol = np.linalg.solve(sys_a, sys_b)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(f"Poisson system is singular: {exc}") from exc
    q = sol[:n].reshape(s, a)
    rho = float(sol[n])
    residual = np.max(np.abs(rhs.reshape(s, a) - rho + (flow @ sol[:n]).reshape(s, a) - q))
    if residual > _POISSON_RESIDUAL_TOL:
        raise DegeneracyError(f"Poisson residual {residual:.2e} above tolerance")
    return rho, q


def bellman_residual(mdp: TabularMdp, q: QTable, rho: float) -> float:
    """Sup-norm residual of the average-reward optimality equation."""
    backup = mdp.reward - rho + np.tensordot(mdp.transition, q.max(axis=1), axes=([2], [0]))
    return float(np.max(np.abs(backup - q)))


def solve_optimal_rvi(
    mdp: TabularMdp,
    f,
    tol: float = 1e-10,
    max_iter: int = 200_000,
) -> tuple[float, QTable]:
    """Synchronous relative value iteration Q <- T(Q) - f(Q) e.

    ``f`` is a shift-linear reference functional of the Q table (an
    FChoice or any callable q -> float). At the fixed point the optimal
    gain satisfies rho* = f(q*); convergence requires the MDP to be
    ergodic (and in particular aperiodic) under its greedy policies.
    """
    f_fn = f.value if hasattr(f, "value") else f
    q = np.zeros((mdp.n_states, mdp.n_actions))
    change = np.inf
    for _ in range(max_iter):
        backup = mdp.reward + np.tensordot(mdp.transition, q.max(axis=1), axes=([2], [0]))
        q_next = backup - f_fn(q)
        change = float(np.max(np.abs(q_next - q)))
        q = q_next
        if change < tol:
            rho = float(f_fn(q))
            return rho, q
    raise NonConvergenceError("relative value iteration did not converge", change)


def enumerate_optimal(
    mdp: TabularMdp, guard: int = 1_000_000
) -> tuple[float, TabularPolicy]:
    """Brute-force optimal gain by evaluating every deterministic policy."""
    n_policies = mdp.n_actions**mdp.n_states
    if n_policies > guard:
        raise EnumerationSizeError(
            f"{mdp.n_actions}^{mdp.n_states} = {n_policies} deterministic policies exceeds guard {guard}"
        )
    best_rho = -np.inf
    best_actions = None
    for actions in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        policy = TabularPolicy.deterministic(np.array(actions), mdp.n_actions)
        rho = average_reward(mdp, policy)
        if rho > best_rho:
            best_rho = rho
            best_actions = actions
    return float(best_rho), TabularPolicy.deterministic(np.array(best_actions), mdp.n_actions)
