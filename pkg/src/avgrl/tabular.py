"""Tabular RVI Q-learning with a delayed f(Q) offset.

The Q table subtracts a scalar offset xi instead of a discount factor;
xi tracks a shift-linear reference functional f of the Q table on a
faster step-size schedule, so the Q update sees a smoothed, low-variance
estimate of the optimal gain. A clip keeps the offset inside the reward
band while xi settles. Differential Q-learning is the gain_sum
configuration of FChoice; it is not a separate algorithm here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from avgrl.mdp import TabularMdp, TabularPolicy, bellman_residual, evaluate_bias

TRACE_HEADER = "step,f_of_q,xi,bellman_residual,q_max_abs"


class InvalidScheduleError(ValueError):
    """Raised for step-size exponents outside the convergent range."""


def g_eta(x: float, r_inf: float, eta: float) -> float:
    """Clip to the band [-(r_inf + eta), r_inf + eta], boundaries saturating."""
    hi = r_inf + eta
    if x >= hi:
        return hi
    if x <= -hi:
        return -hi
    return x


@dataclass(frozen=True)
class FChoice:
    """A reference functional f of the Q table.

    Every kind is shift-linear and homogeneous: f(q + c) = f(q) + c*u and
    f(c*q) = c*f(q), which is what ties the learned offset to the optimal
    gain (rho* = f(q*) at the fixed point).

    Kinds:
      reference_state      f = q[s0, a0]                         u = 1
      reference_state_max  f = max_a q[s0, .]                    u = 1
      gain_sum             f = g * sum q                         u = g*S*A
      gain_max_sum         f = g * sum_s max_a q[s, .]           u = g*S
      batch_mean_max       f = mean over sampled s of max_a q    u = 1
    """

    kind: str
    ref_state: int = 0
    ref_action: int = 0
    gain: float = 1.0

    _KINDS = ("reference_state", "reference_state_max", "gain_sum", "gain_max_sum", "batch_mean_max")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown f kind {self.kind!r}")
        if self.kind in ("gain_sum", "gain_max_sum") and self.gain <= 0.0:
            raise ValueError("gain must be positive")

    @classmethod
    def reference_state(cls, s: int, a: int) -> "FChoice":
        return cls("reference_state", ref_state=s, ref_action=a)

    @classmethod
    def reference_state_max(cls, s: int) -> "FChoice":
        return cls("reference_state_max", ref_state=s)

    @classmethod
    def gain_sum(cls, gain: float) -> "FChoice":
        return cls("gain_sum", gain=gain)

    @classmethod
    def gain_max_sum(cls, gain: float) -> "FChoice":
        return cls("gain_max_sum", gain=gain)

    @classmethod
    def batch_mean_max(cls) -> "FChoice":
        return cls("batch_mean_max")

    def u(self, n_states: int, n_actions: int) -> float:
        """The shift coefficient: f(q + c) = f(q) + c * u."""
        if self.kind == "gain_sum":
            return self.gain * n_states * n_actions
        if self.kind == "gain_max_sum":
            return self.gain * n_states
        return 1.0

    def value(self, q: np.ndarray, sample: np.ndarray | None = None) -> float:
        """Evaluate f(q), or f(q; sample) for the mini-batch kind."""
        kind = self.kind
        if kind == "reference_state":
            return float(q[self.ref_state, self.ref_action])
        if kind == "reference_state_max":
            return float(q[self.ref_state].max())
        if kind == "gain_sum":
            return float(self.gain * q.sum())
        if kind == "gain_max_sum":
            return float(self.gain * q.max(axis=1).sum())
        if sample is None:
            raise ValueError("batch_mean_max requires a nonempty state sample")
        return float(q[sample].max(axis=1).mean())


def f_value(f: FChoice, q: np.ndarray, sample: np.ndarray | None = None) -> float:
    return f.value(q, sample)


@dataclass(frozen=True)
class StepSchedule:
    """Polynomial step size c(k) = c0 / (k + 1)^exponent.

    ``per_visit`` selects indexing by the per-(s,a) visit counter rather
    than the global step counter.
    """

    c0: float
    exponent: float
    per_visit: bool = False

    def __call__(self, k: int) -> float:
        return self.c0 / (k + 1.0) ** self.exponent


@dataclass(frozen=True)
class ScheduleReport:
    ok: bool
    window_sq_sums: np.ndarray
    window_sums: np.ndarray
    note: str = ""


@dataclass(frozen=True)
class PairReport:
    ok: bool
    ratios: np.ndarray
    note: str = ""


def make_schedule(
    c0: float, exponent: float, per_visit: bool = False, probe_horizon: int = 1 << 20
) -> tuple[StepSchedule, ScheduleReport]:
    """Build a schedule, rejecting exponents outside (0.5, 1].

    The report numerically corroborates the two step-size conditions over
    dyadic windows of the probe horizon: partial sums of c(k)^2 are
    Cauchy (window sums shrink geometrically) while c(k) itself is not
    summable fast (window sums shrink by less than half, the divergence
    signature of exponents <= 1).
    """
    if not 0.5 < exponent <= 1.0:
        raise InvalidScheduleError(
            f"exponent {exponent} outside (0.5, 1]: sum of c(k)^2 must converge"
        )
    if c0 < 0.0:
        raise InvalidScheduleError("c0 must be nonnegative")
    sched = StepSchedule(c0=c0, exponent=exponent, per_visit=per_visit)
    edges = 1 << np.arange(0, probe_horizon.bit_length())
    sq_sums, sums = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        k = np.arange(lo, hi, dtype=np.float64)
        c = sched.c0 / (k + 1.0) ** sched.exponent
        sq_sums.append(float(np.sum(c * c)))
        sums.append(float(np.sum(c)))
    sq_sums = np.array(sq_sums)
    sums = np.array(sums)
    cauchy_ok = bool(np.all(np.diff(sq_sums) < 0.0)) if c0 > 0 else True
    divergent_ok = bool(np.all(sums[1:] > 0.5 * sums[:-1])) if c0 > 0 else False
    return sched, ScheduleReport(
        ok=cauchy_ok and divergent_ok,
        window_sq_sums=sq_sums,
        window_sums=sums,
        note="dyadic window certificate" if c0 > 0 else "zero schedule (frozen variable)",
    )


def pair_report(fast: StepSchedule, slow: StepSchedule, probe_horizon: int = 1 << 20) -> PairReport:
    """Certify the two-timescale condition: slow(k)/fast(k) vanishes monotonically."""
    k = np.unique(np.geomspace(1, probe_horizon, 200).astype(np.int64)) - 1
    ratios = np.array([slow(int(i)) / fast(int(i)) for i in k])
    ok = bool(np.all(np.diff(ratios) < 0.0) and ratios[-1] < 0.1 * ratios[0])
    return PairReport(ok=ok, ratios=ratios, note=f"probed to k={probe_horizon}")


@dataclass
class ClipConfig:
    """Band for the offset actually used in Q updates: +-(r_inf + eta)."""

    r_inf: float
    eta: float = 1.0
    enabled: bool = True


@dataclass
class TabularTrainer:
    """Mutable state of one asynchronous tabular training run.

    Single-owner: one trainer per thread. ``fast_schedule`` drives xi,
    ``slow_schedule`` drives the Q table (per-visit by default), so the
    offset equilibrates quickly relative to the values it references.
    """

    q: np.ndarray
    f: FChoice
    fast_schedule: StepSchedule
    slow_schedule: StepSchedule
    clip: ClipConfig | None = None
    epsilon: float = 0.1
    xi: float = 0.0
    step: int = 0
    visit_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.visit_counts is None:
            self.visit_counts = np.zeros(self.q.shape, dtype=np.int64)

    def xi_hat(self) -> float:
        """The offset entering Q updates: xi, clipped to the band when enabled."""
        if self.clip is not None and self.clip.enabled:
            return g_eta(self.xi, self.clip.r_inf, self.clip.eta)
        return self.xi


def rvi_q_step(trainer: TabularTrainer, s: int, a: int, r: float, s_next: int) -> None:
    """One direct RVI Q-learning update: the offset is f of the current table."""
    q = trainer.q
    sched = trainer.slow_schedule
    alpha = sched(trainer.visit_counts[s, a]) if sched.per_visit else sched(trainer.step)
    q[s, a] += alpha * (r - trainer.f.value(q) + q[s_next].max() - q[s, a])
    trainer.visit_counts[s, a] += 1
    trainer.step += 1


def delayed_rvi_step(
    trainer: TabularTrainer,
    s: int,
    a: int,
    r: float,
    s_next: int,
    f_sample: np.ndarray | None = None,
) -> None:
    """One delayed-offset update: Q moves first against the clipped xi,
    then xi relaxes toward f of the just-updated table on the fast schedule."""
    q = trainer.q
    sched = trainer.slow_schedule
    b = sched(trainer.visit_counts[s, a]) if sched.per_visit else sched(trainer.step)
    q[s, a] += b * (r - trainer.xi_hat() + q[s_next].max() - q[s, a])
    trainer.visit_counts[s, a] += 1
    a_k = trainer.fast_schedule(trainer.step)
    trainer.xi += a_k * (trainer.f.value(q, f_sample) - trainer.xi)
    trainer.step += 1


@dataclass
class TabularTrainConfig:
    f: FChoice
    total_steps: int
    rng_seed: int
    algorithm: str = "delayed"  # "delayed" | "direct"
    fast: StepSchedule = field(default_factory=lambda: StepSchedule(1.0, 0.6))
    slow: StepSchedule = field(default_factory=lambda: StepSchedule(1.0, 0.9, per_visit=True))
    clip_enabled: bool = True
    clip_eta: float = 1.0
    epsilon: float = 0.1
    record_every: int = 1000
    batch_sample_size: int = 32  # only used by the batch_mean_max f kind


@dataclass
class TabularTrace:
    steps: np.ndarray
    f_of_q: np.ndarray
    xi: np.ndarray
    bellman_residual: np.ndarray
    q_max_abs: np.ndarray
    final_q: np.ndarray
    final_xi: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_HEADER.split(","))
            for row in zip(self.steps, self.f_of_q, self.xi, self.bellman_residual, self.q_max_abs):
                writer.writerow([int(row[0]), repr(row[1]), repr(row[2]), repr(row[3]), repr(row[4])])


def train_tabular(mdp: TabularMdp, config: TabularTrainConfig) -> TabularTrace:
    """Epsilon-greedy asynchronous training over a simulated chain.

    Deterministic given the seed. Records f(Q), xi, the optimality
    residual and sup|Q| on a fixed cadence; the behavior policy is
    epsilon-greedy over the live Q table, which keeps visitation adequate
    on ergodic chains.
    """
    if config.algorithm not in ("delayed", "direct"):
        raise ValueError(f"unknown algorithm {config.algorithm!r}")
    rng = np.random.default_rng(config.rng_seed)
    n_s, n_a = mdp.n_states, mdp.n_actions
    trainer = TabularTrainer(
        q=np.zeros((n_s, n_a)),
        f=config.f,
        fast_schedule=config.fast,
        slow_schedule=config.slow,
        clip=ClipConfig(r_inf=mdp.r_inf, eta=config.clip_eta, enabled=config.clip_enabled),
        epsilon=config.epsilon,
    )
    cum_p = np.cumsum(mdp.transition, axis=2)
    reward = mdp.reward
    delayed = config.algorithm == "delayed"
    batch_f = config.f.kind == "batch_mean_max"
    eps = trainer.epsilon

    records: list[tuple] = []

    def record(at_step: int) -> None:
        f_now = config.f.value(
            trainer.q,
            sample=np.arange(n_s) if batch_f else None,
        )
        records.append(
            (
                at_step,
                f_now,
                trainer.xi,
                bellman_residual(mdp, trainer.q, f_now),
                float(np.abs(trainer.q).max()),
            )
        )

    s = int(rng.integers(n_s))
    record(0)
    uniform = rng.random
    randint = rng.integers
    for k in range(config.total_steps):
        if uniform() < eps:
            a = int(randint(n_a))
        else:
            a = int(trainer.q[s].argmax())
        s_next = int(np.searchsorted(cum_p[s, a], uniform()))
        r = reward[s, a]
        if delayed:
            f_sample = None
            if batch_f:
                visited = np.flatnonzero(trainer.visit_counts.sum(axis=1))
                pool = visited if visited.size else np.array([s])
                f_sample = pool[randint(pool.size, size=config.batch_sample_size)]
            delayed_rvi_step(trainer, s, a, r, s_next, f_sample)
        else:
            rvi_q_step(trainer, s, a, r, s_next)
        s = s_next
        if (k + 1) % config.record_every == 0:
            record(k + 1)

    cols = list(zip(*records))
    return TabularTrace(
        steps=np.array(cols[0], dtype=np.int64),
        f_of_q=np.array(cols[1]),
        xi=np.array(cols[2]),
        bellman_residual=np.array(cols[3]),
        q_max_abs=np.array(cols[4]),
        final_q=trainer.q.copy(),
        final_xi=trainer.xi,
    )


def soft_policy_improve(mdp: TabularMdp, policy: TabularPolicy) -> TabularPolicy:
    """Boltzmann reweighting over the policy's own soft Q values.

    Evaluates the entropy-augmented bias of the current policy and
    returns pi_new(a|s) proportional to exp(Q(s,a)). The soft average
    reward never decreases under this map, and its fixed points are
    policies that are already Boltzmann in their own soft Q.
    """
    _, q = evaluate_bias(mdp, policy, entropy_augmented=True)
    logits = q - q.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return TabularPolicy(weights / weights.sum(axis=1, keepdims=True))
