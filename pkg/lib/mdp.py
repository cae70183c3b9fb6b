import math
from collections import defaultdict
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import pandas as pd

from database.schema.models import MdpInstance, SinkReturn
from lib.distributions import DiscreteDistribution, Distribution
from settings import MAX_TRAJECTORIES
from utils.errors import (
    EmptyUpperTailError,
    InvalidMdpError,
    InvalidParameterError,
    SizeBoundExceededError,
    SupportMismatchError,
)
from utils.logger import get_logger

logger = get_logger(__name__)

Trajectory = tuple[str, ...]  # (s0, a0, s1, a1, ..., sn) with sn a sink


@dataclass(frozen=True)
class Dmrmdp:
    """Deterministic transitions, returns attached to sink states."""

    states: tuple[str, ...]
    actions: tuple[str, ...]
    transitions: dict[str, dict[str, str]]
    start: dict[str, float]
    sinks: frozenset[str]
    returns: dict[str, DiscreteDistribution]
    max_depth: int
    graph: nx.DiGraph = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "graph", self._build_graph())
        self.validate()

    def _build_graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.states)
        for state, row in self.transitions.items():
            for action, target in row.items():
                graph.add_edge(state, target)
        return graph

    def validate(self):
        known = set(self.states)
        for state in self.states:
            if state in self.sinks:
                if self.transitions.get(state):
                    raise InvalidMdpError(f"sink '{state}' has outgoing transitions")
                if state not in self.returns:
                    raise InvalidMdpError(f"sink '{state}' has no return distribution")
                continue
            row = self.transitions.get(state, {})
            missing = [a for a in self.actions if a not in row]
            if missing:
                raise InvalidMdpError(f"state '{state}' lacks transitions for actions {missing}")
            unknown = [s for s in row.values() if s not in known]
            if unknown:
                raise InvalidMdpError(f"state '{state}' transitions to unknown states {unknown}")

        total = sum(self.start.values())
        if abs(total - 1.0) > 1e-12 or any(p < 0 for p in self.start.values()):
            raise InvalidMdpError(f"start distribution must be a probability vector (sums to {total})")
        overlap = [s for s, p in self.start.items() if p > 0 and (s in self.sinks or s not in known)]
        if overlap:
            raise InvalidMdpError(f"start support must be non-sink states, got {overlap}")

        if not nx.is_directed_acyclic_graph(self.graph):
            cycle = nx.find_cycle(self.graph)
            raise InvalidMdpError(f"transition graph has a cycle {cycle}; trajectories would not terminate")
        longest = nx.dag_longest_path_length(self.graph)
        if longest > self.max_depth:
            raise InvalidMdpError(f"longest path {longest} exceeds max_depth {self.max_depth}")

    def step(self, state: str, action: str) -> str:
        return self.transitions[state][action]

    def g(self, trajectory: Trajectory) -> float:
        """Mean return of a trajectory; depends only on its final state."""
        return self.returns[trajectory[-1]].mean

    def trajectory_count_bound(self) -> int:
        counts: dict[str, int] = {}
        for state in reversed(list(nx.topological_sort(self.graph))):
            if state in self.sinks:
                counts[state] = 1
            else:
                counts[state] = sum(counts[self.step(state, a)] for a in self.actions)
        return sum(counts[s] for s, p in self.start.items() if p > 0)

    @classmethod
    def from_instance(cls, instance: MdpInstance) -> "Dmrmdp":
        returns = {
            sink: DiscreteDistribution(r.atoms, r.weights, name=f"return[{sink}]") for sink, r in instance.returns.items()
        }
        mdp = cls(
            states=tuple(instance.states),
            actions=tuple(instance.actions),
            transitions={s: dict(row) for s, row in instance.transitions.items()},
            start=dict(instance.start),
            sinks=frozenset(instance.sinks),
            returns=returns,
            max_depth=instance.max_depth,
        )
        return mdp

    def to_instance(self, base_policy: "Policy | None" = None) -> MdpInstance:
        return MdpInstance(
            states=list(self.states),
            actions=list(self.actions),
            transitions={s: dict(row) for s, row in self.transitions.items() if row},
            start=dict(self.start),
            sinks=sorted(self.sinks),
            returns={
                s: SinkReturn(atoms=d.atoms.tolist(), weights=d.weights.tolist()) for s, d in sorted(self.returns.items())
            },
            max_depth=self.max_depth,
            base_policy=base_policy.as_dict() if base_policy is not None else None,
        )

    def with_returns(self, returns: dict[str, DiscreteDistribution]) -> "Dmrmdp":
        return Dmrmdp(
            self.states, self.actions, self.transitions, self.start, self.sinks, returns, self.max_depth
        )


@dataclass(frozen=True)
class Policy:
    actions: tuple[str, ...]
    probs: dict[str, np.ndarray]

    def __post_init__(self):
        for state, row in self.probs.items():
            row = np.asarray(row, dtype=float)
            if row.shape != (len(self.actions),):
                raise InvalidParameterError(f"policy[{state}]", row.tolist(), "wrong number of actions")
            if np.any(row < 0) or abs(row.sum() - 1.0) > 1e-12:
                raise InvalidParameterError(f"policy[{state}]", row.tolist(), "must be a probability vector")

    def row(self, state: str) -> np.ndarray:
        return self.probs[state]

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {s: {a: float(p) for a, p in zip(self.actions, row)} for s, row in sorted(self.probs.items())}

    @classmethod
    def from_dict(cls, mdp: Dmrmdp, table: dict[str, dict[str, float]]) -> "Policy":
        probs = {s: np.array([row.get(a, 0.0) for a in mdp.actions], dtype=float) for s, row in table.items()}
        return cls(mdp.actions, probs)

    @classmethod
    def uniform(cls, mdp: Dmrmdp) -> "Policy":
        k = len(mdp.actions)
        return cls(mdp.actions, {s: np.full(k, 1.0 / k) for s in mdp.states if s not in mdp.sinks})

    @classmethod
    def random(cls, mdp: Dmrmdp, rng: np.random.Generator) -> "Policy":
        k = len(mdp.actions)
        probs = {}
        for s in mdp.states:
            if s in mdp.sinks:
                continue
            row = rng.dirichlet(np.ones(k))
            probs[s] = row / row.sum()
        return cls(mdp.actions, probs)

    @classmethod
    def deterministic(cls, mdp: Dmrmdp, choice: dict[str, str] | str) -> "Policy":
        probs = {}
        for s in mdp.states:
            if s in mdp.sinks:
                continue
            action = choice if isinstance(choice, str) else choice[s]
            row = np.zeros(len(mdp.actions))
            row[mdp.actions.index(action)] = 1.0
            probs[s] = row
        return cls(mdp.actions, probs)

    def max_abs_diff(self, other: "Policy", states) -> float:
        return max((float(np.max(np.abs(self.probs[s] - other.probs[s]))) for s in states), default=0.0)


@dataclass(frozen=True)
class TrajectoryDist:
    measure: dict[Trajectory, float]

    def total(self) -> float:
        return math.fsum(self.measure.values())

    def support(self) -> list[Trajectory]:
        return [tau for tau, p in self.measure.items() if p > 0]

    def __len__(self) -> int:
        return len(self.measure)

    def normalized(self) -> "TrajectoryDist":
        total = self.total()
        return TrajectoryDist({tau: p / total for tau, p in self.measure.items()})


# ---- enumeration and sampling ----------------------------------------------


def enumerate_trajectories(mdp: Dmrmdp, policy: Policy, max_trajectories: int = MAX_TRAJECTORIES) -> TrajectoryDist:
    """Exact trajectory measure by depth-first products of action probabilities."""
    bound = mdp.trajectory_count_bound()
    if bound > max_trajectories:
        logger.error(f"enumeration needs up to {bound} trajectories (cap {max_trajectories})")
        raise SizeBoundExceededError(f"{bound} trajectories exceed the cap of {max_trajectories}")

    measure: dict[Trajectory, float] = {}
    stack: list[tuple[Trajectory, float]] = [((s,), p) for s, p in mdp.start.items() if p > 0]
    while stack:
        prefix, prob = stack.pop()
        state = prefix[-1]
        if state in mdp.sinks:
            measure[prefix] = measure.get(prefix, 0.0) + prob
            continue
        for action, pa in zip(mdp.actions, policy.row(state)):
            if pa > 0:
                stack.append((prefix + (action, mdp.step(state, action)), prob * pa))
    logger.debug(f"enumerated {len(measure)} trajectories (bound {bound})")
    return TrajectoryDist(dict(sorted(measure.items())))


def sample_trajectories(mdp: Dmrmdp, policy: Policy, n: int, rng: np.random.Generator) -> TrajectoryDist:
    """Empirical trajectory frequencies from n simulated episodes."""
    index = {s: i for i, s in enumerate(mdp.states)}
    k = len(mdp.actions)
    probs = np.zeros((len(mdp.states), k))
    nxt = np.full((len(mdp.states), k), -1, dtype=np.int64)
    is_sink = np.zeros(len(mdp.states), dtype=bool)
    for s, i in index.items():
        if s in mdp.sinks:
            is_sink[i] = True
            continue
        probs[i] = policy.row(s)
        nxt[i] = [index[mdp.step(s, a)] for a in mdp.actions]
    cum = np.cumsum(probs, axis=1)

    start_states = [s for s, p in mdp.start.items() if p > 0]
    start_p = np.array([mdp.start[s] for s in start_states])
    current = np.array([index[s] for s in start_states])[rng.choice(len(start_states), size=n, p=start_p / start_p.sum())]
    codes = np.full((n, mdp.max_depth + 1), -1, dtype=np.int64)
    codes[:, 0] = current
    for depth in range(1, mdp.max_depth + 1):
        active = np.nonzero(~is_sink[current])[0]
        if active.size == 0:
            break
        u = rng.random(active.size)
        chosen = np.minimum((u[:, None] >= cum[current[active]]).sum(axis=1), k - 1)
        codes[active, depth] = chosen
        current[active] = nxt[current[active], chosen]

    unique, counts = np.unique(codes, axis=0, return_counts=True)
    measure = {}
    for code, count in zip(unique, counts):
        state = mdp.states[code[0]]
        tau = [state]
        for a in code[1:]:
            if a < 0:
                break
            action = mdp.actions[a]
            state = mdp.step(state, action)
            tau += [action, state]
        measure[tuple(tau)] = count / n
    return TrajectoryDist(measure)


# ---- returns -----------------------------------------------------------------


def return_distribution(mdp: Dmrmdp, traj_dist: TrajectoryDist) -> DiscreteDistribution:
    """Mixture of sink return laws weighted by trajectory mass."""
    atoms, weights = [], []
    for tau, p in traj_dist.measure.items():
        if p <= 0:
            continue
        law = mdp.returns[tau[-1]]
        atoms.append(law.atoms)
        weights.append(p * law.weights)
    weights_arr = np.concatenate(weights)
    return DiscreteDistribution(np.concatenate(atoms), weights_arr / weights_arr.sum(), name="return")


def mean_return_distribution(mdp: Dmrmdp, traj_dist: TrajectoryDist) -> DiscreteDistribution:
    """Law of g(τ) under the trajectory measure."""
    items = [(mdp.g(tau), p) for tau, p in traj_dist.measure.items() if p > 0]
    atoms = np.array([g for g, _ in items])
    weights = np.array([p for _, p in items])
    return DiscreteDistribution(atoms, weights / weights.sum(), name="mean_return")


def expected_return(mdp: Dmrmdp, traj_dist: TrajectoryDist) -> float:
    return math.fsum(p * mdp.g(tau) for tau, p in traj_dist.measure.items())


# ---- upweighting and lifting ---------------------------------------------


def upweight_trajectories(mdp: Dmrmdp, base_traj: TrajectoryDist, c: float, t: float, gamma: float = 1.0):
    """Rescales trajectories with g(τ) > t to total mass c/t^gamma."""
    if not c > 0:
        raise InvalidParameterError("c", c, "must be > 0")
    if not 0 < gamma <= 1:
        raise InvalidParameterError("gamma", gamma, "must lie in (0, 1]")
    if not t > c:
        raise InvalidParameterError("t", t, f"must exceed c={c}")
    mass = c / t**gamma
    upper = math.fsum(p for tau, p in base_traj.measure.items() if mdp.g(tau) > t)
    lower = math.fsum(p for tau, p in base_traj.measure.items() if mdp.g(tau) <= t)
    if upper <= 0:
        raise EmptyUpperTailError(f"no trajectory has mean return above t={t}")
    if lower <= 0:
        raise InvalidParameterError("t", t, "every trajectory has mean return above t")
    low_factor, high_factor = (1.0 - mass) / lower, mass / upper
    return TrajectoryDist(
        {tau: p * (high_factor if mdp.g(tau) > t else low_factor) for tau, p in base_traj.measure.items()}
    )


def reweight_trajectories(traj_dist: TrajectoryDist, factors: dict[Trajectory, float]) -> TrajectoryDist:
    """Multiplies chosen trajectories by arbitrary factors and renormalizes."""
    return TrajectoryDist({tau: p * factors.get(tau, 1.0) for tau, p in traj_dist.measure.items()}).normalized()


def lift_policy(mdp: Dmrmdp, rho: TrajectoryDist, base_policy: Policy | None = None) -> Policy:
    """Per-state conditional action frequencies under rho."""
    visit = defaultdict(float)
    action_mass = defaultdict(lambda: np.zeros(len(mdp.actions)))
    action_index = {a: i for i, a in enumerate(mdp.actions)}
    for tau, p in rho.measure.items():
        if p <= 0:
            continue
        for i in range(0, len(tau) - 1, 2):
            state, action = tau[i], tau[i + 1]
            visit[state] += p
            action_mass[state][action_index[action]] += p

    fallback = base_policy or Policy.uniform(mdp)
    probs, unvisited = {}, []
    for state in mdp.states:
        if state in mdp.sinks:
            continue
        if visit[state] > 0:
            row = action_mass[state] / visit[state]
            probs[state] = row / row.sum()
        else:
            unvisited.append(state)
            probs[state] = fallback.row(state).copy()
    if unvisited:
        logger.warning(f"lift_policy: {len(unvisited)} states unvisited under rho; copied from base policy")
    return Policy(mdp.actions, probs)


# ---- divergences -------------------------------------------------------------


def total_variation(p: TrajectoryDist, q: TrajectoryDist) -> float:
    keys = set(p.measure) | set(q.measure)
    return 0.5 * math.fsum(abs(p.measure.get(k, 0.0) - q.measure.get(k, 0.0)) for k in keys)


def trajectory_kl(p: TrajectoryDist, q: TrajectoryDist) -> float:
    terms = []
    for tau, pt in p.measure.items():
        if pt <= 0:
            continue
        qt = q.measure.get(tau, 0.0)
        if qt <= 0:
            raise SupportMismatchError(f"trajectory {tau} has p={pt:.3g} but q=0")
        terms.append(pt * (math.log(pt) - math.log(qt)))
    return math.fsum(terms)


def _action_kl(row: np.ndarray, base: np.ndarray, state: str) -> float:
    mask = row > 0
    if np.any(base[mask] <= 0):
        raise SupportMismatchError(f"policy at '{state}' uses an action the base policy never takes")
    return float(np.sum(row[mask] * (np.log(row[mask]) - np.log(base[mask]))))


def policy_kl_terms(mdp: Dmrmdp, pi: Policy, pi0: Policy, traj_dist: TrajectoryDist | None = None) -> dict:
    """Per-state action KLs along pi's trajectories, summed and averaged per trajectory."""
    traj_dist = traj_dist or enumerate_trajectories(mdp, pi)
    cache: dict[str, float] = {}
    total_sum, total_avg = [], []
    for tau, p in traj_dist.measure.items():
        if p <= 0:
            continue
        visited = tau[0:-1:2]
        kls = []
        for s in visited:
            if s not in cache:
                cache[s] = _action_kl(pi.row(s), pi0.row(s), s)
            kls.append(cache[s])
        total_sum.append(p * math.fsum(kls))
        total_avg.append(p * math.fsum(kls) / len(kls))
    return {"per_state_sum": math.fsum(total_sum), "per_state_average": math.fsum(total_avg)}


def kl_chain_rule(mdp: Dmrmdp, p: TrajectoryDist, q: TrajectoryDist) -> dict:
    """KL(p||q) split into the mean-return marginal and the conditional given g."""
    total = trajectory_kl(p, q)
    p_g, q_g = defaultdict(float), defaultdict(float)
    for tau, mass in p.measure.items():
        p_g[mdp.g(tau)] += mass
    for tau, mass in q.measure.items():
        q_g[mdp.g(tau)] += mass

    marginal_terms = []
    for g, pm in p_g.items():
        if pm <= 0:
            continue
        if q_g.get(g, 0.0) <= 0:
            raise SupportMismatchError(f"return level {g} has p={pm:.3g} but q=0")
        marginal_terms.append(pm * (math.log(pm) - math.log(q_g[g])))
    marginal = math.fsum(marginal_terms)

    conditional_terms = []
    for tau, pt in p.measure.items():
        if pt <= 0:
            continue
        g = mdp.g(tau)
        conditional_terms.append(pt * (math.log(pt / p_g[g]) - math.log(q.measure[tau] / q_g[g])))
    conditional = math.fsum(conditional_terms)
    return {"total": total, "marginal": marginal, "conditional": conditional, "residual": total - marginal - conditional}


# ---- generators --------------------------------------------------------------


def token_chain(alphabet: int = 3, max_length: int = 5, end_token: int = 0) -> Dmrmdp:
    """Tree MDP over token strings; a sink is reached at the end token or at max_length."""
    if not 2 <= alphabet <= 10:
        raise InvalidParameterError("alphabet", alphabet, "must lie in [2, 10]")
    if max_length < 1:
        raise InvalidParameterError("max_length", max_length, "must be >= 1")
    if not 0 <= end_token < alphabet:
        raise InvalidParameterError("end_token", end_token, "must be a token of the alphabet")

    actions = tuple(str(a) for a in range(alphabet))
    states, sinks, transitions = [], set(), {}
    frontier = ["s"]
    while frontier:
        state = frontier.pop()
        states.append(state)
        tokens = state[1:]
        if tokens and (tokens[-1] == str(end_token) or len(tokens) == max_length):
            sinks.add(state)
            continue
        transitions[state] = {a: state + a for a in actions}
        frontier.extend(state + a for a in actions)
    states.sort(key=lambda s: (len(s), s))
    returns = {s: DiscreteDistribution([0.0], [1.0], name=f"return[{s}]") for s in sinks}
    return Dmrmdp(tuple(states), actions, transitions, {"s": 1.0}, frozenset(sinks), returns, max_length)


def merge_chain(n_actions: int = 2, depth: int = 3) -> Dmrmdp:
    """States d{depth}t{action sum}: different histories with equal sums share a state."""
    if n_actions < 2 or depth < 1:
        raise InvalidParameterError("merge_chain", (n_actions, depth), "needs >= 2 actions and depth >= 1")
    actions = tuple(str(a) for a in range(n_actions))
    states, transitions, sinks = [], {}, set()
    for d in range(depth + 1):
        for total in range(d * (n_actions - 1) + 1):
            state = f"d{d}t{total}"
            states.append(state)
            if d == depth:
                sinks.add(state)
            else:
                transitions[state] = {a: f"d{d + 1}t{total + int(a)}" for a in actions}
    returns = {s: DiscreteDistribution([float(s.split("t")[1])], [1.0], name=f"return[{s}]") for s in sinks}
    return Dmrmdp(tuple(states), actions, transitions, {"d0t0": 1.0}, frozenset(sinks), returns, depth)


def assign_band_returns(
    mdp: Dmrmdp, policy: Policy, dist: Distribution, atoms: int = 64, seed: int | None = None
) -> Dmrmdp:
    """Gives each sink a discretized quantile band of dist, rarest sinks getting the top bands."""
    from services.sampling import sampling

    base = enumerate_trajectories(mdp, policy)
    sink_mass = defaultdict(float)
    for tau, p in base.measure.items():
        sink_mass[tau[-1]] += p
    sinks = sorted(sink_mass)
    tiebreak = sampling.stream(seed).permutation(len(sinks))
    order = sorted(range(len(sinks)), key=lambda i: (-sink_mass[sinks[i]], tiebreak[i]))
    ordered = [sinks[i] for i in order]

    # band of sink i in tail-probability space: (mass of later sinks, that + own mass]
    masses = np.array([sink_mass[s] for s in ordered])
    above = np.concatenate([np.cumsum(masses[::-1])[::-1][1:], [0.0]])
    offsets = (np.arange(atoms) + 0.5) / atoms
    returns = dict(mdp.returns)
    for sink, width, floor in zip(ordered, masses, above):
        levels = floor + offsets * width
        values = np.asarray(dist.isf(levels), dtype=float)
        returns[sink] = DiscreteDistribution(values, np.full(atoms, 1.0 / atoms), name=f"return[{sink}]")
    for sink in mdp.sinks - set(ordered):
        returns[sink] = DiscreteDistribution([float(dist.quantile(0.5))], [1.0], name=f"return[{sink}]")
    logger.info(f"assigned {atoms}-atom return bands of {dist.describe()} to {len(ordered)} reachable sinks")
    return mdp.with_returns(returns)


# ---- Goodhart search -----------------------------------------------------------


@dataclass
class SearchResult:
    table: pd.DataFrame
    found: dict | None


def goodhart_policy_search(
    mdp: Dmrmdp,
    base_policy: Policy,
    target_mean: float = 5.0,
    kl_budget: float = 0.1,
    c_grid=(1.0, 2.0, 4.0, 8.0),
    t_grid=None,
    gamma: float = 1.0,
) -> SearchResult:
    """Scans (c, t), lifting each upweighted measure to a policy and scoring mean return and KL."""
    base = enumerate_trajectories(mdp, base_policy)
    levels = np.unique([mdp.g(tau) for tau, p in base.measure.items() if p > 0])
    if t_grid is None:
        t_grid = 0.5 * (levels[:-1] + levels[1:])

    rows, found = [], None
    for c in c_grid:
        for t in t_grid:
            c, t = float(c), float(t)
            if not t > c or c / t**gamma >= 1 or t >= levels[-1]:
                continue
            rho = upweight_trajectories(mdp, base, c, t, gamma)
            pi = lift_policy(mdp, rho, base_policy)
            lifted = enumerate_trajectories(mdp, pi)
            kl_terms = policy_kl_terms(mdp, pi, base_policy, lifted)
            row = {
                "c": c,
                "t": t,
                "mean_return": expected_return(mdp, lifted),
                "trajectory_kl": trajectory_kl(lifted, base),
                "per_state_sum": kl_terms["per_state_sum"],
                "per_state_average": kl_terms["per_state_average"],
                "lift_tv": total_variation(lifted, rho),
            }
            row["meets_targets"] = row["mean_return"] > target_mean and row["per_state_average"] < kl_budget
            rows.append(row)
            if found is None and row["meets_targets"]:
                found = row
    table = pd.DataFrame(rows)
    if found is None:
        logger.warning(f"no (c, t) reached mean > {target_mean} with per-state KL < {kl_budget}")
    return SearchResult(table, found)
