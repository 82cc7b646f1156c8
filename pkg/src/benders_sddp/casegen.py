"""Instance generators: small random recourse problems and power-system cases.

Every generated stage row carries its own penalty slack, which both makes
recourse relatively complete and yields provable Lipschitz constants: a
slack with cost ``P`` caps the row dual at ``P`` per unit of probability,
so the L1 slope in the linked state ``C y_prev`` is at most the sum of ``P``
over linked rows and the slope in the bundle at most ``sum |B| x_max P``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .exceptions import RecourseInfeasibleError
from .model import (
    FoldedTree,
    Instance,
    NodeSpec,
    RecourseTemplate,
    StageData,
    validate_instance,
    validate_template,
)

LIPSCHITZ_MARGIN = 1.001


def _random_probs(rng, size, allow_zero):
    p = rng.dirichlet(np.ones(size))
    if allow_zero and size > 1 and rng.random() < 0.3:
        p[rng.integers(size)] = 0.0
        p = p / p.sum()
    return p


def _lipschitz(stages, xmax, n_x):
    """Provable L1 Lipschitz constants from ``(stage, row penalty)`` pairs."""
    M_y = 0.0
    M_b = 0.0
    xmax = np.broadcast_to(np.asarray(xmax, float), (n_x,))
    for st, pen in stages:
        if st.C is not None and st.C.nnz:
            M_y = max(M_y, float(pen[st.link_rows].sum()))
        if st.coupling.size:
            rows = st.coupling[:, 0].astype(int)
            xj = st.coupling[:, 1].astype(int)
            M_b = max(M_b, float(np.sum(np.abs(st.coupling[:, 3]) * xmax[xj] * pen[rows])))
    return LIPSCHITZ_MARGIN * M_y + 1e-6, LIPSCHITZ_MARGIN * M_b + 1e-6


def random_template(rng, n_stages=2, n_states=1, n_scenarios=1, n_x=2, max_vars=5, n_b=2,
                    xmax=2.0, shared_prob=0.3, deterministic_b=False):
    """A random recourse template with relatively complete recourse.

    All costs are nonnegative, coupling coefficients and realisations are
    nonnegative, and every stage row is a ``<=`` row, so the recourse value
    is nonincreasing in each master component.
    """
    rng = np.random.default_rng(rng)
    stages = []
    prev_ny = 0
    prev_core = 0
    prev_ub = None
    for d in range(1, n_stages + 1):
        n_rows = int(rng.integers(1, 3))
        n_core = int(rng.integers(1, max_vars - n_rows + 1))
        ny = n_core + n_rows
        core = rng.uniform(-1.0, 1.0, (n_rows, n_core))
        core[rng.random(core.shape) < 0.3] = 0.0
        # ensure each row rewards some activity so coupling matters
        core[:, 0] = np.abs(core[:, 0]) + 0.2
        penalty = rng.uniform(4.0, 8.0, n_rows)
        cost_core = rng.uniform(0.0, 2.0, n_core)
        y_ub_core = rng.uniform(1.0, 3.0, n_core)
        # rows read  core y - s <= rhs0 + x'Bb + C y_prev  with rhs0 <= 0 demanding cover
        rhs0 = -rng.uniform(0.0, 2.0, n_rows)
        C = None
        c_abs = np.zeros(n_rows)
        if d > 1:
            # slack columns stay out of C so the penalty caps the row duals
            Cd = rng.uniform(-0.8, 0.8, (n_rows, prev_ny))
            Cd[rng.random(Cd.shape) < 0.4] = 0.0
            Cd[:, prev_core:] = 0.0
            C = sparse.csr_matrix(Cd)
            c_abs = np.abs(Cd) @ prev_ub
        slack_ub = np.abs(core) @ y_ub_core + np.abs(rhs0) + c_abs + 1.0
        A = np.hstack([core, -np.eye(n_rows)])
        entries = []
        for r in range(n_rows):
            for _ in range(int(rng.integers(1, 3))):
                entries.append([r, int(rng.integers(n_x)), int(rng.integers(n_b)), float(rng.uniform(0.2, 1.0))])
        shared = None
        if n_scenarios > 1 and rng.random() < shared_prob:
            cols = np.arange(n_scenarios) * ny  # first core variable in each copy
            if rng.random() < 0.5:
                S = sparse.csr_matrix((np.ones(n_scenarios), (np.zeros(n_scenarios, int), cols)),
                                      shape=(1, n_scenarios * ny))
                shared = (S, np.array(["<"]), np.array([float(rng.uniform(0.5, 2.0)) * n_scenarios]))
            else:
                S = sparse.csr_matrix(
                    (np.array([1.0, -1.0]), (np.zeros(2, int), cols[:2])), shape=(1, n_scenarios * ny)
                )
                shared = (S, np.array(["="]), np.array([0.0]))
        st = StageData(
            A=sparse.csr_matrix(A),
            cost=np.concatenate([cost_core, penalty]),
            coupling=np.array(entries, float),
            y_lower=np.zeros(ny),
            y_upper=np.concatenate([y_ub_core, slack_ub]),
            C=C,
            rhs=rhs0,
            shared=shared,
        )
        stages.append((st, penalty))
        prev_ny = ny
        prev_core = n_core
        prev_ub = st.y_upper

    realizations = []
    for d in range(1, n_stages + 1):
        L = 1 if d == 1 else n_states
        shape = (L, n_states, n_scenarios, n_b)
        if deterministic_b:
            realizations.append(np.ones(shape))
        else:
            realizations.append(rng.uniform(0.0, 2.0, shape))
    tree = FoldedTree(
        n_states=n_states,
        n_scenarios=n_scenarios,
        initial_probs=_random_probs(rng, n_states, True),
        transition_probs=[
            np.array([_random_probs(rng, n_states, True) for _ in range(n_states)])
            for _ in range(n_stages - 1)
        ],
        realizations=realizations,
    )
    M_y, M_b = _lipschitz(stages, xmax, n_x)
    return validate_template(
        RecourseTemplate(n_x=n_x, stages=[s for s, _ in stages], tree=tree, M_y=M_y, M_b=M_b)
    )


def random_instance(seed, n_nodes=2, n_master=2, n_stages=2, n_states=1, n_scenarios=1,
                    max_vars=5, xmax=2.0, shared_templates=False):
    """A small random master problem with one recourse template per node.

    Each node sees every master variable.  The master has a single budget
    row ``sum x <= budget``.
    """
    rng = np.random.default_rng(seed)
    recourse = {}
    nodes = []
    probs = rng.dirichlet(np.ones(n_nodes))
    for i in range(n_nodes):
        name = "r0" if shared_templates else f"r{i}"
        if name not in recourse:
            recourse[name] = random_template(
                rng, n_stages, n_states, n_scenarios, n_master, max_vars, xmax=xmax
            )
        nodes.append(NodeSpec(float(probs[i]), np.arange(n_master), name))
    inst = Instance(
        cost=rng.uniform(0.1, 1.5, n_master),
        lower=np.zeros(n_master),
        upper=np.full(n_master, xmax),
        constraints=sparse.csr_matrix(np.ones((1, n_master))),
        rhs=np.array([xmax * n_master * 0.75]),
        nodes=nodes,
        recourse=recourse,
        name=f"random-{seed}",
    )
    return validate_instance(inst)


# power-system cases ---------------------------------------------------------

THERMAL = "thermal"
STORAGE = "storage"
RENEWABLE = "renewable"


@dataclass
class Technology:
    """One generation or storage technology.

    Capacities are in GW, energy in GWh and money in M£.  ``ramp`` is the
    share of installed capacity a unit can move between consecutive blocks
    (1 means unconstrained and no ramp rows are emitted).
    """

    name: str
    kind: str
    capital_cost: float
    operating_cost: float
    historical: float
    max_build: float
    ramp: float = 1.0
    efficiency: float = 1.0
    energy_ratio: float = 4.0


def default_technologies():
    return [
        Technology("nuclear", THERMAL, 5500.0, 0.010, 7.0, 6.0, ramp=0.1),
        Technology("coal", THERMAL, 1800.0, 0.055, 9.0, 6.0, ramp=0.3),
        Technology("ccgt", THERMAL, 750.0, 0.075, 20.0, 15.0, ramp=0.5),
        Technology("ocgt", THERMAL, 450.0, 0.140, 3.0, 10.0),
        Technology("biomass", THERMAL, 2500.0, 0.065, 2.0, 4.0),
        Technology("diesel", THERMAL, 350.0, 0.220, 1.0, 6.0),
        Technology("battery", STORAGE, 650.0, 0.001, 1.0, 12.0, efficiency=0.85, energy_ratio=4.0),
        Technology("wind", RENEWABLE, 1250.0, 0.0, 12.0, 40.0),
        Technology("solar", RENEWABLE, 600.0, 0.0, 6.0, 30.0),
    ]


@dataclass
class Slice:
    name: str
    demand: float
    wind: float
    solar: float


def default_slices():
    return [
        Slice("winter", 1.15, 1.2, 0.45),
        Slice("spring", 0.95, 1.0, 1.0),
        Slice("summer", 0.85, 0.75, 1.35),
        Slice("autumn", 1.0, 1.05, 0.8),
    ]


@dataclass
class PowerConfig:
    """Shape and data of a generated capacity-expansion case.

    The investment tree has ``branching[k]`` children per node at level
    ``k``; the default ``(2, 2)`` gives 1 + 2 + 4 = 7 nodes.  Capacity
    built at a node becomes available at its descendants (one period of
    construction lag).
    """

    technologies: list = field(default_factory=default_technologies)
    slices: list = field(default_factory=default_slices)
    branching: tuple = (2, 2)
    demand_growth: tuple = ((1.0,), (1.05, 1.2), (1.05, 1.15, 1.25, 1.4))
    n_stages: int = 7
    n_states: int = 5
    n_scenarios: int = 3
    hours_per_stage: int = 24
    peak_demand: float = 42.0
    wind_persistence: float = 0.7
    wind_noise: float = 0.08
    ramp_across_stages: bool = False
    voll: float = 6.0
    weeks_per_slice: float = 13.0
    years_per_period: float = 5.0
    discount: float = 0.035
    seed: int = 42

    def validate(self):
        for t in self.technologies:
            if min(t.capital_cost, t.operating_cost, t.historical, t.max_build) < 0:
                raise ValueError(f"technology {t.name}: costs and capacities must be nonnegative")
            if not (0 < t.ramp <= 1 and 0 < t.efficiency <= 1):
                raise ValueError(f"technology {t.name}: ramp and efficiency must lie in (0, 1]")
            if t.kind not in (THERMAL, STORAGE, RENEWABLE):
                raise ValueError(f"technology {t.name}: unknown kind {t.kind!r}")
        if sum(t.kind == STORAGE for t in self.technologies) > 1:
            raise ValueError("at most one storage technology is supported")
        if sum(t.kind == RENEWABLE for t in self.technologies) != 2:
            raise ValueError("exactly two renewable technologies (wind, solar) are expected")
        if self.n_stages < 2 or self.n_states < 1 or self.n_scenarios < 1 or self.hours_per_stage < 1:
            raise ValueError("need at least 2 stages, 1 state, 1 scenario and 1 block per stage")
        if len(self.demand_growth) != len(self.branching) + 1:
            raise ValueError("demand_growth needs one tuple per tree level")
        return self


def _investment_tree(branching):
    """Parents and levels of a complete tree, breadth-first."""
    parents = [-1]
    levels = [0]
    frontier = [0]
    for lvl, k in enumerate(branching, start=1):
        nxt = []
        for p in frontier:
            for _ in range(k):
                parents.append(p)
                levels.append(lvl)
                nxt.append(len(parents) - 1)
        frontier = nxt
    return parents, levels


def wind_chain(n_states, persistence, seed):
    """Discretised mean-reverting wind process.

    Returns state capacity factors, the transition matrix and its
    stationary distribution.
    """
    rng = np.random.default_rng(seed)
    if n_states == 1:
        return np.array([0.35]), np.ones((1, 1)), np.ones(1)
    levels = np.linspace(0.1, 0.7, n_states)
    width = levels[1] - levels[0]
    mean = levels.mean()
    spread = 0.18 * np.sqrt(1 - persistence ** 2) + 1e-3
    P = np.zeros((n_states, n_states))
    for l in range(n_states):
        centre = mean + persistence * (levels[l] - mean)
        w = np.exp(-0.5 * ((levels - centre) / (spread + 0.5 * width)) ** 2)
        w *= rng.uniform(0.9, 1.1, n_states)
        P[l] = w / w.sum()
    evals, evecs = np.linalg.eig(P.T)
    pi = np.real(evecs[:, np.argmin(np.abs(evals - 1))])
    pi = np.abs(pi) / np.abs(pi).sum()
    return levels, P, pi


def _solar_shape(H):
    hours = (np.arange(H) + 0.5) * 24.0 / H
    return np.clip(np.sin((hours - 6.0) / 12.0 * np.pi), 0.0, None)


def _demand_shape(H):
    hours = (np.arange(H) + 0.5) * 24.0 / H
    return 0.78 + 0.12 * np.sin((hours - 9.0) / 24.0 * 2 * np.pi) + 0.1 * np.exp(-0.5 * ((hours - 18.5) / 2.0) ** 2)


def _stage_block(techs, H, tau, first, voll, g_max, nu_max, peak, x_index, ramp_link):
    """Dispatch LP of one stage for H blocks of ``tau`` hours.

    Returns the stage data, the link entries ``(row, prev column, value)``,
    the column map and the bundle size.
    Bundle layout: wind[H], solar[H], demand[H], 1.
    """
    n_b = 3 * H + 1
    ONE = 3 * H
    cols = {}
    lower, upper, cost = [], [], []

    def var(key, ub, c):
        cols[key] = len(lower)
        lower.append(0.0)
        upper.append(float(ub))
        cost.append(float(c))

    P = voll * tau
    storage = [t for t in techs if t.kind == STORAGE]
    for h in range(H):
        for t in techs:
            if t.kind == STORAGE:
                var(("ch", h), g_max[t.name], 0.0)
                var(("dis", h), g_max[t.name], t.operating_cost * tau)
                var(("soc", h), t.energy_ratio * g_max[t.name], 0.0)
            else:
                var(("gen", t.name, h), g_max[t.name], t.operating_cost * tau)
        var(("shed", h), nu_max * peak * 1.5 + 1.0, P)

    rows = []  # (coeffs dict, sense, const, coupling list, penalty or None, link list)

    def row(coeffs, sense="<", const=0.0, coupling=(), penalty=None, link=()):
        rows.append((coeffs, sense, const, list(coupling), penalty, list(link)))

    for h in range(H):
        supply = {}
        for t in techs:
            if t.kind == STORAGE:
                supply[cols[("dis", h)]] = -1.0
                supply[cols[("ch", h)]] = 1.0
            else:
                supply[cols[("gen", t.name, h)]] = -1.0
        supply[cols[("shed", h)]] = -1.0
        # balance: -(supply) - shed <= -nu * demand_h
        row(supply, coupling=[(x_index["nu"], 2 * H + h, -1.0)])
        for t in techs:
            j = x_index[t.name]
            if t.kind == THERMAL:
                row({cols[("gen", t.name, h)]: 1.0}, coupling=[(j, ONE, 1.0)], penalty=P)
            elif t.kind == RENEWABLE:
                k = h if t.name == "wind" else H + h
                row({cols[("gen", t.name, h)]: 1.0}, coupling=[(j, k, 1.0)], penalty=P)
            else:
                row({cols[("ch", h)]: 1.0}, coupling=[(j, ONE, 1.0)], penalty=P)
                row({cols[("dis", h)]: 1.0}, coupling=[(j, ONE, 1.0)], penalty=P)
                row({cols[("soc", h)]: 1.0}, coupling=[(j, ONE, t.energy_ratio)], penalty=P)
                # soc_h - soc_{h-1} - eff*tau*ch + tau*dis = 0
                coeffs = {cols[("soc", h)]: 1.0, cols[("ch", h)]: -t.efficiency * tau, cols[("dis", h)]: tau}
                if h > 0:
                    coeffs[cols[("soc", h - 1)]] = -1.0
                    row(coeffs, sense="=")
                elif first:
                    row(coeffs, sense="=")
                else:
                    row(coeffs, sense="=", penalty=P, link=[(("soc", H - 1), 1.0)])
            if t.kind == THERMAL and t.ramp < 1.0:
                g = cols[("gen", t.name, h)]
                if h > 0:
                    gp = cols[("gen", t.name, h - 1)]
                    row({g: 1.0, gp: -1.0}, coupling=[(j, ONE, t.ramp)], penalty=P)
                    row({g: -1.0, gp: 1.0}, coupling=[(j, ONE, t.ramp)], penalty=P)
                elif not first and ramp_link:
                    row({g: 1.0}, coupling=[(j, ONE, t.ramp)], penalty=P, link=[(("gen", t.name, H - 1), 1.0)])
                    row({g: -1.0}, coupling=[(j, ONE, t.ramp)], penalty=P, link=[(("gen", t.name, H - 1), -1.0)])

    # penalty slacks; the balance rows are already penalised through shedding
    A_entries, senses, consts, coupling, link_entries = [], [], [], [], []
    slack_cols = []
    for r, (coeffs, sense, const, coup, penalty, link) in enumerate(rows):
        for c, v in coeffs.items():
            A_entries.append((r, c, v))
        senses.append(sense)
        consts.append(const)
        for j, k, v in coup:
            coupling.append([r, j, k, v])
        for key, v in link:
            link_entries.append((r, cols[key], v))
        if penalty is not None:
            slack_cols.append((r, sense))
    for r, sense in slack_cols:
        coeffs = rows[r][0]
        need = sum(abs(v) * upper[c] for c, v in coeffs.items())
        need += sum(abs(v) * upper[cols[key]] for key, v in rows[r][5]) + 1.0
        lower.append(0.0)
        upper.append(need)
        cost.append(P)
        A_entries.append((r, len(lower) - 1, -1.0))
        if sense == "=":
            lower.append(0.0)
            upper.append(need)
            cost.append(P)
            A_entries.append((r, len(lower) - 1, 1.0))
    ny = len(lower)
    nr = len(rows)
    A = sparse.csr_matrix(
        ([v for _, _, v in A_entries], ([r for r, _, _ in A_entries], [c for _, c, _ in A_entries])),
        shape=(nr, ny),
    )
    st = StageData(
        A=A,
        cost=np.array(cost),
        coupling=np.array(coupling, float),
        y_lower=np.array(lower),
        y_upper=np.array(upper),
        senses=np.array(senses, dtype="<U1"),
        rhs=np.array(consts),
    )
    return st, link_entries, cols, n_b


def _power_template(cfg, slice_, x_index, g_max, nu_max, levels, P, pi, rng):
    H = cfg.hours_per_stage
    tau = 24.0 / H
    techs = cfg.technologies
    first, _, cols, n_b = _stage_block(techs, H, tau, True, cfg.voll, g_max, nu_max, cfg.peak_demand, x_index, cfg.ramp_across_stages)
    later, link, _, _ = _stage_block(techs, H, tau, False, cfg.voll, g_max, nu_max, cfg.peak_demand, x_index, cfg.ramp_across_stages)
    # core columns come first and are numbered alike in both layouts
    link_vals = [v for _, _, v in link]
    link_ij = ([r for r, _, _ in link], [c for _, c, _ in link])
    stages = [first]
    for d in range(2, cfg.n_stages + 1):
        prev_ny = first.n_y if d == 2 else later.n_y
        st = StageData(
            A=later.A, cost=later.cost, coupling=later.coupling, y_lower=later.y_lower,
            y_upper=later.y_upper, C=sparse.csr_matrix((link_vals, link_ij), shape=(later.n_rows, prev_ny)),
            senses=later.senses, rhs=later.rhs,
        )
        stages.append(st)

    m, W = cfg.n_states, cfg.n_scenarios
    solar = _solar_shape(H) * slice_.solar * 0.55
    demand = _demand_shape(H) * slice_.demand * cfg.peak_demand
    realizations = []
    for d in range(1, cfg.n_stages + 1):
        L = 1 if d == 1 else m
        R = np.zeros((L, m, W, n_b))
        for l in range(L):
            for n in range(m):
                start = levels[n] if d == 1 else levels[l]
                ramp = start + (levels[n] - start) * (np.arange(H) + 1) / H
                for w in range(W):
                    noise = rng.normal(0.0, cfg.wind_noise, H)
                    R[l, n, w, :H] = np.clip((ramp + noise) * slice_.wind, 0.0, 1.0)
                    R[l, n, w, H:2 * H] = solar
                    R[l, n, w, 2 * H:3 * H] = demand
                    R[l, n, w, 3 * H] = 1.0
        realizations.append(R)
    tree = FoldedTree(m, W, pi.copy(), [P.copy() for _ in range(cfg.n_stages - 1)], realizations)

    n_x = len(x_index)
    xmax = np.zeros(n_x)
    for t in techs:
        xmax[x_index[t.name]] = g_max[t.name]
    xmax[x_index["nu"]] = nu_max
    # every row touched by x, b or the previous stage has a slack (or
    # shedding) priced at voll * tau, which caps its dual
    pen_rows = np.full(later.n_rows, cfg.voll * tau)
    M_y = LIPSCHITZ_MARGIN * float(pen_rows[stages[-1].link_rows].sum()) + 1e-6
    M_b = 0.0
    for st in (first, later):
        r = st.coupling[:, 0].astype(int)
        j = st.coupling[:, 1].astype(int)
        M_b = max(M_b, float(np.sum(np.abs(st.coupling[:, 3]) * xmax[j] * pen_rows[r])))
    M_b = LIPSCHITZ_MARGIN * M_b + 1e-6
    monotone = -np.ones(n_x, int)
    monotone[x_index["nu"]] = 1
    return RecourseTemplate(n_x, stages, tree, M_y, M_b, monotone=monotone)


def generate_instance(config=None, seed=None):
    """Capacity-expansion instance over an investment tree and seasonal slices.

    Master variables, in order: builds per (non-leaf node, technology),
    accumulated capacity per (node, technology), demand level per node.
    Subproblem node ``(i, s)`` reads ``[capacities at i, demand level at i]``
    and weighs slice ``s`` by the node's probability, discount factor and
    the number of weeks the slice represents.
    """
    cfg = (config or PowerConfig()).validate()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    techs = cfg.technologies
    parents, levels_of = _investment_tree(cfg.branching)
    n_nodes = len(parents)
    children = [[c for c in range(n_nodes) if parents[c] == p] for p in range(n_nodes)]
    prob = np.ones(n_nodes)
    for i in range(1, n_nodes):
        prob[i] = prob[parents[i]] / len(children[parents[i]])
    level_index = {}
    demand = np.zeros(n_nodes)
    for i in range(n_nodes):
        k = level_index.get(levels_of[i], 0)
        demand[i] = cfg.demand_growth[levels_of[i]][k]
        level_index[levels_of[i]] = k + 1
    ancestors = []
    for i in range(n_nodes):
        a, p = [], parents[i]
        while p >= 0:
            a.append(p)
            p = parents[p]
        ancestors.append(a)
    builders = [i for i in range(n_nodes) if children[i]]
    nt = len(techs)

    names, cost, lower, upper = [], [], [], []
    build_col = {}
    for a in builders:
        disc = (1 + cfg.discount) ** (-cfg.years_per_period * levels_of[a])
        for t in techs:
            build_col[a, t.name] = len(names)
            names.append(f"build[{t.name},{a}]")
            cost.append(prob[a] * disc * t.capital_cost)
            lower.append(0.0)
            upper.append(t.max_build)
    acc_col = {}
    for i in range(n_nodes):
        for t in techs:
            acc_col[i, t.name] = len(names)
            names.append(f"capacity[{t.name},{i}]")
            cost.append(0.0)
            lower.append(t.historical)
            upper.append(t.historical + t.max_build * len(ancestors[i]))
    nu_col = {}
    for i in range(n_nodes):
        nu_col[i] = len(names)
        names.append(f"demand[{i}]")
        cost.append(0.0)
        lower.append(demand[i])
        upper.append(demand[i])
    n = len(names)
    rows, cols_, vals = [], [], []
    r = 0
    rhs = []
    for i in range(n_nodes):
        for t in techs:
            # capacity = historical + builds at ancestors, as two inequalities
            for sgn in (1.0, -1.0):
                rows.append(r)
                cols_.append(acc_col[i, t.name])
                vals.append(sgn)
                for a in ancestors[i]:
                    rows.append(r)
                    cols_.append(build_col[a, t.name])
                    vals.append(-sgn)
                rhs.append(sgn * t.historical)
                r += 1
    constraints = sparse.csr_matrix((vals, (rows, cols_)), shape=(r, n))

    g_max = {t.name: t.historical + t.max_build * max(len(a) for a in ancestors) for t in techs}
    nu_max = float(demand.max())
    x_index = {t.name: k for k, t in enumerate(techs)}
    x_index["nu"] = nt
    levels, P, pi = wind_chain(cfg.n_states, cfg.wind_persistence, seed)
    recourse = {}
    nodes = []
    for s, sl in enumerate(cfg.slices):
        name = f"slice-{sl.name}"
        recourse[name] = _power_template(cfg, sl, x_index, g_max, nu_max, levels, P, pi, rng)
        for i in range(n_nodes):
            disc = (1 + cfg.discount) ** (-cfg.years_per_period * levels_of[i])
            weight = prob[i] * disc * cfg.weeks_per_slice * cfg.years_per_period * 7.0 / cfg.n_stages
            idx = np.array([acc_col[i, t.name] for t in techs] + [nu_col[i]])
            nodes.append(NodeSpec(float(weight), idx, name, float(demand[i]), f"node{i}/{sl.name}"))
    inst = Instance(
        cost=np.array(cost),
        lower=np.array(lower),
        upper=np.array(upper),
        constraints=constraints,
        rhs=np.array(rhs, float),
        nodes=nodes,
        recourse=recourse,
        name=f"power-{seed}",
        names=names,
    )
    return validate_instance(inst)


def summarize_instance(instance):
    """Human-readable one-paragraph description."""
    lines = [f"instance {instance.name or '<unnamed>'}: {instance.n_master} master variables, "
             f"{len(instance.nodes)} subproblem nodes, {len(instance.recourse)} recourse templates"]
    for name, t in instance.recourse.items():
        st = t.stages[-1]
        lines.append(
            f"  {name}: D={t.n_stages} m={t.tree.n_states} W={t.tree.n_scenarios} "
            f"n_x={t.n_x} rows/stage={st.n_rows} vars/stage={st.n_y} M_y={t.M_y:.4g} M_b={t.M_b:.4g}"
        )
    return "\n".join(lines)


# deterministic benchmark ------------------------------------------------------


@dataclass
class TrajectoryPool:
    """Representative bundle trajectories of one template.

    ``centers`` has shape ``(k, D, n_b)`` and ``weights`` sums to one.
    """

    centers: np.ndarray
    weights: np.ndarray
    labels: np.ndarray | None = None
    inertia: float = 0.0


def sample_trajectories(template, size, seed=0):
    """Sample ``size`` bundle trajectories by walking the Markov chain.

    Returns an array of shape ``(size, D, n_b)``; every stage draws its
    scenario uniformly.
    """
    tree = template.tree
    rng = np.random.default_rng(seed)
    D = template.n_stages
    n_b = tree.b(1, 0, 0).shape[1]
    out = np.zeros((size, D, n_b))
    for s in range(size):
        m = int(rng.choice(tree.n_states, p=tree.initial_probs))
        w = int(rng.integers(tree.n_scenarios))
        out[s, 0] = tree.b(1, 0, m)[w]
        for d in range(2, D + 1):
            l = m
            m = int(rng.choice(tree.n_states, p=tree.transition_probs[d - 2][l]))
            w = int(rng.integers(tree.n_scenarios))
            out[s, d - 1] = tree.b(d, l, m)[w]
    return out


def enumerate_paths(template):
    """Every (state, scenario) path with its exact probability, as a pool."""
    tree = template.tree
    D = template.n_stages
    W = tree.n_scenarios
    paths = []
    for m in np.flatnonzero(tree.initial_probs > 0):
        for w in range(W):
            paths.append((tree.initial_probs[m] / W, int(m), [tree.b(1, 0, m)[w]]))
    for d in range(2, D + 1):
        nxt = []
        for p, l, bs in paths:
            P = tree.transition_probs[d - 2][l]
            for n in np.flatnonzero(P > 0):
                for w in range(W):
                    nxt.append((p * P[n] / W, int(n), bs + [tree.b(d, l, n)[w]]))
        paths = nxt
    return TrajectoryPool(
        centers=np.array([np.array(bs) for _, _, bs in paths]),
        weights=np.array([p for p, _, _ in paths]),
    )


def _farthest_point_init(X, k, rng):
    first = int(rng.integers(X.shape[0]))
    idx = [first]
    dist = np.linalg.norm(X - X[first], axis=1)
    while len(idx) < k:
        j = int(np.argmax(dist))
        idx.append(j)
        dist = np.minimum(dist, np.linalg.norm(X - X[j], axis=1))
    return X[idx]


def cluster_trajectories(trajectories, n_clusters, seed=0, max_iter=300):
    """Reduce sampled trajectories to ``n_clusters`` weighted centres.

    Greedy farthest-point seeding followed by Lloyd iterations.
    """
    from sklearn.cluster import KMeans

    T = np.asarray(trajectories, float)
    N = T.shape[0]
    if not 1 <= n_clusters <= N:
        raise ValueError(f"need 1 <= n_clusters <= {N}, got {n_clusters}")
    X = T.reshape(N, -1)
    init = _farthest_point_init(X, n_clusters, np.random.default_rng(seed))
    km = KMeans(n_clusters, init=init, n_init=1, algorithm="lloyd", max_iter=max_iter, tol=0.0)
    km.fit(X)
    counts = np.bincount(km.labels_, minlength=n_clusters)
    keep = counts > 0
    return TrajectoryPool(
        centers=km.cluster_centers_[keep].reshape(-1, *T.shape[1:]),
        weights=counts[keep] / N,
        labels=km.labels_,
        inertia=float(km.inertia_),
    )


def build_pool(template, pool_size=500, n_clusters=10, seed=0):
    return cluster_trajectories(sample_trajectories(template, pool_size, seed), n_clusters, seed)


def _chain_problem(template, x, trajectory):
    """Perfect-foresight LP of one trajectory with a single copy per stage."""
    from .lp import LpBuilder

    lp = LpBuilder()
    W = template.tree.n_scenarios
    prev = None
    row_blocks = []
    for d, st in enumerate(template.stages, start=1):
        cols = lp.add_vars(st.n_y, cost=st.cost, lb=st.y_lower, ub=st.y_upper)
        A = st.A.tocoo()
        rows, cc, vals = [A.row], [cols[A.col]], [A.data]
        if prev is not None and st.C is not None and st.C.nnz:
            C = st.C.tocoo()
            rows.append(C.row)
            cc.append(prev[C.col])
            vals.append(-C.data)
        senses = st.senses if st.senses is not None else ["<"] * st.n_rows
        rhs = (st.rhs if st.rhs is not None else 0.0) + st.coupling_rhs(x, trajectory[d - 1])
        ids = lp.add_rows(np.concatenate(rows), np.concatenate(cc), np.concatenate(vals), list(senses), rhs)
        row_blocks.append(ids)
        if st.shared is not None:
            # identical copies: the shared rows act on the sum of the scenario blocks
            S, ssen, srhs = st.shared
            S = sparse.csr_matrix(S)
            folded = sum(S[:, w * st.n_y:(w + 1) * st.n_y] for w in range(W)).tocoo()
            lp.add_rows(folded.row, cols[folded.col], folded.data, [str(s) for s in ssen], srhs)
        prev = cols
    return lp.build(), row_blocks


def chain_value(template, x, trajectory):
    """Optimal value and x-slope of the perfect-foresight LP of a trajectory."""
    from .lp import solve_lp

    x = np.asarray(x, float)
    problem, row_blocks = _chain_problem(template, x, trajectory)
    sol = solve_lp(problem)
    if not sol.optimal:
        raise RecourseInfeasibleError(f"perfect-foresight problem is {sol.status}")
    slope = np.zeros(template.n_x)
    for d, st in enumerate(template.stages, start=1):
        slope += st.jac_x(trajectory[d - 1], template.n_x).T @ sol.duals[row_blocks[d - 1]]
    return float(sol.objective), slope


def pool_value(template, x, pool):
    value = 0.0
    slope = np.zeros(template.n_x)
    for c, p in zip(pool.centers, pool.weights):
        v, s = chain_value(template, x, c)
        value += p * v
        slope += p * s
    return value, slope


class DeterministicEvaluator:
    """Recourse values over representative trajectories instead of the tree.

    Plugs into :func:`run_benders` in place of the SDDP evaluator.  Pools are
    built lazily per template name.
    """

    def __init__(self, pool_size=500, n_clusters=10, seed=0, pools=None):
        self.pool_size = pool_size
        self.n_clusters = n_clusters
        self.seed = seed
        self.pools = dict(pools or {})

    def pool(self, name, template):
        if name not in self.pools:
            self.pools[name] = build_pool(template, self.pool_size, self.n_clusters, self.seed)
        return self.pools[name]

    def __call__(self, name, template, x, delta):
        v, s = pool_value(template, x, self.pool(name, template))
        return v, v, s


def deterministic_benchmark(instance, epsilon, pool_size=500, n_clusters=10, seed=0, **kwargs):
    """Solve the investment problem against clustered trajectories.

    Returns the :class:`BendersResult` of that run; its decision can then be
    priced under the stochastic model.
    """
    from .benders import run_benders

    evaluator = DeterministicEvaluator(pool_size, n_clusters, seed)
    return run_benders(instance, epsilon, evaluator=evaluator, **kwargs)
