"""Instance data model: master problem, nodes, recourse templates, folded trees.

Stages are numbered ``1..D`` in messages and stored 0-based in lists.
Markov states and scenarios are 0-based throughout.

Recourse stage ``d`` with predecessor state ``l``, state ``m`` and scenario
``w`` has rows::

    A_d y^w  (sense)  rhs_d + sum_j x_j * B_d[row, j, k] * b^{lmw}_d[k] + C_d y_{d-1}

where ``y_{d-1}`` is the trial decision of the scenario copy chosen at the
previous stage.  Stage 1 has a single dummy predecessor.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy import sparse

from .exceptions import (
    DimensionMismatchError,
    InstanceError,
    LipschitzConstantError,
    ParseError,
    ProbabilitySumError,
    StageCountError,
    UnboundedVariableError,
)

PROB_TOL = 1e-9


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass
class StageData:
    """One recourse stage.

    ``coupling`` holds rows ``(row, x_index, b_index, coefficient)``.
    ``shared`` is ``(matrix, senses, rhs)`` over the stacked scenario copies
    ``[y^0, ..., y^{W-1}]`` or None.
    """

    A: sparse.csr_matrix
    cost: np.ndarray
    coupling: np.ndarray
    y_lower: np.ndarray
    y_upper: np.ndarray
    C: sparse.csr_matrix | None = None
    senses: np.ndarray | None = None
    rhs: np.ndarray | None = None
    shared: tuple | None = None

    @property
    def n_rows(self):
        return self.A.shape[0]

    @property
    def n_y(self):
        return self.A.shape[1]

    def coupling_rhs(self, x, b):
        """``xᵀ B b`` per row."""
        out = np.zeros(self.n_rows)
        if self.coupling.size:
            rows, xj, bk, v = self._unpack()
            np.add.at(out, rows, v * x[xj] * b[bk])
        return out

    def jac_x(self, b, n_x):
        """Jacobian of the coupling rhs w.r.t. x at fixed ``b``, shape (rows, n_x)."""
        J = np.zeros((self.n_rows, n_x))
        if self.coupling.size:
            rows, xj, bk, v = self._unpack()
            np.add.at(J, (rows, xj), v * b[bk])
        return J

    def jac_b(self, x, n_b):
        """Jacobian of the coupling rhs w.r.t. b at fixed ``x``, shape (rows, n_b)."""
        J = np.zeros((self.n_rows, n_b))
        if self.coupling.size:
            rows, xj, bk, v = self._unpack()
            np.add.at(J, (rows, bk), v * x[xj])
        return J

    @property
    def link_rows(self):
        """Rows whose right-hand side depends on the previous decision."""
        if self.C is None or not self.C.nnz:
            return np.zeros(0, int)
        return np.flatnonzero(np.diff(self.C.tocsr().indptr) > 0)

    def link(self, y_prev):
        """Linked state ``C y_prev`` restricted to :attr:`link_rows`."""
        rows = self.link_rows
        if rows.size == 0:
            return np.zeros(0)
        return np.asarray(self.C.tocsr()[rows] @ np.asarray(y_prev, float)).ravel()

    def _unpack(self):
        c = self.coupling
        return c[:, 0].astype(int), c[:, 1].astype(int), c[:, 2].astype(int), c[:, 3]


@dataclass
class FoldedTree:
    """Markov-state scenario lattice.

    ``transition_probs[d-2][l, m]`` is the probability of moving from state
    ``l`` at stage ``d-1`` to state ``m`` at stage ``d``.
    ``realizations[d-1]`` has shape ``(L, m, W, n_b)`` with ``L = 1`` at
    stage 1.
    """

    n_states: int
    n_scenarios: int
    initial_probs: np.ndarray
    transition_probs: list
    realizations: list

    def b(self, d, l, m):
        """Scenario bundle at stage ``d`` (1-based), shape ``(W, n_b)``."""
        if d == 1:
            return self.realizations[0][0, m]
        return self.realizations[d - 1][l, m]

    def prob(self, d, l, m):
        if d == 1:
            return self.initial_probs[m]
        return self.transition_probs[d - 2][l, m]

    def successors(self, d, m):
        """States reachable with positive probability at stage ``d + 1``."""
        return np.flatnonzero(self.transition_probs[d - 1][m] > 0)


@dataclass
class RecourseTemplate:
    n_x: int
    stages: list
    tree: FoldedTree
    M_y: float
    M_b: float
    stage_value_lb: np.ndarray | None = None
    monotone: np.ndarray | None = None

    @property
    def n_stages(self):
        return len(self.stages)

    def n_b(self, d):
        return self.tree.realizations[d - 1].shape[-1]


@dataclass
class NodeSpec:
    probability: float
    x_indices: np.ndarray
    recourse: str
    demand_level: float = 1.0
    label: str = ""


@dataclass
class Instance:
    """Master problem plus one recourse template per node family.

    Master feasibility is ``constraints @ x <= rhs`` and ``lower <= x <= upper``;
    equalities are written as two opposite inequalities.
    """

    cost: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    constraints: sparse.csr_matrix
    rhs: np.ndarray
    nodes: list
    recourse: dict
    name: str = ""
    names: list = field(default_factory=list)
    validated: bool = False

    @property
    def n_master(self):
        return self.cost.shape[0]

    def node_x(self, i, x):
        return np.asarray(x, float)[self.nodes[i].x_indices]

    def template(self, i):
        return self.recourse[self.nodes[i].recourse]

    def probability_mass(self):
        return float(sum(n.probability for n in self.nodes))

    def epsilon_admissible(self, epsilon, delta):
        """Whether ``epsilon > 2 * delta * sum(pi_i)``."""
        return epsilon > 2.0 * delta * self.probability_mass()


MasterInstance = Instance


def _check_probs(vec, what):
    vec = np.asarray(vec, float)
    if np.any(vec < -PROB_TOL):
        raise ProbabilitySumError(f"{what}: negative probability")
    if abs(vec.sum() - 1.0) > PROB_TOL:
        raise ProbabilitySumError(f"{what}: probabilities sum to {vec.sum():.12g}, expected 1")


def validate_template(t, name="recourse"):
    D = t.n_stages
    if D < 2:
        raise StageCountError(f"recourse {name!r}: needs at least 2 stages, got {D}")
    for label, M in (("M_y", t.M_y), ("M_b", t.M_b)):
        if not np.isfinite(M) or M <= 0:
            raise LipschitzConstantError(f"recourse {name!r}: {label} must be positive and finite, got {M}")
    tree = t.tree
    m, W = tree.n_states, tree.n_scenarios
    if m < 1 or W < 1:
        raise DimensionMismatchError(f"recourse {name!r}: need at least one state and one scenario")
    if np.asarray(tree.initial_probs).shape != (m,):
        raise DimensionMismatchError(f"recourse {name!r}: initial_probs must have {m} entries")
    _check_probs(tree.initial_probs, f"recourse {name!r} stage 1")
    if len(tree.transition_probs) != D - 1:
        raise DimensionMismatchError(f"recourse {name!r}: expected {D - 1} transition matrices")
    for d in range(2, D + 1):
        P = tree.transition_probs[d - 2]
        if P.shape != (m, m):
            raise DimensionMismatchError(f"recourse {name!r} stage {d}: transition matrix must be {m}x{m}")
        for l in range(m):
            _check_probs(P[l], f"recourse {name!r} stage {d} from state {l}")
    if len(tree.realizations) != D:
        raise DimensionMismatchError(f"recourse {name!r}: expected realizations for {D} stages")

    prev_ny = None
    for d, st in enumerate(t.stages, start=1):
        where = f"recourse {name!r} stage {d}"
        rows, ny = st.A.shape
        if st.cost.shape != (ny,):
            raise DimensionMismatchError(f"{where}: cost has {st.cost.shape[0]} entries, A has {ny} columns")
        if st.y_lower.shape != (ny,) or st.y_upper.shape != (ny,):
            raise DimensionMismatchError(f"{where}: y bounds must have {ny} entries")
        if not (np.all(np.isfinite(st.y_lower)) and np.all(np.isfinite(st.y_upper))):
            raise UnboundedVariableError(f"{where}: every y variable needs finite bounds")
        if np.any(st.y_lower > st.y_upper):
            raise DimensionMismatchError(f"{where}: y lower bound above upper bound")
        if st.senses is not None and st.senses.shape != (rows,):
            raise DimensionMismatchError(f"{where}: senses must have {rows} entries")
        if st.rhs is not None and st.rhs.shape != (rows,):
            raise DimensionMismatchError(f"{where}: rhs must have {rows} entries")
        if d == 1:
            if st.C is not None and st.C.nnz:
                raise DimensionMismatchError(f"{where}: stage 1 cannot depend on a previous stage")
        elif st.C is not None and st.C.shape != (rows, prev_ny):
            raise DimensionMismatchError(f"{where}: C must be {rows}x{prev_ny}, got {st.C.shape}")
        R = tree.realizations[d - 1]
        L = 1 if d == 1 else m
        if R.ndim != 4 or R.shape[:3] != (L, m, W):
            raise DimensionMismatchError(f"{where}: realizations must have shape ({L}, {m}, {W}, n_b), got {R.shape}")
        nb = R.shape[3]
        if st.coupling.size:
            c = st.coupling
            if c.ndim != 2 or c.shape[1] != 4:
                raise DimensionMismatchError(f"{where}: coupling entries are (row, x, b, value)")
            r_, xj, bk = c[:, 0], c[:, 1], c[:, 2]
            if r_.min() < 0 or r_.max() >= rows:
                raise DimensionMismatchError(f"{where}: coupling row out of range")
            if xj.min() < 0 or xj.max() >= t.n_x:
                raise DimensionMismatchError(f"{where}: coupling x index out of range (n_x={t.n_x})")
            if bk.min() < 0 or bk.max() >= nb:
                raise DimensionMismatchError(f"{where}: coupling b index out of range (n_b={nb})")
        if st.shared is not None:
            S, senses, srhs = st.shared
            if S.shape[1] != W * ny or S.shape[0] != len(senses) or S.shape[0] != len(srhs):
                raise DimensionMismatchError(f"{where}: shared constraints must span {W}x{ny} columns")
        prev_ny = ny

    if t.stage_value_lb is None:
        if any(np.any(st.cost < 0) for st in t.stages):
            raise InstanceError(f"recourse {name!r}: negative stage costs require stage_value_lb")
        t.stage_value_lb = _frozen(np.zeros((D, m)))
    elif np.shape(t.stage_value_lb) != (D, m):
        raise DimensionMismatchError(f"recourse {name!r}: stage_value_lb must be {D}x{m}")
    if t.monotone is None:
        t.monotone = _frozen(-np.ones(t.n_x), int)
    elif np.shape(t.monotone) != (t.n_x,):
        raise DimensionMismatchError(f"recourse {name!r}: monotone needs {t.n_x} entries")
    for j in np.flatnonzero(np.asarray(t.monotone) != 0):
        signs = set()
        for d, st in enumerate(t.stages, start=1):
            if st.coupling.size:
                sel = st.coupling[:, 1].astype(int) == j
                R = t.tree.realizations[d - 1]
                bvals = R.reshape(-1, R.shape[-1])
                for row in st.coupling[sel]:
                    col = bvals[:, int(row[2])]
                    signs.update(np.sign(row[3] * col[col != 0]).tolist())
        if len(signs) > 1:
            warnings.warn(f"recourse {name!r}: coupling for x[{j}] has mixed signs; monotonicity is doubtful")
    return t


def validate_instance(instance):
    """Check every structural invariant and return the same instance.

    Safe to call repeatedly.  Missing optional fields (``stage_value_lb``,
    ``monotone``) are filled with their defaults.
    """
    n = instance.cost.shape[0]
    if instance.lower.shape != (n,) or instance.upper.shape != (n,):
        raise DimensionMismatchError(f"master bounds must have {n} entries")
    if not (np.all(np.isfinite(instance.lower)) and np.all(np.isfinite(instance.upper))):
        bad = np.flatnonzero(~(np.isfinite(instance.lower) & np.isfinite(instance.upper)))
        raise UnboundedVariableError(f"master variable {int(bad[0])} needs finite bounds")
    if np.any(instance.lower > instance.upper):
        raise DimensionMismatchError("master lower bound above upper bound")
    if instance.constraints.shape != (instance.rhs.shape[0], n):
        raise DimensionMismatchError(
            f"master constraints are {instance.constraints.shape}, expected ({instance.rhs.shape[0]}, {n})"
        )
    if not instance.nodes:
        raise InstanceError("instance has no nodes")
    for name, t in instance.recourse.items():
        validate_template(t, name)
    for i, node in enumerate(instance.nodes):
        if node.probability < 0 or not np.isfinite(node.probability):
            raise ProbabilitySumError(f"node {i}: probability must be nonnegative")
        if node.recourse not in instance.recourse:
            raise InstanceError(f"node {i}: unknown recourse template {node.recourse!r}")
        idx = np.asarray(node.x_indices)
        if idx.size == 0:
            raise DimensionMismatchError(f"node {i}: empty x_indices")
        if idx.min() < 0 or idx.max() >= n:
            raise DimensionMismatchError(f"node {i}: x_indices out of range [0, {n})")
        if idx.size != instance.recourse[node.recourse].n_x:
            raise DimensionMismatchError(
                f"node {i}: {idx.size} x indices but template expects {instance.recourse[node.recourse].n_x}"
            )
        if not node.demand_level > 0:
            raise InstanceError(f"node {i}: demand_level must be positive")
    instance.validated = True
    return instance


# JSON serialisation -------------------------------------------------------

def _schema():
    text = resources.files("benders_sddp").joinpath("schema/instance.schema.json").read_text("utf-8")
    return json.loads(text)


def _mat_from(obj):
    rows, cols = int(obj["rows"]), int(obj["cols"])
    e = np.asarray(obj["entries"], float).reshape(-1, 3)
    if e.size and (e[:, 0].max() >= rows or e[:, 1].max() >= cols or e[:, :2].min() < 0):
        raise DimensionMismatchError(f"matrix entry outside declared {rows}x{cols} shape")
    return sparse.csr_matrix((e[:, 2], (e[:, 0].astype(int), e[:, 1].astype(int))), shape=(rows, cols))


def _mat_to(M):
    M = sparse.coo_matrix(M)
    order = np.lexsort((M.col, M.row))
    entries = [[int(M.row[p]), int(M.col[p]), float(M.data[p])] for p in order if M.data[p] != 0]
    return {"rows": int(M.shape[0]), "cols": int(M.shape[1]), "entries": entries}


def instance_from_dict(data):
    try:
        jsonschema.validate(data, _schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ParseError(f"{exc.message} (at {path})") from None
    ms = data["master"]
    n = len(ms["cost"])
    if "constraints" in ms:
        constraints = _mat_from(ms["constraints"])
        rhs = np.asarray(ms.get("rhs", []), float)
    else:
        constraints = sparse.csr_matrix((0, n))
        rhs = np.zeros(0)
    recourse = {}
    for name, tj in data["recourse"].items():
        stages = []
        for sj in tj["stages"]:
            shared = None
            if "shared" in sj:
                sh = sj["shared"]
                shared = (_mat_from(sh["matrix"]), np.array(sh["senses"], dtype="<U1"), np.asarray(sh["rhs"], float))
            coupling = np.asarray(sj["coupling"]["entries"], float).reshape(-1, 4)
            stages.append(
                StageData(
                    A=_mat_from(sj["A"]),
                    cost=np.asarray(sj["cost"], float),
                    coupling=coupling,
                    y_lower=np.asarray(sj["y_lower"], float),
                    y_upper=np.asarray(sj["y_upper"], float),
                    C=_mat_from(sj["C"]) if "C" in sj else None,
                    senses=np.array(sj["senses"], dtype="<U1") if "senses" in sj else None,
                    rhs=np.asarray(sj["rhs"], float) if "rhs" in sj else None,
                    shared=shared,
                )
            )
        trj = tj["tree"]
        tree = FoldedTree(
            n_states=int(trj["states"]),
            n_scenarios=int(trj["scenarios"]),
            initial_probs=np.asarray(trj["initial_probs"], float),
            transition_probs=[np.asarray(P, float) for P in trj["transition_probs"]],
            realizations=[np.asarray(R, float) for R in trj["realizations"]],
        )
        recourse[name] = RecourseTemplate(
            n_x=int(tj["n_x"]),
            stages=stages,
            tree=tree,
            M_y=float(tj["M_y"]),
            M_b=float(tj["M_b"]),
            stage_value_lb=np.asarray(tj["stage_value_lb"], float) if "stage_value_lb" in tj else None,
            monotone=np.asarray(tj["monotone"], int) if "monotone" in tj else None,
        )
    nodes = [
        NodeSpec(
            probability=float(nj["probability"]),
            x_indices=np.asarray(nj["x_indices"], int),
            recourse=nj["recourse"],
            demand_level=float(nj.get("demand_level", 1.0)),
            label=nj.get("label", ""),
        )
        for nj in data["nodes"]
    ]
    inst = Instance(
        cost=np.asarray(ms["cost"], float),
        lower=np.asarray(ms["lower"], float),
        upper=np.asarray(ms["upper"], float),
        constraints=constraints,
        rhs=rhs,
        nodes=nodes,
        recourse=recourse,
        name=data.get("name", ""),
        names=list(ms.get("names", [])),
    )
    return validate_instance(inst)


def instance_to_dict(instance):
    master = {
        "cost": instance.cost.tolist(),
        "lower": instance.lower.tolist(),
        "upper": instance.upper.tolist(),
        "constraints": _mat_to(instance.constraints),
        "rhs": instance.rhs.tolist(),
    }
    if instance.names:
        master["names"] = list(instance.names)
    recourse = {}
    for name, t in instance.recourse.items():
        stages = []
        for st in t.stages:
            sj = {
                "A": _mat_to(st.A),
                "cost": st.cost.tolist(),
                "coupling": {"entries": [[int(r), int(j), int(k), float(v)] for r, j, k, v in st.coupling]},
                "y_lower": st.y_lower.tolist(),
                "y_upper": st.y_upper.tolist(),
            }
            if st.C is not None:
                sj["C"] = _mat_to(st.C)
            if st.senses is not None:
                sj["senses"] = [str(s) for s in st.senses]
            if st.rhs is not None:
                sj["rhs"] = st.rhs.tolist()
            if st.shared is not None:
                S, senses, srhs = st.shared
                sj["shared"] = {"matrix": _mat_to(S), "senses": [str(s) for s in senses], "rhs": list(map(float, srhs))}
            stages.append(sj)
        tj = {
            "n_x": t.n_x,
            "stages": stages,
            "tree": {
                "states": t.tree.n_states,
                "scenarios": t.tree.n_scenarios,
                "initial_probs": np.asarray(t.tree.initial_probs).tolist(),
                "transition_probs": [np.asarray(P).tolist() for P in t.tree.transition_probs],
                "realizations": [np.asarray(R).tolist() for R in t.tree.realizations],
            },
            "M_y": t.M_y,
            "M_b": t.M_b,
        }
        if t.stage_value_lb is not None:
            tj["stage_value_lb"] = np.asarray(t.stage_value_lb).tolist()
        if t.monotone is not None:
            tj["monotone"] = [int(s) for s in t.monotone]
        recourse[name] = tj
    nodes = []
    for nd in instance.nodes:
        nj = {
            "probability": nd.probability,
            "x_indices": [int(i) for i in nd.x_indices],
            "recourse": nd.recourse,
            "demand_level": nd.demand_level,
        }
        if nd.label:
            nj["label"] = nd.label
        nodes.append(nj)
    out = {"master": master, "nodes": nodes, "recourse": recourse}
    if instance.name:
        out = {"name": instance.name, **out}
    return out


def load_instance(path):
    """Parse and validate a JSON instance file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return instance_from_dict(data)


def dumps_instance(instance):
    return json.dumps(instance_to_dict(instance), separators=(",", ":"), sort_keys=False)


def save_instance(instance, path):
    text = dumps_instance(instance)
    Path(path).write_text(text + "\n", encoding="utf-8")
    return path


def instance_hash(instance):
    return hashlib.sha256(dumps_instance(instance).encode("utf-8")).hexdigest()


def single_node_instance(template, x, name="recourse"):
    """Wrap one template as an instance whose master variables are pinned at ``x``."""
    x = np.asarray(x, float)
    return validate_instance(
        Instance(
            cost=np.zeros(x.size),
            lower=x.copy(),
            upper=x.copy(),
            constraints=sparse.csr_matrix((0, x.size)),
            rhs=np.zeros(0),
            nodes=[NodeSpec(1.0, np.arange(x.size), name)],
            recourse={name: template},
        )
    )
