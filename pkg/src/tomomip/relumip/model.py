"""Small dense mixed-integer models and their solutions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np


@dataclass
class MipModel:
    """Maximise ``c @ x + sum_k q_k x_{i_k}^2 + const`` subject to
    ``A_eq x = b_eq``, ``A_ub x <= b_ub``, ``lb <= x <= ub`` and integrality of
    the variables flagged in ``binary``.

    ``completion`` optionally maps a relaxed point (plus the node bounds) to a
    feasible point; the branch-and-bound uses it as a primal heuristic.
    """

    lb: np.ndarray
    ub: np.ndarray
    binary: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray
    quad_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    quad_coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    const: float = 0.0
    names: List[str] = field(default_factory=list)
    groups: Dict[str, np.ndarray] = field(default_factory=dict)
    completion: Optional[Callable] = None

    @property
    def n(self) -> int:
        return self.lb.size

    @property
    def is_linear(self) -> bool:
        return not np.any(self.quad_coef != 0)

    def quad_diag(self) -> np.ndarray:
        """Per-variable aggregated quadratic coefficient."""
        q = np.zeros(self.n)
        np.add.at(q, self.quad_idx, self.quad_coef)
        return q

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        quad = float(np.sum(self.quad_coef * x[self.quad_idx] ** 2)) if self.quad_idx.size else 0.0
        return float(self.c @ x) + quad + self.const

    def violation(self, x) -> float:
        """Largest constraint, bound or integrality violation at ``x``."""
        x = np.asarray(x, dtype=np.float64)
        v = [0.0, np.max(self.lb - x, initial=0.0), np.max(x - self.ub, initial=0.0)]
        if self.b_eq.size:
            v.append(np.max(np.abs(self.A_eq @ x - self.b_eq)))
        if self.b_ub.size:
            v.append(np.max(self.A_ub @ x - self.b_ub, initial=0.0))
        xb = x[self.binary]
        if xb.size:
            v.append(np.max(np.abs(xb - np.rint(xb))))
        return float(max(v))

    def to_lp_format(self) -> str:
        """CPLEX LP text for cross-checking with external solvers."""
        names = self.names or [f"x{j}" for j in range(self.n)]

        def lin(coefs):
            terms = [f"{'+' if v >= 0 else '-'} {abs(v):.17g} {names[j]}"
                     for j, v in enumerate(coefs) if v != 0]
            return " ".join(terms) if terms else "0 " + names[0]

        lines = ["\\ mixed-integer model", "Maximize", " obj: " + lin(self.c)]
        if self.quad_idx.size:
            quad = " ".join(f"{'+' if 2 * q >= 0 else '-'} {abs(2 * q):.17g} {names[i]} ^ 2"
                            for i, q in zip(self.quad_idx, self.quad_coef) if q != 0)
            if quad:
                lines[-1] += f" + [ {quad} ] / 2"
        if self.const:
            lines.append(f"\\ objective constant: {self.const:.17g}")
        lines.append("Subject To")
        for i, (row, rhs) in enumerate(zip(self.A_eq, self.b_eq)):
            lines.append(f" e{i}: {lin(row)} = {rhs:.17g}")
        for i, (row, rhs) in enumerate(zip(self.A_ub, self.b_ub)):
            lines.append(f" u{i}: {lin(row)} <= {rhs:.17g}")
        lines.append("Bounds")
        for j in range(self.n):
            lines.append(f" {self.lb[j]:.17g} <= {names[j]} <= {self.ub[j]:.17g}")
        bins = [names[j] for j in np.flatnonzero(self.binary)]
        if bins:
            lines.append("Binary")
            lines.extend(" " + b for b in bins)
        lines.append("End")
        return "\n".join(lines) + "\n"


class ModelBuilder:
    """Incremental construction of a :class:`MipModel`."""

    def __init__(self):
        self.lb: List[float] = []
        self.ub: List[float] = []
        self.binary: List[bool] = []
        self.names: List[str] = []
        self.c: Dict[int, float] = {}
        self.eq: List[tuple] = []
        self.le: List[tuple] = []
        self.quad: List[tuple] = []
        self.const = 0.0

    def var(self, name, lb, ub, binary=False) -> int:
        if not (np.isfinite(lb) and np.isfinite(ub)) or lb > ub:
            raise ValueError(f"variable {name}: invalid bounds [{lb}, {ub}]")
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.binary.append(bool(binary))
        self.names.append(name)
        return len(self.lb) - 1

    def add_eq(self, coefs: Dict[int, float], rhs: float):
        self.eq.append((dict(coefs), float(rhs)))

    def add_le(self, coefs: Dict[int, float], rhs: float):
        self.le.append((dict(coefs), float(rhs)))

    def add_obj(self, j: int, coef: float):
        self.c[j] = self.c.get(j, 0.0) + float(coef)

    def add_quad(self, j: int, coef: float):
        self.quad.append((j, float(coef)))

    def build(self, groups=None, completion=None) -> MipModel:
        n = len(self.lb)

        def dense(rows):
            A = np.zeros((len(rows), n))
            b = np.zeros(len(rows))
            for i, (coefs, rhs) in enumerate(rows):
                for j, v in coefs.items():
                    A[i, j] += v
                b[i] = rhs
            return A, b

        A_eq, b_eq = dense(self.eq)
        A_ub, b_ub = dense(self.le)
        c = np.zeros(n)
        for j, v in self.c.items():
            c[j] = v
        qi = np.array([j for j, _ in self.quad], dtype=np.int64)
        qc = np.array([v for _, v in self.quad], dtype=np.float64)
        return MipModel(np.array(self.lb), np.array(self.ub), np.array(self.binary, dtype=bool),
                        c, A_eq, b_eq, A_ub, b_ub, qi, qc, self.const, list(self.names),
                        dict(groups or {}), completion)


@dataclass
class MipSolution:
    x: Optional[np.ndarray]
    objective: float
    bound: float
    gap: float
    nodes: int
    status: str
    certified: bool = True
    runtime_seconds: float = 0.0
    lp_solves: int = 0

    @property
    def has_incumbent(self) -> bool:
        return self.x is not None


def relative_gap(bound: float, value: float) -> float:
    if not np.isfinite(value):
        return float("inf")
    return abs(bound - value) / max(1.0, abs(value))
