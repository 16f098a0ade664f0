"""Explicit forward marching scheme for second-kind problems.

Node i receives forcing(t_i) plus, per kernel order n, (h^n / n!) times the
sum of the kernel over every n-tuple of earlier nodes.  All tuple indices
stay strictly below i, so the march is fully explicit.  Each subinterval is
sampled at its left endpoint; no higher-order quadrature is offered, which
keeps the first-order error analysis exact for what the code actually does.

Inner sums run through one of three engines:
  * generic: exact enumeration of all i^n tuples in odometer order
    (rightmost index fastest), capped because the cost is i^n per node;
  * separable: a(t_i) * (sum over earlier nodes of phi)^n, linear per node;
  * running separable: same value, but when phi ignores t the partial sum
    is carried across nodes with compensated accumulation, constant per node.
Sums are accumulated with math.fsum (exactly rounded), so results do not
depend on enumeration chunking.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .bounds import tail_bound
from .core import (
    FiniteFamily,
    Grid,
    GridFunction,
    InfiniteFamily,
    Kernel,
    SecondKindProblem,
)
from .errors import CapacityError, NumericBlowupError, TailDivergenceError

__all__ = [
    "DEFAULT_ORDER_CAP",
    "DEFAULT_TAIL_TOL",
    "DEFAULT_TAIL_ORDER_LIMIT",
    "SolveOptions",
    "SolveReport",
    "index_set_size",
    "inner_sum_generic",
    "inner_sum_separable",
    "solve_second_kind",
    "solve_truncated_infinite",
    "solve",
]

DEFAULT_ORDER_CAP = 4
DEFAULT_TAIL_TOL = 1e-8
DEFAULT_TAIL_ORDER_LIMIT = 30

_PARALLEL_CUTOFF = 4096
_PARALLEL_CHUNKS = 4


@dataclass(frozen=True)
class SolveOptions:
    """Cost and truncation controls.

    Exactly one of `truncation_order` (fixed) and `truncation_tol`
    (adaptive tail tolerance) may be set; with neither, adaptive selection
    runs at DEFAULT_TAIL_TOL.  `generic_order_cap` bounds the order the
    enumeration engine will accept, since its cost grows like i^n per node.
    """

    generic_order_cap: int = DEFAULT_ORDER_CAP
    truncation_order: int | None = None
    truncation_tol: float | None = None
    parallel_inner_sums: bool = False
    tail_order_limit: int = DEFAULT_TAIL_ORDER_LIMIT

    def __post_init__(self):
        if self.generic_order_cap < 1:
            raise ValueError("generic_order_cap must be >= 1")
        if self.truncation_order is not None and self.truncation_tol is not None:
            raise ValueError("set a fixed truncation order or a tolerance, not both")
        if self.truncation_order is not None and self.truncation_order < 1:
            raise ValueError("truncation_order must be >= 1")
        if self.truncation_tol is not None and not self.truncation_tol > 0:
            raise ValueError("truncation_tol must be positive")
        if self.tail_order_limit < 2:
            raise ValueError("tail_order_limit must be at least 2")


@dataclass
class SolveReport:
    solution: GridFunction
    truncation_used: int
    kernel_eval_count: int
    evals_by_order: dict[int, int]
    tail_estimate: float | None = None


def index_set_size(order: int, node: int) -> int:
    """Number of order-tuples over nodes 0..node-1, i.e. node**order."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order!r}")
    if node < 0:
        raise ValueError(f"node index must be >= 0, got {node!r}")
    return node**order


def _state_prefix(state, i: int) -> list[float]:
    values = state.values if isinstance(state, GridFunction) else np.asarray(state, dtype=float)
    if len(values) < i:
        raise ValueError(f"state holds {len(values)} values but node {i} needs {i}")
    return values[:i].tolist() if isinstance(values, np.ndarray) else list(values[:i])


def inner_sum_generic(
    kernel: Kernel,
    grid: Grid,
    i: int,
    state,
    order_cap: int = DEFAULT_ORDER_CAP,
) -> float:
    """Exact enumeration of the order-n inner sum at node i.

    Tuples are visited in odometer order over (j_1..j_n) and accumulated
    with an exactly rounded sum, so the result is reproducible bit for bit.
    """
    n = kernel.order
    if n > order_cap:
        raise CapacityError(
            f"kernel order {n} exceeds the generic enumeration cap {order_cap}; "
            f"supply a separable form or raise the cap"
        )
    if not 0 <= i <= grid.intervals:
        raise ValueError(f"node index {i} outside 0..{grid.intervals}")
    if i == 0:
        return 0.0
    xs = _state_prefix(state, i)
    nodes = grid.nodes[:i].tolist()
    t = float(grid.nodes[i])
    fn = kernel.fn
    return math.fsum(
        fn(t, tuple(nodes[j] for j in js), tuple(xs[j] for j in js))
        for js in product(range(i), repeat=n)
    )


def inner_sum_separable(kernel: Kernel, grid: Grid, i: int, state) -> float:
    """Factorized inner sum: a(t_i) * (sum_j phi(t_i, t_j, x_j))^n."""
    if kernel.separable is None:
        raise ValueError(f"order-{kernel.order} kernel carries no separable form")
    if not 0 <= i <= grid.intervals:
        raise ValueError(f"node index {i} outside 0..{grid.intervals}")
    if i == 0:
        return 0.0
    sep = kernel.separable
    xs = _state_prefix(state, i)
    nodes = grid.nodes[:i].tolist()
    t = float(grid.nodes[i])
    phi = sep.factor
    inner = math.fsum(phi(t, nodes[j], xs[j]) for j in range(i))
    return sep.prefactor(t) * inner**kernel.order


# --- inner-sum engines used by the node sweep ---------------------------


class _GenericEngine:
    def __init__(self, kernel: Kernel, grid: Grid, order_cap: int, counters: dict, pool):
        if kernel.order > order_cap:
            raise CapacityError(
                f"kernel order {kernel.order} exceeds the generic enumeration cap "
                f"{order_cap}; supply a separable form or raise the cap"
            )
        self.order = kernel.order
        self._fn = kernel.fn
        self._nodes = grid.nodes.tolist()
        self._counters = counters
        self._pool = pool

    def _range_sum(self, t: float, first, i: int, xs: list[float]) -> float:
        fn = self._fn
        nodes = self._nodes
        inner = (range(i),) * (self.order - 1)
        return math.fsum(
            fn(t, tuple(nodes[j] for j in js), tuple(xs[j] for j in js))
            for js in product(first, *inner)
        )

    def value(self, i: int, state) -> float:
        if i == 0:
            return 0.0
        self._counters[self.order] += i**self.order
        t = self._nodes[i]
        xs = state[:i].tolist()
        if self._pool is not None and i**self.order >= _PARALLEL_CUTOFF and i >= _PARALLEL_CHUNKS:
            edges = [i * c // _PARALLEL_CHUNKS for c in range(_PARALLEL_CHUNKS + 1)]
            futures = [
                self._pool.submit(self._range_sum, t, range(lo, hi), i, xs)
                for lo, hi in zip(edges, edges[1:])
            ]
            return math.fsum(f.result() for f in futures)
        return self._range_sum(t, range(i), i, xs)


class _SeparableEngine:
    def __init__(self, kernel: Kernel, grid: Grid, counters: dict):
        self.order = kernel.order
        self._phi = kernel.separable.factor
        self._a = kernel.separable.prefactor
        self._nodes = grid.nodes.tolist()
        self._counters = counters

    def value(self, i: int, state) -> float:
        if i == 0:
            return 0.0
        self._counters[self.order] += i
        t = self._nodes[i]
        phi = self._phi
        nodes = self._nodes
        xs = state[:i].tolist()
        inner = math.fsum(phi(t, nodes[j], xs[j]) for j in range(i))
        return self._a(t) * inner**self.order


class _RunningSeparableEngine:
    """Carries the phi partial sum across nodes; valid only when phi
    ignores its t argument.  Uses compensated accumulation so the carried
    sum matches a fresh left-to-right sum to rounding."""

    def __init__(self, kernel: Kernel, grid: Grid, counters: dict):
        self.order = kernel.order
        self._phi = kernel.separable.factor
        self._a = kernel.separable.prefactor
        self._nodes = grid.nodes.tolist()
        self._counters = counters
        self._sum = 0.0
        self._comp = 0.0
        self._next = 0

    def value(self, i: int, state) -> float:
        if i != self._next:
            raise RuntimeError("running inner sums must be advanced node by node")
        self._next = i + 1
        if i == 0:
            return 0.0
        j = i - 1
        term = self._phi(self._nodes[j], self._nodes[j], float(state[j]))
        self._counters[self.order] += 1
        y = term - self._comp
        s = self._sum + y
        self._comp = (s - self._sum) - y
        self._sum = s
        return self._a(self._nodes[i]) * self._sum**self.order


def _make_engine(kernel: Kernel, grid: Grid, opts: SolveOptions, counters: dict, pool):
    if kernel.separable is not None:
        if kernel.separable.factor_depends_on_t:
            return _SeparableEngine(kernel, grid, counters)
        return _RunningSeparableEngine(kernel, grid, counters)
    return _GenericEngine(kernel, grid, opts.generic_order_cap, counters, pool)


def _sweep(
    kernels: Sequence[Kernel],
    forcing: Callable[[float], float],
    grid: Grid,
    opts: SolveOptions,
    counters: dict,
    source: np.ndarray | None = None,
) -> np.ndarray:
    """One forward pass over all nodes.

    With `source` absent this is the marching scheme: node i reads the
    output values already written at nodes < i.  With `source` given it is
    a single operator application reading that fixed input.  Both paths
    share the same engines and accumulation order, so a marching solution
    is reproduced bit for bit when fed back through.
    """
    h = grid.step
    out = np.empty(grid.intervals + 1)
    src = out if source is None else source
    pool = None
    needs_pool = opts.parallel_inner_sums and any(k.separable is None for k in kernels)
    try:
        if needs_pool:
            pool = ThreadPoolExecutor(max_workers=_PARALLEL_CHUNKS)
        engines = [_make_engine(k, grid, opts, counters, pool) for k in kernels]
        weights = [h**e.order / math.factorial(e.order) for e in engines]
        nodes = grid.nodes.tolist()
        for i in range(grid.intervals + 1):
            try:
                parts = [float(forcing(nodes[i]))]
                for engine, w in zip(engines, weights):
                    parts.append(w * engine.value(i, src))
                acc = math.fsum(parts)
            except OverflowError:
                raise NumericBlowupError(i) from None
            if not math.isfinite(acc):
                raise NumericBlowupError(i)
            out[i] = acc
    finally:
        if pool is not None:
            pool.shutdown()
    return out


def _check_grid(problem: SecondKindProblem, grid: Grid) -> None:
    if not math.isclose(grid.horizon, problem.horizon, rel_tol=1e-12, abs_tol=0.0):
        raise ValueError(
            f"grid horizon {grid.horizon!r} does not match problem horizon {problem.horizon!r}"
        )


def solve_second_kind(
    problem: SecondKindProblem, grid: Grid, opts: SolveOptions | None = None
) -> SolveReport:
    """March the explicit scheme over the grid for a finite kernel family."""
    if not isinstance(problem.kernels, FiniteFamily):
        raise ValueError("solve_second_kind expects a finite kernel family; "
                         "use solve_truncated_infinite for generated families")
    opts = opts or SolveOptions()
    _check_grid(problem, grid)
    kernels = problem.kernels.kernels
    counters = {k.order: 0 for k in kernels}
    values = _sweep(kernels, problem.forcing, grid, opts, counters)
    return SolveReport(
        solution=GridFunction(grid, values),
        truncation_used=len(kernels),
        kernel_eval_count=sum(counters.values()),
        evals_by_order=counters,
    )


def resolve_truncation(
    problem: SecondKindProblem, opts: SolveOptions | None = None
) -> tuple[tuple[Kernel, ...], int, float | None]:
    """Kernels to actually solve with, their count, and the tail estimate.

    Finite families pass through unchanged.  Generated families are cut at
    the fixed order when one is set, otherwise at the smallest order whose
    weighted bound tail drops below the tolerance; failure to get there by
    the hard order limit raises TailDivergenceError.
    """
    opts = opts or SolveOptions()
    family = problem.kernels
    if isinstance(family, FiniteFamily):
        return family.kernels, family.max_order, None
    probe_limit = max(opts.tail_order_limit + 10, family.order_limit)
    if opts.truncation_order is not None:
        order = opts.truncation_order
        try:
            tail = tail_bound(family.sup_bound_for, problem.horizon, order, probe_limit)
        except TailDivergenceError:
            tail = math.inf
        return family.materialize(order), order, tail
    tol = opts.truncation_tol if opts.truncation_tol is not None else DEFAULT_TAIL_TOL
    for order in range(1, opts.tail_order_limit + 1):
        tail = tail_bound(family.sup_bound_for, problem.horizon, order, probe_limit)
        if tail < tol:
            return family.materialize(order), order, tail
    raise TailDivergenceError(
        f"tail estimate stayed at or above {tol!r} for every order up to "
        f"{opts.tail_order_limit}"
    )


def solve_truncated_infinite(
    problem: SecondKindProblem, grid: Grid, opts: SolveOptions | None = None
) -> SolveReport:
    """Select a truncation order, then march the resulting finite scheme."""
    if not isinstance(problem.kernels, InfiniteFamily):
        raise ValueError("solve_truncated_infinite expects a generated kernel family")
    opts = opts or SolveOptions()
    _check_grid(problem, grid)
    kernels, order, tail = resolve_truncation(problem, opts)
    finite = SecondKindProblem(
        forcing=problem.forcing,
        horizon=problem.horizon,
        kernels=FiniteFamily(kernels),
        forcing_dt_bound=problem.forcing_dt_bound,
    )
    report = solve_second_kind(finite, grid, opts)
    report.truncation_used = order
    report.tail_estimate = tail
    return report


def solve(problem: SecondKindProblem, grid: Grid, opts: SolveOptions | None = None) -> SolveReport:
    """Dispatch on the kernel family kind."""
    if isinstance(problem.kernels, InfiniteFamily):
        return solve_truncated_infinite(problem, grid, opts)
    return solve_second_kind(problem, grid, opts)
