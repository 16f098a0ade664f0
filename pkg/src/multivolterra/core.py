"""Domain types for multiple Volterra integral equations.

A second-kind problem couples a forcing term with a family of integral
kernels of increasing order n; the order-n kernel is integrated over the
cube [0, t]^n against the unknown evaluated at the n inner time points.
Kernels are supplied as evaluation contracts so arbitrary nonlinear
dependence on the unknown is representable.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, TailDivergenceError

__all__ = [
    "Grid",
    "GridFunction",
    "KernelBounds",
    "SeparableForm",
    "SeparableSeriesKernel",
    "Kernel",
    "FiniteFamily",
    "InfiniteFamily",
    "SecondKindProblem",
    "FirstKindProblem",
    "make_grid",
    "eval_kernel",
    "build_feedback_problem",
]


@dataclass(frozen=True)
class Grid:
    """Uniform partition of [0, T] into `intervals` steps of size h = T/M."""

    horizon: float
    intervals: int
    step: float = field(init=False, compare=False)
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon!r}")
        if self.intervals < 1:
            raise ValueError(f"need at least one interval, got {self.intervals!r}")
        h = self.horizon / self.intervals
        nodes = h * np.arange(self.intervals + 1)
        nodes.setflags(write=False)
        object.__setattr__(self, "step", h)
        object.__setattr__(self, "nodes", nodes)

    def __len__(self) -> int:
        return self.intervals + 1


def make_grid(horizon: float, intervals: int) -> Grid:
    """Uniform grid over [0, horizon] with the given number of steps."""
    return Grid(float(horizon), int(intervals))


@dataclass(frozen=True)
class GridFunction:
    """Real values attached to the nodes of a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).copy()
        if values.shape != (self.grid.intervals + 1,):
            raise ValueError(
                f"expected {self.grid.intervals + 1} node values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must all be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class KernelBounds:
    """User-declared constants bounding one kernel.

    lipschitz bounds the change of the kernel per unit change of each
    unknown-value argument; sup_bound bounds its absolute value;
    grad_s_bound bounds the gradient with respect to the inner time
    points; dt_bound bounds the partial derivative in t.  All four feed
    the a priori error estimates and are trusted as given.
    """

    lipschitz: float
    sup_bound: float
    grad_s_bound: float = 0.0
    dt_bound: float = 0.0

    def __post_init__(self):
        for name in ("lipschitz", "sup_bound", "grad_s_bound", "dt_bound"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be nonnegative and finite, got {v!r}")


@dataclass(frozen=True)
class SeparableForm:
    """Product factorization of a kernel: a(t) * prod_k phi(t, s_k, x_k).

    `factor_depends_on_t` marks whether phi reads its first argument; when
    it does not, solvers may carry running sums across nodes instead of
    recomputing the inner sum at every node.
    """

    prefactor: Callable[[float], float]
    factor: Callable[[float, float, float], float]
    factor_depends_on_t: bool = True


@dataclass(frozen=True)
class SeparableSeriesKernel:
    """Per-coordinate factorized series kernel a(t) * prod_k factor(t, s_k).

    Accepted by `build_feedback_problem` so the product structure survives
    into a SeparableForm on the constructed kernels.
    """

    prefactor: Callable[[float], float]
    factor: Callable[[float, float], float]
    factor_depends_on_t: bool = True


@dataclass(frozen=True)
class Kernel:
    """Order-n integrand with evaluation contract (t, s[1..n], x[1..n]) -> real.

    The contract must be pure: deterministic, side-effect free, and safe to
    call concurrently.  `separable`, when present, must agree with `fn`
    pointwise; `bounds` is optional metadata consumed by the error analysis.
    """

    order: int
    fn: Callable[[float, Sequence[float], Sequence[float]], float]
    separable: SeparableForm | None = None
    bounds: KernelBounds | None = None

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"kernel order must be >= 1, got {self.order!r}")


def eval_kernel(kernel: Kernel, t: float, s: Sequence[float], x: Sequence[float]) -> float:
    """Evaluate a kernel at one admissible point.

    Raises ValueError on an arity mismatch and DomainError when some s_i
    falls outside [0, t].
    """
    if len(s) != kernel.order or len(x) != kernel.order:
        raise ValueError(
            f"order-{kernel.order} kernel called with {len(s)} time and {len(x)} value arguments"
        )
    for si in s:
        if not (0.0 <= si <= t):
            raise DomainError(f"inner time point {si!r} outside [0, {t!r}]")
    return kernel.fn(t, tuple(s), tuple(x))


@dataclass(frozen=True)
class FiniteFamily:
    """Kernels of orders 1..N, one per order.  May be empty (pure forcing)."""

    kernels: tuple[Kernel, ...]

    def __post_init__(self):
        kernels = tuple(self.kernels)
        object.__setattr__(self, "kernels", kernels)
        orders = [k.order for k in kernels]
        if orders != list(range(1, len(kernels) + 1)):
            raise ValueError(
                f"kernel orders must be exactly 1..{len(kernels)}, got {orders}"
            )

    @property
    def max_order(self) -> int:
        return len(self.kernels)


@dataclass(frozen=True)
class InfiniteFamily:
    """Generated kernel family with per-order sup bounds for tail control.

    `kernel_for(n)` must return an order-n Kernel; `sup_bound_for(n)` the
    declared bound on its absolute value.  The bounds drive truncation-order
    selection, so the weighted bound series has to decay; this is checked
    numerically when a problem is constructed.
    """

    kernel_for: Callable[[int], Kernel]
    sup_bound_for: Callable[[int], float]
    order_limit: int = 30

    def __post_init__(self):
        if self.order_limit < 2:
            raise ValueError("order_limit must be at least 2")

    def materialize(self, max_order: int) -> tuple[Kernel, ...]:
        kernels = []
        for n in range(1, max_order + 1):
            k = self.kernel_for(n)
            if k.order != n:
                raise ValueError(f"kernel generator returned order {k.order} for order {n}")
            kernels.append(k)
        return tuple(kernels)


def _tail_estimate(
    bound_for: Callable[[int], float], horizon: float, after: int, order_limit: int
) -> float:
    """Sum of bound_for(n) * T^n / n! for n > after, up to order_limit,
    plus a geometric remainder inferred from the last observed term ratio.

    The ratio must be below one by the time order_limit is reached, else
    TailDivergenceError.
    """
    start = max(after, 1)
    terms = []
    for n in range(start, order_limit + 1):
        c = float(bound_for(n))
        if not (c >= 0 and math.isfinite(c)):
            raise ValueError(f"sup bound for order {n} must be nonnegative and finite, got {c!r}")
        terms.append(c * horizon**n / math.factorial(n))
    partial = math.fsum(terms[after - start + 1 :]) if after >= start else math.fsum(terms)
    # geometric remainder from the last pair of consecutive nonzero terms
    if terms[-1] == 0.0:
        return partial
    ratio = None
    for prev, cur in zip(terms[-2::-1], terms[:0:-1]):
        if prev > 0.0 and cur > 0.0:
            ratio = cur / prev
            break
    if ratio is None or ratio >= 1.0:
        raise TailDivergenceError(
            f"bound series terms are not decaying by order {order_limit} "
            f"(last ratio {ratio if ratio is not None else 'undefined'})"
        )
    return partial + terms[-1] * ratio / (1.0 - ratio)


@dataclass(frozen=True)
class SecondKindProblem:
    """Equation data: unknown outside the integrals.

    x(t) = forcing(t) + sum_n (1/n!) * Integral_{[0,t]^n} kernel_n(t, s, x(s)) ds

    `forcing_dt_bound` is the declared bound on |d forcing/dt|, used only by
    the error analysis.
    """

    forcing: Callable[[float], float]
    horizon: float
    kernels: FiniteFamily | InfiniteFamily
    forcing_dt_bound: float = 0.0

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon!r}")
        if not (self.forcing_dt_bound >= 0 and math.isfinite(self.forcing_dt_bound)):
            raise ValueError("forcing_dt_bound must be nonnegative and finite")
        if isinstance(self.kernels, InfiniteFamily):
            # fails fast when the declared bounds cannot control a truncation tail
            _tail_estimate(
                self.kernels.sup_bound_for, self.horizon, 1, self.kernels.order_limit
            )


@dataclass(frozen=True)
class FirstKindProblem:
    """Multi-linear equation data: unknown only inside the integrals.

    sum_n (1/n!) * Integral_{[0,t]^n} kernel_n(t, s_1..s_n) x(s_1)..x(s_n) ds = rhs(t)

    Kernels are assumed symmetric in the inner time points.  `kernels[i]`
    holds the order-(i+1) kernel and `kernels_dt[i]` its t-derivative; None
    stands for an identically zero contract.  Derivatives must be supplied
    analytically - differentiating first-kind data numerically is ill-posed.
    An optional generator pair extends the family beyond the explicit list.
    """

    rhs: Callable[[float], float]
    rhs_dt: Callable[[float], float]
    horizon: float
    kernels: tuple[Callable[..., float] | None, ...]
    kernels_dt: tuple[Callable[..., float] | None, ...]
    kernel_supplier: Callable[[int], Callable[..., float] | None] | None = None
    kernel_dt_supplier: Callable[[int], Callable[..., float] | None] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "kernels_dt", tuple(self.kernels_dt))
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon!r}")
        if len(self.kernels) != len(self.kernels_dt):
            raise ValueError("kernels and kernels_dt must pair up order by order")
        if not self.kernels and self.kernel_supplier is None:
            raise ValueError("a first-kind problem needs at least one kernel")
        if self.kernels and self.kernels[0] is None:
            raise ValueError("the order-1 kernel is required (it provides the diagonal pivot)")
        r0 = self.rhs(0.0)
        if abs(r0) > 1e-9:
            raise ValueError(f"rhs(0) must vanish (the left side is 0 at t = 0), got {r0!r}")

    @property
    def max_order(self) -> int | None:
        """Largest explicit order, or None when a generator extends the family."""
        if self.kernel_supplier is not None:
            return None
        return len(self.kernels)

    def kernel(self, n: int) -> Callable[..., float] | None:
        if n <= len(self.kernels):
            return self.kernels[n - 1]
        if self.kernel_supplier is not None:
            return self.kernel_supplier(n)
        return None

    def kernel_dt(self, n: int) -> Callable[..., float] | None:
        if n <= len(self.kernels_dt):
            return self.kernels_dt[n - 1]
        if self.kernel_dt_supplier is not None:
            return self.kernel_dt_supplier(n)
        return None


def _feedback_kernel(
    order: int,
    series_kernel,
    control: Callable[[float], float],
    feedback: Callable[[float, float], float],
) -> Kernel:
    if isinstance(series_kernel, SeparableSeriesKernel):
        prefactor = series_kernel.prefactor
        coord = series_kernel.factor

        def phi(t: float, s: float, y: float) -> float:
            return coord(t, s) * (control(s) - feedback(s, y))

        def fn(t: float, s: Sequence[float], x: Sequence[float]) -> float:
            out = prefactor(t)
            for k in range(order):
                out *= phi(t, s[k], x[k])
            return out

        sep = SeparableForm(
            prefactor=prefactor,
            factor=phi,
            factor_depends_on_t=series_kernel.factor_depends_on_t,
        )
        return Kernel(order=order, fn=fn, separable=sep)

    def fn(t: float, s: Sequence[float], x: Sequence[float]) -> float:
        out = series_kernel(t, tuple(s))
        for k in range(order):
            out *= control(s[k]) - feedback(s[k], x[k])
        return out

    return Kernel(order=order, fn=fn)


def build_feedback_problem(
    series_kernels: Sequence[tuple[int, Callable[..., float] | SeparableSeriesKernel]],
    control: Callable[[float], float],
    feedback: Callable[[float, float], float],
    forcing: Callable[[float], float],
    horizon: float,
    forcing_dt_bound: float = 0.0,
    bounds: dict[int, KernelBounds] | None = None,
) -> SecondKindProblem:
    """Close a series model under output feedback.

    The open-loop model maps an input to an output through multi-linear
    series kernels K_n; the input is the control minus a feedback function
    of the output.  Substituting produces a second-kind problem for the
    output whose order-n kernel is

        K_n(t, s_1..s_n) * prod_k (control(s_k) - feedback(s_k, y_k)).

    Series kernels given as SeparableSeriesKernel keep a SeparableForm on
    the result; bare callables take (t, s_tuple) and stay generic.
    """
    seen: dict[int, Kernel] = {}
    for order, series_kernel in series_kernels:
        if order in seen:
            raise ValueError(f"duplicate series kernel order {order}")
        kernel = _feedback_kernel(order, series_kernel, control, feedback)
        if bounds and order in bounds:
            kernel = Kernel(
                order=kernel.order,
                fn=kernel.fn,
                separable=kernel.separable,
                bounds=bounds[order],
            )
        seen[order] = kernel
    family = FiniteFamily(tuple(seen[n] for n in sorted(seen)))
    return SecondKindProblem(
        forcing=forcing,
        horizon=horizon,
        kernels=family,
        forcing_dt_bound=forcing_dt_bound,
    )
