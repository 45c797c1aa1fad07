"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from contrastvae.numerics.tensor import ComputationTape, Tensor, no_grad


@dataclass
class CoordinateResult:
    param: str
    index: tuple[int, ...]
    autodiff: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    passed: bool
    rel_tol: float
    n_checked: int
    worst: CoordinateResult | None
    failures: list[CoordinateResult] = field(default_factory=list)
    suspect_ops: list[str] = field(default_factory=list)
    # coordinates whose +-step probe crossed a relu/clamp breakpoint and that
    # agree once re-probed with a step that stays on one piece
    kinks: list[CoordinateResult] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"{status}: {self.n_checked} coordinates, rel_tol={self.rel_tol:g}"
        if self.worst is not None:
            w = self.worst
            line += f"; worst {w.param}{list(w.index)} autodiff={w.autodiff:.6g} numeric={w.numeric:.6g} rel_err={w.rel_err:.3g}"
        if self.kinks:
            line += f"; {len(self.kinks)} straddled a piecewise breakpoint and were re-verified with a smaller step"
        if self.suspect_ops:
            line += f"; suspect ops: {', '.join(self.suspect_ops)}"
        return line


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(n))


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    rel_tol: float = 1e-4,
    step: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    kink_step: float | None = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must be deterministic (any noise drawn from a freshly seeded
    generator on every call). Parameters should be float64. With
    ``max_coords`` set, that many coordinates per parameter are sampled;
    otherwise every coordinate is probed. On failure the recorded tape is
    re-checked op by op to name the culprit.

    Central differences are meaningless where ``[x - step, x + step]``
    contains a relu or clamp breakpoint. A failing coordinate is moved to
    ``kinks`` only if the piecewise regimes recorded on the tape differ
    between ``x - step`` and ``x + step`` and the coordinate then agrees at
    ``kink_step`` with no breakpoint inside that smaller interval.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    tape = loss.backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}

    results: list[CoordinateResult] = []
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for c in coords:
                orig = flat[c]
                flat[c] = orig + step
                up = loss_fn().item()
                flat[c] = orig - step
                down = loss_fn().item()
                flat[c] = orig
                numeric = (up - down) / (2 * step)
                a = float(analytic[name].reshape(-1)[c])
                idx = tuple(int(i) for i in np.unravel_index(c, p.shape))
                results.append(CoordinateResult(name, idx, a, numeric, _rel_err(a, numeric)))

    failures = [r for r in results if r.rel_err > rel_tol]
    kinks = []
    if kink_step is not None and failures:
        kinks = [r for r in failures if _straddles_kink(loss_fn, params, r, step, kink_step, rel_tol)]
        failures = [r for r in failures if r not in kinks]
    scored = [r for r in results if r not in kinks]
    worst = max(scored, key=lambda r: r.rel_err) if scored else None
    report = GradCheckReport(not failures, rel_tol, len(results), worst, failures, kinks=kinks)
    if failures:
        report.suspect_ops = check_tape_ops(tape, rel_tol=rel_tol, seed=seed)
    return report


def regimes(loss_fn: Callable[[], Tensor]) -> np.ndarray:
    """Concatenated piecewise-op regimes of one forward pass, in tape order."""
    tape = ComputationTape.trace(loss_fn())
    parts = [r.reshape(-1) for t in tape.outputs if (r := t._node.fn.regime()) is not None]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def _straddles_kink(loss_fn, params, r: CoordinateResult, step: float, small: float, rel_tol: float) -> bool:
    flat = params[r.param].data.reshape(-1)
    c = int(np.ravel_multi_index(r.index, params[r.param].shape)) if r.index else 0
    orig = flat[c]

    def at(delta):
        flat[c] = orig + delta
        try:
            return regimes(loss_fn)
        finally:
            flat[c] = orig

    if np.array_equal(at(step), at(-step)):
        return False
    if not (np.array_equal(at(small), at(-small)) and np.array_equal(at(small), at(0.0))):
        return False
    with no_grad():
        flat[c] = orig + small
        up = loss_fn().item()
        flat[c] = orig - small
        down = loss_fn().item()
        flat[c] = orig
    return _rel_err(r.autodiff, (up - down) / (2 * small)) <= rel_tol


def check_tape_ops(
    tape: ComputationTape,
    rel_tol: float = 1e-4,
    step: float = 1e-6,
    per_op: int = 4,
    seed: int = 0,
) -> list[str]:
    """Vector-Jacobian check of each recorded op on its recorded inputs.

    Each op is re-run in float64 with random cotangent ``u`` and direction
    ``v``; ``<backward(u), v>`` must match the directional difference of
    ``<forward(x), u>``. Returns names of ops that fail.
    """
    rng = np.random.default_rng(seed)
    seen: dict[str, int] = {}
    bad: set[str] = set()
    for out in tape.outputs:
        node = out._node
        fn = node.fn
        if seen.get(fn.name, 0) >= per_op or fn.name in bad:
            continue
        seen[fn.name] = seen.get(fn.name, 0) + 1
        xs = [inp.data.astype(np.float64) for inp in node.inputs]
        probe = type(fn)(**fn.kw)
        y = probe.forward(*xs)
        u = rng.standard_normal(np.shape(y))
        grads = probe.backward(u)
        for i, inp in enumerate(node.inputs):
            if not inp.requires_grad or grads[i] is None:
                continue
            v = rng.standard_normal(xs[i].shape)
            plus = [x.copy() for x in xs]
            minus = [x.copy() for x in xs]
            plus[i] = plus[i] + step * v
            minus[i] = minus[i] - step * v
            fp = np.sum(type(fn)(**fn.kw).forward(*plus) * u)
            fm = np.sum(type(fn)(**fn.kw).forward(*minus) * u)
            numeric = (fp - fm) / (2 * step)
            a = float(np.sum(grads[i] * v))
            if _rel_err(a, numeric) > rel_tol:
                bad.add(fn.name)
    return sorted(bad)
