"""
Finite-difference verification of tape gradients.
"""
import logging
from typing import Callable, Mapping, Optional

import numpy as np

from d2hnet.api.models import GradCheckEntry, GradCheckReport
from d2hnet.core.tensor import GradNode

logger = logging.getLogger(__name__)

GraphFn = Callable[[Mapping[str, GradNode]], GradNode]


def _scalarize(out: GradNode, projection: np.ndarray) -> float:
    return float(np.sum(out.value * projection))


def gradient_check(
    fn: GraphFn,
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-6,
    tol: float = 1e-4,
    op: str = "graph",
    tolerances: Optional[Mapping[str, float]] = None,
    rng: Optional[np.random.Generator] = None,
    max_probes: Optional[int] = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` with central differences.

    Non-scalar outputs are reduced to a scalar with a fixed random
    projection. Relative error per input is
    ``max|g_tape - g_fd| / max(max|g_fd|, max|g_tape|, 1e-12)``. A probed
    coordinate where the forward and backward one-sided differences
    disagree by more than 10x the tolerance is counted as a kink; the
    entry fails if any kink is found so that non-differentiable points
    are reported rather than silently passed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    tolerances = tolerances or {}
    for name, value in inputs.items():
        if value.dtype != np.float64:
            raise ValueError(f"gradient_check needs double precision, '{name}' is {value.dtype}")

    leaves = {k: GradNode.leaf(v.copy(), name=k) for k, v in inputs.items()}
    out = fn(leaves)
    projection = rng.standard_normal(out.shape)
    loss = GradNode(
        np.asarray(_scalarize(out, projection)),
        (out,),
        lambda g: (g * projection,),
    )
    loss.backward()

    entries = []
    for name, base in inputs.items():
        tape = leaves[name].grad
        if tape is None:
            tape = np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            coords = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        entry_tol = tolerances.get(name, tol)
        kinks = 0

        def evaluate(perturbed: np.ndarray) -> float:
            trial = {k: GradNode.leaf(v, requires_grad=False) for k, v in inputs.items()}
            trial[name] = GradNode.leaf(perturbed.reshape(base.shape), requires_grad=False)
            return _scalarize(fn(trial), projection)

        f0 = None
        for idx in coords:
            plus = flat.copy()
            minus = flat.copy()
            plus[idx] += h
            minus[idx] -= h
            fp, fm = evaluate(plus), evaluate(minus)
            central = (fp - fm) / (2 * h)
            numeric.reshape(-1)[idx] = central
            if f0 is None:
                f0 = evaluate(flat.copy())
            forward = (fp - f0) / h
            backward = (f0 - fm) / h
            scale = max(abs(forward), abs(backward), 1e-8)
            if abs(forward - backward) / scale > 10 * entry_tol and abs(forward - backward) > 1e-6:
                kinks += 1

        probed_tape = tape.reshape(-1)[coords]
        probed_fd = numeric.reshape(-1)[coords]
        abs_err = float(np.max(np.abs(probed_tape - probed_fd))) if coords.size else 0.0
        denom = max(float(np.max(np.abs(probed_fd), initial=0.0)),
                    float(np.max(np.abs(probed_tape), initial=0.0)), 1e-12)
        rel_err = abs_err / denom
        passed = rel_err < entry_tol and kinks == 0
        if kinks:
            logger.warning(f"{op}: {kinks} non-differentiable point(s) probed in '{name}'")
        entries.append(GradCheckEntry(
            name=name, max_rel_error=rel_err, max_abs_error=abs_err, kinks=kinks, passed=passed,
        ))
        logger.debug(f"{op}/{name}: rel err {rel_err:.3e}, kinks {kinks}")

    return GradCheckReport(op=op, h=h, tol=tol, entries=entries)
