"""Central finite-difference verification of analytic gradients.

The check runs on a float64 copy of the graph. Each perturbation only
re-runs the nodes from the owning node onward, replaying cached upstream
activations and Dropout masks, so every parameter entry can be differenced
on the small presets in seconds.

By default ReLU masks and max-pool winners are pinned to the reference
forward while differencing. That is the function whose derivative backward
computes, and it has no kinks, so a deep ReLU net can be checked at a
fixed step. ``freeze_switches=False`` differences the live network instead
and retries entries that straddle a kink with a much smaller step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .layers import LayerGraph, Mode
from .tensor import make_rng
from .train import cross_entropy

PARAM_BUDGET = 10_000
STEP = 1e-3
# retried step when the +/- evaluations straddle a ReLU kink or max-pool switch
FALLBACK_STEP = 1e-6
# denominator floor: gradients below this are compared in absolute terms
ABS_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_entries: int = 0
    n_fallback: int = 0
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def format(self) -> str:
        lines = [f"{name:50s} {err:.3e} {'ok' if err <= self.tolerance else 'FAIL'}"
                 for name, err in self.max_rel_error.items()]
        lines.append(f"entries={self.n_entries} fallback={self.n_fallback} "
                     f"skipped={self.n_skipped} worst={self.worst:.3e} "
                     f"{'PASS' if self.passed else 'FAIL'} at {self.tolerance:g}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _loss_fn(graph: LayerGraph, labels):
    if graph.nodes[-1].layer.kind == "Softmax":
        return lambda out: cross_entropy(out, labels)[0], True
    # non-softmax outputs: a fixed linear probe <out, labels>
    return lambda out: float((out * labels).sum()), False


def _pattern(cache, ids):
    pats = []
    for node_id in ids:
        c = cache.layer_caches.get(node_id)
        if c is None:
            continue
        pats.append(c[1] if isinstance(c, tuple) else c)
    return pats


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(graph: LayerGraph, batch, labels, tolerance: float = 1e-3, *,
                   step: float = STEP, seed: int = 0, freeze_switches: bool = True,
                   only=None) -> GradCheckReport:
    """Compare backward() against central differences for every trainable entry.

    Softmax-terminated graphs are scored with cross-entropy against one-hot
    ``labels``; other graphs with the probe loss ``sum(output * labels)``.
    ``only`` restricts the check to the named parameters.
    """
    n_params = graph.count_params()
    if n_params > PARAM_BUDGET:
        raise ConfigError(f"gradient check budget is {PARAM_BUDGET} parameters, graph has "
                          f"{n_params}")
    g = graph.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    loss_of, fused = _loss_fn(g, labels)

    out, ref = g.forward(x, Mode.TRAIN, make_rng(seed), update_stats=False)
    if fused:
        _, dlogits = cross_entropy(out, labels)
        analytic = g.backward(ref, dlogits, wrt_logits=True)
    else:
        analytic = g.backward(ref, labels, wrt_logits=False)

    params = g.named_params()
    owner = {f"{n.id}.{slot}": i for i, n in enumerate(g.nodes) for slot in n.layer.params}
    kinked = [n.id for n in g.nodes if n.layer.kind in ("ReLU", "MaxPool2D")]
    report = GradCheckReport(tolerance)

    def run(start):
        o, c = g.forward(x, Mode.TRAIN, None, update_stats=False, reuse=ref, start=start,
                         freeze_switches=freeze_switches)
        return loss_of(o), c

    if only is not None:
        only = list(only)
        missing = [n for n in only if n not in analytic]
        if missing:
            raise ConfigError(f"not trainable parameters of this graph: {missing}")
        analytic = {n: analytic[n] for n in only}
    for name, grad in analytic.items():
        p = params[name]
        start = owner[name]
        ids = [] if freeze_switches else [i for i in kinked if g._index[i] >= start]
        flat = p.reshape(-1)
        numeric = np.empty(flat.size)
        valid = np.ones(flat.size, dtype=bool)
        for i in range(flat.size):
            orig = flat[i]
            for h in (step, FALLBACK_STEP):
                flat[i] = orig + h
                lp, cp = run(start)
                flat[i] = orig - h
                lm, cm = run(start)
                flat[i] = orig
                numeric[i] = (lp - lm) / (2 * h)
                if _same(_pattern(cp, ids), _pattern(cm, ids)):
                    break
                if h == step:
                    report.n_fallback += 1
            else:
                valid[i] = False
                report.n_skipped += 1
        err = relative_error(grad.reshape(-1), numeric)[valid]
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.n_entries += flat.size
    return report
