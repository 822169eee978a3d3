"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from headpose import posenet

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
# Denominator floor: coordinates whose true gradient is ~0 are compared absolutely.
_FLOOR = 1e-6


def relative_error(analytic, numeric):
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), _FLOOR)


def numerical_gradient(f, x: np.ndarray, indices, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.flat[i]`` for each i, perturbing ``x`` in place."""
    flat = x.reshape(-1)
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * step)
    return out


def sample_indices(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if size <= count:
        return np.arange(size)
    return np.sort(rng.choice(size, size=count, replace=False))


@dataclass
class LayerCheck:
    name: str
    coordinates: int
    max_rel_error: float
    passed: bool
    skipped_kinks: int = 0


@dataclass
class GradCheckReport:
    layers: list[LayerCheck] = field(default_factory=list)
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(l.passed for l in self.layers)

    @property
    def failed_layers(self) -> list[str]:
        return [l.name for l in self.layers if not l.passed]

    def format(self) -> str:
        lines = [f"{l.name:8s} coords={l.coordinates:4d} kinks_skipped={l.skipped_kinks:3d} "
                 f"max_rel_err={l.max_rel_error:.3e} {'ok' if l.passed else 'FAIL'}" for l in self.layers]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def sum_of_squares_loss(pred):
    return float(np.sum(pred * pred)), 2.0 * pred


def _pool_signature(cache, plan) -> bytes:
    return b"".join(c.tobytes() for c, s in zip(cache, plan) if s.kind == "pool")


def grad_check(
    params: posenet.NetworkParams,
    loss,
    inputs: np.ndarray,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    coords_per_layer: int = 200,
    seed: int = 0,
    backward=posenet.backward,
) -> GradCheckReport:
    """Compare backprop gradients against central differences, layer by layer.

    ``loss(pred) -> (value, d_pred)`` is applied to the network output for the
    whole ``inputs`` batch. Parameters are converted to float64 first. Up to
    ``coords_per_layer`` coordinates, drawn across weights and bias, are tested
    per layer. ``backward`` can be swapped out for fault injection.

    Max pooling is not differentiable where two window entries tie. A
    coordinate whose +/-step perturbation changes any pooling winner straddles
    such a kink; its difference quotient is meaningless, so it is skipped and
    another coordinate drawn in its place. Failures are reported, not raised.
    """
    p = params.astype(np.float64)
    x = np.asarray(inputs, dtype=np.float64)
    rng = np.random.default_rng(seed)

    out, cache = posenet.forward_training(p, x)
    _, d_out = loss(out)
    base_sig = _pool_signature(cache, p.plan)
    grads = backward(p, cache, d_out)

    def evaluate():
        o, c = posenet.forward_training(p, x)
        return loss(o)[0], _pool_signature(c, p.plan) == base_sig

    report = GradCheckReport(tolerance=tolerance)
    for layer, (gw, gb) in zip(p.layers, grads):
        n_w = layer.weights.size
        flat_w, flat_b = layer.weights.reshape(-1), layer.bias.reshape(-1)
        analytic = np.concatenate([gw.reshape(-1), gb.reshape(-1)])
        errors, skipped = [], 0
        for idx in rng.permutation(n_w + layer.bias.size):
            if len(errors) >= coords_per_layer:
                break
            arr, i = (flat_w, idx) if idx < n_w else (flat_b, idx - n_w)
            orig = arr[i]
            arr[i] = orig + step
            fp, ok_p = evaluate()
            arr[i] = orig - step
            fm, ok_m = evaluate()
            arr[i] = orig
            if not (ok_p and ok_m):
                skipped += 1
                continue
            numeric = (fp - fm) / (2.0 * step)
            errors.append(float(relative_error(analytic[idx], numeric)))
        err = max(errors) if errors else 0.0
        report.layers.append(LayerCheck(layer.name, len(errors), err, err < tolerance, skipped))
    return report
