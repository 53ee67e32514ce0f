"""Analytic reverse-mode gradients for the budgeted layer and full model.

Everything is hand-derived against the forward code in ``layer.py`` and
``model.py``; no autograd framework is involved.  Key Jacobians:

* softmax:          ds = w * (dw - <dw, w>)
* RMS rescale:      z = a * c(n), c = sqrt(K)/(n + eps), n = ||a||
                    da = c * dz - sqrt(K) * <dz, a> * a / (n * (n + eps)^2)
* GELU:             d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
* causal conv bank: adjoint is causal correlation with the same filters

Budget masking: at runtime budget K, rows k >= K of ``mixing``,
``gate.w_out`` and ``gate.b_out`` are untouched by the forward pass, and
the gradient arrays here are allocated as zeros with only the first K rows
written, so inactive rows come back bitwise zero (not merely tiny).

The gradient set is a plain dict mapping declaration-order parameter names
to arrays of matching shape, with every parameter present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, StructuralError
from .layer import LayerCache, gelu_grad
from .linalg import fft_causal_conv_bank_adjoint
from .model import ModelCache, flatten_params, model_forward, param_order

__all__ = [
    "GradCheckReport",
    "finite_diff_check",
    "layer_backward",
    "mean_squared_error",
    "model_backward",
    "norm_backward",
    "softmax_cross_entropy",
]


# ---------------------------------------------------------------------------
# losses (value + gradient in one pass)
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood over (optionally masked) positions.

    ``logits``: (..., V); ``targets``: integer (...,); ``mask``: optional
    boolean (...,) — False positions contribute nothing and receive zero
    gradient.  Returns (loss, dlogits).
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise StructuralError(
            f"targets shape {targets.shape} does not match logits "
            f"{logits.shape[:-1]}"
        )
    peak = logits.max(axis=-1, keepdims=True)
    shifted = logits - peak
    logz = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    logp = shifted - logz
    probs = np.exp(logp)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    onehot_grad = probs.copy()
    np.put_along_axis(
        onehot_grad,
        targets[..., None],
        np.take_along_axis(onehot_grad, targets[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != targets.shape:
            raise StructuralError(
                f"mask shape {mask.shape} does not match targets {targets.shape}"
            )
        count = int(mask.sum())
        if count == 0:
            raise StructuralError("loss mask excludes every position")
        loss = float(np.sum(nll * mask) / count)
        dlogits = onehot_grad * (mask[..., None] / count)
    else:
        count = nll.size
        loss = float(nll.mean())
        dlogits = onehot_grad / count
    return loss, dlogits


def mean_squared_error(pred, target, mask=None):
    """Mean of squared residuals over (optionally masked) elements.

    ``mask`` is per position (pred shape without the channel axis); the
    average runs over unmasked elements.  Returns (loss, dpred).
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise StructuralError(
            f"target shape {target.shape} does not match predictions {pred.shape}"
        )
    resid = pred - target
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape[:-1]:
            raise StructuralError(
                f"mask shape {mask.shape} does not match positions "
                f"{pred.shape[:-1]}"
            )
        count = int(mask.sum()) * pred.shape[-1]
        if count == 0:
            raise StructuralError("loss mask excludes every position")
        loss = float(np.sum(resid * resid * mask[..., None]) / count)
        dpred = resid * (2.0 * mask[..., None] / count)
    else:
        loss = float(np.mean(resid * resid))
        dpred = resid * (2.0 / resid.size)
    return loss, dpred


# ---------------------------------------------------------------------------
# layer backward
# ---------------------------------------------------------------------------


def _softmax_vjp(w, dw):
    """ds for s -> w = softmax(s): w * (dw - sum_j dw_j w_j)."""
    inner = np.sum(dw * w, axis=-1, keepdims=True)
    return w * (dw - inner)


def _rms_rescale_vjp(a, n, eps, dz):
    """da for a -> z = a * sqrt(K)/(||a|| + eps), given n = ||a|| (..., 1)."""
    k = a.shape[-1]
    root_k = math.sqrt(k)
    c = root_k / (n + eps)
    inner = np.sum(dz * a, axis=-1, keepdims=True)
    n_safe = np.where(n > 0.0, n, 1.0)
    correction = np.where(
        n > 0.0, root_k * inner / (n_safe * (n + eps) ** 2), 0.0
    )
    return c * dz - correction * a


def layer_backward(dout, cache: LayerCache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of one layer; returns (dinput, grads).

    ``grads`` holds mixing/skip/gate.w_in/gate.b_in/gate.w_out/gate.b_out.
    In masked mode (and with the gate disabled), rows >= budget of mixing,
    gate.w_out, gate.b_out are bitwise zero.  Direct-mode truncation routes
    gradient through the full-capacity softmax, so every gate row is live
    there (mixing rows >= budget stay zero: the forward never reads them).
    """
    p = cache.params
    budget = cache.budget
    dout = np.asarray(dout)
    if cache.squeeze and dout.ndim == 2:
        dout = dout[None]
    if dout.shape != cache.u.shape:
        raise StructuralError(
            f"upstream gradient shape {dout.shape} does not match layer "
            f"output {cache.u.shape}"
        )

    grads: dict[str, np.ndarray] = {
        "mixing": np.zeros_like(p.mixing),
        "skip": np.zeros_like(p.skip),
        "gate.w_in": np.zeros_like(p.gate.w_in),
        "gate.b_in": np.zeros_like(p.gate.b_in),
        "gate.w_out": np.zeros_like(p.gate.w_out),
        "gate.b_out": np.zeros_like(p.gate.b_out),
    }

    # out = u @ skip.T + einsum("bklf,kef->ble", features * w, mixing[:K])
    grads["skip"][...] = np.einsum("ble,blf->ef", dout, cache.u)
    du = dout @ p.skip

    weights_t = np.swapaxes(cache.weights, 1, 2)[..., None]  # (B, K, L, 1)
    weighted = cache.features * weights_t
    grads["mixing"][:budget] = np.einsum("ble,bklf->kef", dout, weighted)

    dweighted = np.einsum("ble,kef->bklf", dout, p.mixing[:budget])
    dfeatures = dweighted * weights_t
    du += fft_causal_conv_bank_adjoint(
        cache.basis.scaled_filters[:budget], dfeatures
    )

    if cache.gate_enabled:
        # (B, K, L) -> (B, L, K) gradient wrt the mixture weights
        dweights = np.swapaxes(
            np.einsum("bklf,bklf->bkl", dweighted, cache.features), 1, 2
        )
        if cache.truncation == "masked":
            dscaled = _softmax_vjp(cache.weights, dweights)
            active = cache.logits[..., :budget]
            dactive = _rms_rescale_vjp(
                active, cache.active_norm, p.gate.eps, dscaled
            )
            # scatter into full-capacity logit gradient; rows >= K stay 0.0
            dlogits = np.zeros_like(cache.logits)
            dlogits[..., :budget] = dactive
            grads["gate.w_out"][:budget] = np.einsum(
                "blk,blh->kh", dactive, cache.hidden
            )
            grads["gate.b_out"][:budget] = dactive.sum(axis=(0, 1))
        else:  # direct: full-capacity softmax, prefix dropped without renorm
            dfull = np.zeros_like(cache.weights_full)
            dfull[..., :budget] = dweights
            dsoft = _softmax_vjp(cache.weights_full, dfull)
            dlogits = _rms_rescale_vjp(
                cache.logits, cache.active_norm, p.gate.eps, dsoft
            )
            grads["gate.w_out"][...] = np.einsum(
                "blk,blh->kh", dlogits, cache.hidden
            )
            grads["gate.b_out"][...] = dlogits.sum(axis=(0, 1))

        dhidden = dlogits @ p.gate.w_out
        dpre = dhidden * gelu_grad(cache.pre)
        grads["gate.w_in"][...] = np.einsum("blh,bld->hd", dpre, cache.u)
        grads["gate.b_in"][...] = dpre.sum(axis=(0, 1))
        du += dpre @ p.gate.w_in

    return du, grads


# ---------------------------------------------------------------------------
# normalization backward
# ---------------------------------------------------------------------------


def norm_backward(dout, ncache: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dgain, dbias) for either normalization kind."""
    if ncache["kind"] == "layernorm":
        xhat, inv_std, gain = ncache["xhat"], ncache["inv_std"], ncache["gain"]
        dgain = np.sum(dout * xhat, axis=tuple(range(dout.ndim - 1)))
        dbias = np.sum(dout, axis=tuple(range(dout.ndim - 1)))
        dxhat = dout * gain
        mean_d = dxhat.mean(axis=-1, keepdims=True)
        mean_dx = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = inv_std * (dxhat - mean_d - xhat * mean_dx)
        return dx, dgain, dbias
    if ncache["kind"] == "rmsnorm":
        x, inv_rms, gain = ncache["x"], ncache["inv_rms"], ncache["gain"]
        width = x.shape[-1]
        dgain = np.sum(dout * x * inv_rms, axis=tuple(range(dout.ndim - 1)))
        dbias = np.sum(dout, axis=tuple(range(dout.ndim - 1)))
        h = dout * gain
        inner = np.sum(h * x, axis=-1, keepdims=True)
        dx = inv_rms * h - (inv_rms**3 / width) * x * inner
        return dx, dgain, dbias
    raise StructuralError(f"unknown norm kind {ncache['kind']!r}")


# ---------------------------------------------------------------------------
# full model backward
# ---------------------------------------------------------------------------


def model_backward(dout, cache: ModelCache) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss wrt every parameter, as {name: array}.

    ``dout`` is the loss gradient at the model output, shaped like the
    forward result ((B, L, out) per-step, (B, out) mean-pool; leading axis
    optional when the forward squeezed).
    """
    config = cache.config
    params = cache.params
    dout = np.asarray(dout)
    if cache.squeeze:
        dout = dout[None] if dout.ndim == (1 if config.head == "mean-pool" else 2) else dout

    grads: dict[str, np.ndarray] = {
        name: np.zeros(shape, dtype=np.dtype(config.precision))
        for name, shape in param_order(config)
    }

    feats = cache.features
    if config.head == "per-step":
        if dout.shape != feats.shape[:2] + (config.out_dim,):
            raise StructuralError(
                f"output gradient shape {dout.shape} does not match "
                f"{feats.shape[:2] + (config.out_dim,)}"
            )
        grads["readout.w"][...] = np.einsum("blo,bld->od", dout, feats)
        grads["readout.b"][...] = dout.sum(axis=(0, 1))
        dfeat = dout @ params.readout_w
    else:
        pooled = feats.mean(axis=1)
        if dout.shape != (feats.shape[0], config.out_dim):
            raise StructuralError(
                f"output gradient shape {dout.shape} does not match "
                f"{(feats.shape[0], config.out_dim)}"
            )
        grads["readout.w"][...] = np.einsum("bo,bd->od", dout, pooled)
        grads["readout.b"][...] = dout.sum(axis=0)
        dpooled = dout @ params.readout_w
        dfeat = np.broadcast_to(
            dpooled[:, None, :] / feats.shape[1], feats.shape
        ).copy()

    dx, dgain, dbias = norm_backward(dfeat, cache.final_cache)
    grads["final.gain"][...] = dgain
    grads["final.bias"][...] = dbias

    for i in reversed(range(config.depth)):
        dlayer_out = dx  # residual: x_{i+1} = x_i + layer(norm(x_i))
        dnormed, layer_grads = layer_backward(dlayer_out, cache.layer_caches[i])
        dx_norm, dgain, dbias = norm_backward(dnormed, cache.norm_caches[i])
        grads[f"block{i}.norm.gain"][...] = dgain
        grads[f"block{i}.norm.bias"][...] = dbias
        for key, value in layer_grads.items():
            grads[f"block{i}.{key}"][...] = value
        dx = dx + dx_norm

    if config.input_kind == "tokens":
        flat_ids = cache.inputs.reshape(-1)
        np.add.at(
            grads["embed.table"], flat_ids, dx.reshape(-1, config.width)
        )
    else:
        grads["embed.w"][...] = np.einsum("bld,bli->di", dx, cache.inputs)
        grads["embed.b"][...] = dx.sum(axis=(0, 1))
    return grads


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    n_coords: int
    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: {self.n_coords} coordinates, "
            f"max relative error {self.max_rel_err:.3e} at "
            f"{self.worst_param}{list(self.worst_index)} "
            f"(tolerance {self.tolerance:.1e})"
        )


def finite_diff_check(
    loss_fn,
    params,
    config,
    n_coords: int = 200,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params) -> (loss, grads)`` must be deterministic.  Coordinates
    are sampled so every parameter tensor is probed at least once, with the
    remainder spread proportionally to tensor size.  Relative error uses a
    denominator floor of 1e-6.  Requires float64 parameters — anything
    coarser cannot support h=1e-5 central differences.
    """
    flat = flatten_params(params, config)
    for name, arr in flat:
        if arr.dtype != np.float64:
            raise NumericError(
                f"finite differences need float64 parameters; {name} is "
                f"{arr.dtype}"
            )
    if n_coords < len(flat):
        raise StructuralError(
            f"{n_coords} coordinates cannot span {len(flat)} tensors"
        )
    rng = np.random.default_rng(seed)
    coords: list[tuple[int, tuple[int, ...]]] = []
    for ti, (_, arr) in enumerate(flat):
        idx = np.unravel_index(int(rng.integers(arr.size)), arr.shape)
        coords.append((ti, idx))
    sizes = np.array([arr.size for _, arr in flat], dtype=np.float64)
    probs = sizes / sizes.sum()
    extra = rng.choice(len(flat), size=n_coords - len(flat), p=probs)
    for ti in extra:
        arr = flat[ti][1]
        idx = np.unravel_index(int(rng.integers(arr.size)), arr.shape)
        coords.append((int(ti), idx))

    _, analytic = loss_fn(params)
    max_rel = -1.0
    worst = (flat[0][0], coords[0][1])
    for ti, idx in coords:
        name, arr = flat[ti]
        original = arr[idx]
        arr[idx] = original + step
        loss_plus, _ = loss_fn(params)
        arr[idx] = original - step
        loss_minus, _ = loss_fn(params)
        arr[idx] = original
        fd = (loss_plus - loss_minus) / (2.0 * step)
        an = float(analytic[name][idx])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        if rel > max_rel:
            max_rel = rel
            worst = (name, idx)
    return GradCheckReport(
        n_coords=len(coords),
        max_rel_err=float(max_rel),
        worst_param=worst[0],
        worst_index=tuple(int(i) for i in worst[1]),
        tolerance=tolerance,
        passed=bool(max_rel <= tolerance),
    )


def model_loss_fn(inputs, targets, config, basis, budget, mask=None, **forward_kwargs):
    """Build a deterministic ``loss_fn(params)`` for gradcheck/training.

    Dispatches on config.loss is not done here — the loss kind is an
    explicit argument of the trainer; this helper picks cross-entropy for
    integer targets and mean squared error otherwise, which matches every
    task in the suite.
    """
    targets = np.asarray(targets)
    use_ce = np.issubdtype(targets.dtype, np.integer)

    def loss_fn(params):
        out, cache = model_forward(
            inputs, params, config, basis, budget, **forward_kwargs
        )
        if cache.squeeze:
            out = out[None]
        if use_ce:
            tgt = targets if targets.ndim == out.ndim - 1 else targets[None]
            msk = None if mask is None else (
                mask if np.asarray(mask).ndim == tgt.ndim else np.asarray(mask)[None]
            )
            loss, dout = softmax_cross_entropy(out, tgt, msk)
        else:
            tgt = targets if targets.ndim == out.ndim else targets[None]
            msk = None if mask is None else (
                mask if np.asarray(mask).ndim == out.ndim - 1 else np.asarray(mask)[None]
            )
            loss, dout = mean_squared_error(out, tgt, msk)
        grads = model_backward(dout, cache)
        return loss, grads

    return loss_fn
