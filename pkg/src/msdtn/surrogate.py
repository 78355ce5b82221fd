"""Per-component surrogate networks for the coarse DtN maps.

Each output component is a small fully connected network with squared
ReLU activations sigma(z) = max(z, 0)^2 on the hidden layers and a linear
output.  Forward values, input gradients (exact forward-mode chain rule)
and parameter gradients of the three-term loss (reverse accumulation
through both the value and the input-gradient paths) are all hand-written
in numpy, which keeps the whole training pipeline deterministic for a
fixed seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem
from .dtn import LocalSolverConfig, dtn_coarse
from .mesh import CoarseBasis, FineMesh


class TrainingDivergence(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass
class SurrogateNet:
    """Scalar-valued network for one DtN output component."""

    input_dim: int
    widths: tuple
    weights: list
    biases: list
    component: int

    def __post_init__(self):
        dims = (self.input_dim,) + tuple(self.widths) + (1,)
        for k, w in enumerate(self.weights):
            if w.shape != (dims[k + 1], dims[k]):
                raise ValueError(
                    f"layer {k} weight shape {w.shape} does not chain with {dims}"
                )
            if self.biases[k].shape != (dims[k + 1],):
                raise ValueError(f"layer {k} bias shape mismatch")


@dataclass
class DtNSampleSet:
    """Sampled coarse DtN values and Jacobians used as the training corpus."""

    inputs: np.ndarray
    values: np.ndarray
    jacobians: np.ndarray
    provenance: dict

    def __post_init__(self):
        n, d = self.inputs.shape
        if self.values.shape != (n, d) or self.jacobians.shape != (n, d, d):
            raise ValueError("inconsistent sample set shapes")
        if not (
            np.isfinite(self.inputs).all()
            and np.isfinite(self.values).all()
            and np.isfinite(self.jacobians).all()
        ):
            raise ValueError("sample set contains non-finite entries")

    @property
    def n_samples(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def provenance_hash(self) -> str:
        return _provenance_hash(self.provenance)

    def to_csv(self, path: str) -> None:
        d = self.dim
        cols = (
            [f"u_{k + 1}" for k in range(d)]
            + [f"f_{k + 1}" for k in range(d)]
            + [f"J_{r + 1}{c + 1}" for r in range(d) for c in range(d)]
        )
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for s in range(self.n_samples):
                row = (
                    list(self.inputs[s])
                    + list(self.values[s])
                    + list(self.jacobians[s].ravel())
                )
                w.writerow([repr(float(x)) for x in row])
        with open(path + ".meta.json", "w") as f:
            json.dump(self.provenance, f, indent=2, sort_keys=True)

    @staticmethod
    def from_csv(path: str) -> "DtNSampleSet":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header = rows[0]
        d = sum(1 for c in header if c.startswith("u_"))
        data = np.array([[float(x) for x in row] for row in rows[1:]])
        try:
            with open(path + ".meta.json") as f:
                prov = json.load(f)
        except FileNotFoundError:
            prov = {}
        return DtNSampleSet(
            data[:, :d], data[:, d : 2 * d], data[:, 2 * d :].reshape(-1, d, d), prov
        )


@dataclass
class LossConfig:
    """Weights, monotonicity quadrature and optimizer settings."""

    c0: float = 1.0
    c1: float = 0.1
    c_mon: float = 0.0
    mon_variant: str = "full_sign"  # "full_sign" | "diagonal"
    mon_grid: int = 40              # per-axis midpoint cells (full_sign)
    mon_mc_points: int = 200        # points per step (diagonal, Monte Carlo)
    u_min: float = 0.0
    u_max: float = 4.0
    epochs: int = 20000
    learning_rate: float = 1e-3
    lr_min_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.c0, self.c1, self.c_mon) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.mon_variant not in ("full_sign", "diagonal"):
            raise ValueError("mon_variant must be 'full_sign' or 'diagonal'")
        if self.mon_grid < 1 or self.mon_mc_points < 1:
            raise ValueError("quadrature sizes must be positive")


def _provenance_hash(info: dict) -> str:
    blob = json.dumps(info, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sample_grid(
    d: int, m: int, u_min: float, u_max: float, with_centers: bool = False
) -> np.ndarray:
    """Tensor grid of m^d points, optionally plus the (m-1)^d cell centers."""
    if m < 2:
        raise ValueError("need at least 2 points per axis")
    axis = np.linspace(u_min, u_max, m)
    pts = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    if with_centers:
        centers_axis = 0.5 * (axis[:-1] + axis[1:])
        centers = np.stack(
            np.meshgrid(*([centers_axis] * d), indexing="ij"), axis=-1
        ).reshape(-1, d)
        pts = np.vstack([pts, centers])
    return pts


def generate_dataset(
    problem: fem.ProblemDef,
    mesh: FineMesh,
    basis: CoarseBasis,
    i: int,
    samples: np.ndarray,
    cfg: LocalSolverConfig | None = None,
    with_jacobians: bool = True,
) -> DtNSampleSet:
    """Exact coarse DtN values (and Jacobians) at the sampling vectors.

    Each sample is solved independently; consecutive solves reuse the
    previous interior state as a warm start.
    """
    cfg = cfg or LocalSolverConfig()
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    d = samples.shape[1]
    values = np.zeros_like(samples)
    jacs = np.zeros((len(samples), d, d))
    warm = None
    for s, v in enumerate(samples):
        try:
            result = dtn_coarse(
                problem, mesh, basis, i, v, cfg,
                want_jacobian=with_jacobians, warm_start=warm,
            )
        except Exception as exc:
            raise RuntimeError(f"DtN evaluation failed at sample {s}: {v!r}") from exc
        values[s] = result.flux
        if with_jacobians:
            jacs[s] = result.jacobian
        warm = result.interior_state
    provenance = dict(problem.provenance())
    provenance.update(
        {
            "subdomain": i,
            "cells_per_subdomain": mesh.cells_per_subdomain,
            "n_sub_per_axis": mesh.partition.n_sub_per_axis,
            "residual_tol": cfg.residual_tol,
            "u_min": float(samples.min()),
            "u_max": float(samples.max()),
            "n_samples": len(samples),
        }
    )
    return DtNSampleSet(samples, values, jacs, provenance)


def init_net(input_dim: int, widths, component: int, rng) -> SurrogateNet:
    """Uniform init scaled by fan-in."""
    dims = (input_dim,) + tuple(widths) + (1,)
    weights, biases = [], []
    for k in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[k])
        weights.append(rng.uniform(-bound, bound, size=(dims[k + 1], dims[k])))
        biases.append(rng.uniform(-bound, bound, size=dims[k + 1]))
    return SurrogateNet(input_dim, tuple(widths), weights, biases, component)


def _forward_cache(net: SurrogateNet, u: np.ndarray):
    """Forward pass storing activations and the forward-mode Jacobian chain.

    The per-layer Jacobians are kept in (width, n, d) layout so the heavy
    contractions are plain matrix products; the activation derivative is
    cached transposed because every Jacobian op consumes it that way.
    """
    n, d = u.shape
    n_hidden = len(net.widths)
    z_list, h_list, st_list, p_list, g_list = [], [u], [], [], []
    h = u
    for k in range(n_hidden):
        w, b = net.weights[k], net.biases[k]
        z = h @ w.T + b
        relu = np.maximum(z, 0.0)
        st = np.ascontiguousarray(2.0 * relu.T)
        h = relu * relu
        if k == 0:
            p_t = np.broadcast_to(w[:, None, :], (w.shape[0], n, d))
        else:
            p_t = (w @ g_list[-1].reshape(w.shape[1], n * d)).reshape(w.shape[0], n, d)
        g_t = st[:, :, None] * p_t
        z_list.append(z)
        st_list.append(st)
        h_list.append(h)
        p_list.append(p_t)
        g_list.append(g_t)
    w_out, b_out = net.weights[-1], net.biases[-1]
    y = (h @ w_out.T + b_out)[:, 0]
    grad = (w_out @ g_list[-1].reshape(net.widths[-1], n * d)).reshape(n, d)
    return y, grad, (z_list, h_list, st_list, p_list, g_list)


def forward(net: SurrogateNet, u: np.ndarray) -> float | np.ndarray:
    """Network value at u; a single vector gives a scalar, a batch a vector."""
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    y, _, _ = _forward_cache(net, np.atleast_2d(u))
    return float(y[0]) if single else y


def forward_with_input_jacobian(net: SurrogateNet, u: np.ndarray):
    """Value and gradient with respect to the inputs."""
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    y, grad, _ = _forward_cache(net, np.atleast_2d(u))
    if single:
        return float(y[0]), grad[0]
    return y, grad


def _pair_contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise dot over the trailing input axis: (w,n,d),(w,n,d) -> (w,n)."""
    out = a[:, :, 0] * b[:, :, 0]
    for j in range(1, a.shape[2]):
        out += a[:, :, j] * b[:, :, j]
    return out


def _backward(net: SurrogateNet, cache, y_bar: np.ndarray | None, g_bar: np.ndarray):
    """Parameter gradients given adjoints of the value and input gradient.

    ``y_bar is None`` skips the value-path seed (pure gradient penalties).
    """
    z_list, h_list, st_list, p_list, g_list = cache
    n, d = h_list[0].shape
    n_hidden = len(net.widths)
    grads_w = [np.zeros_like(w) for w in net.weights]
    grads_b = [np.zeros_like(b) for b in net.biases]

    w_out = net.weights[-1]
    h_bar = None
    if y_bar is not None:
        grads_w[-1] += y_bar[None, :] @ h_list[-1]
        grads_b[-1] += y_bar.sum(keepdims=True)
        h_bar = y_bar[:, None] * w_out

    g_bar_flat = g_bar.reshape(1, n * d)
    grads_w[-1] += g_bar_flat @ g_list[-1].reshape(net.widths[-1], n * d).T
    g_bar_t = (w_out.T @ g_bar_flat).reshape(net.widths[-1], n, d)

    for k in range(n_hidden - 1, -1, -1):
        st, z, p_t = st_list[k], z_list[k], p_list[k]
        p_bar_t = st[:, :, None] * g_bar_t
        s_bar_t = _pair_contract(g_bar_t, p_t)
        z_bar = 2.0 * (z > 0.0) * s_bar_t.T
        if h_bar is not None:
            z_bar += st.T * h_bar
        if k == 0:
            grads_w[0] += p_bar_t.sum(axis=1)
        else:
            wk = net.weights[k]
            width_prev = net.widths[k - 1]
            p_bar_flat = p_bar_t.reshape(net.widths[k], n * d)
            grads_w[k] += p_bar_flat @ g_list[k - 1].reshape(width_prev, n * d).T
            g_bar_t = (wk.T @ p_bar_flat).reshape(width_prev, n, d)
        grads_w[k] += z_bar.T @ h_list[k]
        grads_b[k] += z_bar.sum(axis=0)
        h_bar = z_bar @ net.weights[k]
    return grads_w, grads_b


def monotonicity_points(cfg: LossConfig, d: int, rng=None):
    """Quadrature points and weights for the monotonicity integral.

    The full-sign variant uses the fixed midpoint grid; the diagonal
    variant draws uniform points (resampled every optimization step when
    called from training).
    """
    span = cfg.u_max - cfg.u_min
    if cfg.mon_variant == "full_sign":
        axis = cfg.u_min + (np.arange(cfg.mon_grid) + 0.5) * span / cfg.mon_grid
        pts = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
        weights = np.full(len(pts), (span / cfg.mon_grid) ** d)
    else:
        rng = rng or np.random.default_rng(cfg.seed)
        pts = rng.uniform(cfg.u_min, cfg.u_max, size=(cfg.mon_mc_points, d))
        weights = np.full(len(pts), span**d / cfg.mon_mc_points)
    return pts, weights


def _loss_terms(net, inputs, targets, jac_rows, mon_pts, mon_wts, cfg):
    """Loss value and parameter gradients for one network."""
    n = len(inputs)
    y, g, cache = _forward_cache(net, inputs)
    l0 = float(np.mean((y - targets) ** 2))
    l1 = float(np.sum((g - jac_rows) ** 2) / n)
    y_bar = cfg.c0 * 2.0 * (y - targets) / n
    g_bar = cfg.c1 * 2.0 * (g - jac_rows) / n
    grads_w, grads_b = _backward(net, cache, y_bar, g_bar)

    lmon = 0.0
    if cfg.c_mon > 0 and len(mon_pts):
        _, gm, mcache = _forward_cache(net, mon_pts)
        l = net.component
        neg = np.minimum(gm[:, l], 0.0)
        integrand = neg**2
        gm_bar = np.zeros_like(gm)
        gm_bar[:, l] = 2.0 * mon_wts * neg
        if cfg.mon_variant == "full_sign":
            pos = np.maximum(gm, 0.0)
            pos[:, l] = 0.0
            integrand = integrand + (pos**2).sum(axis=1)
            gm_bar += 2.0 * mon_wts[:, None] * pos
        lmon = float(np.dot(mon_wts, integrand))
        mw, mb = _backward(net, mcache, None, cfg.c_mon * gm_bar)
        grads_w = [a + b for a, b in zip(grads_w, mw)]
        grads_b = [a + b for a, b in zip(grads_b, mb)]

    total = cfg.c0 * l0 + cfg.c1 * l1 + cfg.c_mon * lmon
    return total, grads_w, grads_b, (l0, l1, lmon)


def loss(net: SurrogateNet, dataset: DtNSampleSet, cfg: LossConfig, mon_points=None):
    """Three-term loss of one component net and its exact parameter gradient.

    Returns (value, (weight_grads, bias_grads)).  ``mon_points`` may pin the
    monotonicity quadrature; by default it is derived from the config
    (fixed grid, or one seeded Monte Carlo draw).
    """
    if net.input_dim != dataset.dim:
        raise ValueError("net input dimension does not match the dataset")
    if mon_points is None:
        mon_pts, mon_wts = monotonicity_points(cfg, dataset.dim)
    else:
        mon_pts, mon_wts = mon_points
    value, gw, gb, _ = _loss_terms(
        net,
        dataset.inputs,
        dataset.values[:, net.component],
        dataset.jacobians[:, net.component, :],
        mon_pts,
        mon_wts,
        cfg,
    )
    return value, (gw, gb)


def train(dataset: DtNSampleSet, widths, cfg: LossConfig):
    """Train one net per output component with full-batch Adam.

    Inputs and targets are normalized to unit scale during the loop (a
    pure optimizer preconditioner) and both scales are folded back into
    the first and last layers afterwards, so the returned nets map raw
    inputs to raw fluxes.  Deterministic for a fixed seed.  Returns
    (SurrogateModelSet, per-component report dicts).
    """
    d = dataset.dim
    in_scale = max(abs(cfg.u_min), abs(cfg.u_max), float(np.abs(dataset.inputs).max()))
    in_scale = max(in_scale, 1e-12)
    inputs = dataset.inputs / in_scale
    norm_cfg = replace(cfg, u_min=cfg.u_min / in_scale, u_max=cfg.u_max / in_scale)

    nets, report = [], []
    for component in range(d):
        rng_init = np.random.default_rng([cfg.seed, component])
        rng_mc = np.random.default_rng([cfg.seed, component, 1])
        net = init_net(d, widths, component, rng_init)

        targets = dataset.values[:, component].copy()
        jac_rows = dataset.jacobians[:, component, :] * in_scale
        scale = max(1.0, float(np.abs(targets).max()))
        targets /= scale
        jac_rows = jac_rows / scale

        if cfg.mon_variant == "full_sign":
            fixed_mon = monotonicity_points(norm_cfg, d)
        else:
            fixed_mon = None

        m_w = [np.zeros_like(w) for w in net.weights]
        v_w = [np.zeros_like(w) for w in net.weights]
        m_b = [np.zeros_like(b) for b in net.biases]
        v_b = [np.zeros_like(b) for b in net.biases]
        beta1, beta2, eps = 0.9, 0.999, 1e-8

        first_loss = last_loss = None
        for step in range(cfg.epochs):
            mon = fixed_mon if fixed_mon is not None else monotonicity_points(norm_cfg, d, rng_mc)
            # divergence shows up as non-finite loss below; silence the
            # intermediate overflow noise
            with np.errstate(over="ignore", invalid="ignore"):
                value, gw, gb, _ = _loss_terms(
                    net, inputs, targets, jac_rows, mon[0], mon[1], norm_cfg
                )
            if not np.isfinite(value):
                raise TrainingDivergence(
                    f"loss became non-finite for component {component}", step
                )
            if first_loss is None:
                first_loss = value
            last_loss = value

            frac = step / max(1, cfg.epochs - 1)
            lr = cfg.learning_rate * (
                cfg.lr_min_fraction
                + (1.0 - cfg.lr_min_fraction) * 0.5 * (1.0 + np.cos(np.pi * frac))
            )
            t = step + 1
            corr1 = 1.0 - beta1**t
            corr2 = 1.0 - beta2**t
            for k in range(len(net.weights)):
                m_w[k] = beta1 * m_w[k] + (1 - beta1) * gw[k]
                v_w[k] = beta2 * v_w[k] + (1 - beta2) * gw[k] ** 2
                net.weights[k] -= lr * (m_w[k] / corr1) / (np.sqrt(v_w[k] / corr2) + eps)
                m_b[k] = beta1 * m_b[k] + (1 - beta1) * gb[k]
                v_b[k] = beta2 * v_b[k] + (1 - beta2) * gb[k] ** 2
                net.biases[k] -= lr * (m_b[k] / corr1) / (np.sqrt(v_b[k] / corr2) + eps)

        net.weights[0] = net.weights[0] / in_scale
        net.weights[-1] = net.weights[-1] * scale
        net.biases[-1] = net.biases[-1] * scale
        nets.append(net)
        report.append(
            {
                "component": component,
                "first_loss": first_loss,
                "final_loss": last_loss,
                "epochs": cfg.epochs,
                "target_scale": scale,
                "input_scale": in_scale,
            }
        )
    models = SurrogateModelSet(nets, cfg, dataset.provenance_hash())
    return models, report


@dataclass
class SurrogateModelSet:
    """Trained component nets, shared across subdomains by default.

    ``per_subdomain`` can override the shared nets for individual
    subdomains when the coefficient field is not partition-periodic.
    Outside the training box the map is extended linearly from the
    nearest box point: the raw nets extrapolate wildly there, which would
    let Newton iterates escape into garbage territory, while inside the
    box the extension changes nothing.
    """

    nets: list
    loss_cfg: LossConfig
    provenance: str
    per_subdomain: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.nets[0].input_dim

    def nets_for(self, i: int) -> list:
        return self.per_subdomain.get(i, self.nets)

    def evaluate(self, i: int, v: np.ndarray, want_jacobian: bool = True):
        v = np.asarray(v, dtype=float)
        nets = self.nets_for(i)
        if len(v) != self.input_dim:
            raise ValueError(f"expected {self.input_dim} corner values, got {len(v)}")
        v_in = np.clip(v, self.loss_cfg.u_min, self.loss_cfg.u_max)
        offset = v - v_in
        outside = offset.any()
        values = np.zeros(len(nets))
        jac = np.zeros((len(nets), len(v))) if want_jacobian else None
        for l, net in enumerate(nets):
            if want_jacobian or outside:
                val, grad = forward_with_input_jacobian(net, v_in)
                values[l] = val + grad @ offset if outside else val
                if want_jacobian:
                    jac[l] = grad
            else:
                values[l] = forward(net, v_in)
        return values, jac


def _net_to_dict(net: SurrogateNet) -> dict:
    return {
        "component": net.component,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def _net_from_dict(data: dict, input_dim: int, widths) -> SurrogateNet:
    weights = [np.array(w, dtype=float) for w in data["weights"]]
    biases = [np.array(b, dtype=float) for b in data["biases"]]
    return SurrogateNet(input_dim, tuple(widths), weights, biases, int(data["component"]))


def save(models: SurrogateModelSet, path: str) -> None:
    """Lossless JSON round trip of architecture, parameters and provenance."""
    cfg = models.loss_cfg
    payload = {
        "input_dim": models.input_dim,
        "widths": list(models.nets[0].widths),
        "activation": "squared_relu",
        "loss_config": {
            "c0": cfg.c0, "c1": cfg.c1, "c_mon": cfg.c_mon,
            "mon_variant": cfg.mon_variant, "mon_grid": cfg.mon_grid,
            "mon_mc_points": cfg.mon_mc_points, "u_min": cfg.u_min,
            "u_max": cfg.u_max, "epochs": cfg.epochs,
            "learning_rate": cfg.learning_rate,
            "lr_min_fraction": cfg.lr_min_fraction, "seed": cfg.seed,
        },
        "provenance": models.provenance,
        "components": [_net_to_dict(net) for net in models.nets],
        "per_subdomain": {
            str(i): [_net_to_dict(net) for net in nets]
            for i, nets in models.per_subdomain.items()
        },
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load(path: str, expected_provenance: str | None = None) -> SurrogateModelSet:
    """Load a model file, validating shapes and optionally the provenance.

    A provenance mismatch is reported as a warning (the models stay
    usable); malformed shape chains raise ValueError.
    """
    with open(path) as f:
        payload = json.load(f)
    input_dim = int(payload["input_dim"])
    widths = payload["widths"]
    cfg = LossConfig(**payload["loss_config"])
    try:
        nets = [_net_from_dict(c, input_dim, widths) for c in payload["components"]]
        per_sub = {
            int(i): [_net_from_dict(c, input_dim, widths) for c in comps]
            for i, comps in payload.get("per_subdomain", {}).items()
        }
    except ValueError as exc:
        raise ValueError(f"malformed model file {path}: {exc}") from exc
    if len(nets) != input_dim:
        raise ValueError(
            f"malformed model file {path}: {len(nets)} components for input_dim {input_dim}"
        )
    provenance = payload.get("provenance", "")
    if expected_provenance is not None and provenance != expected_provenance:
        warnings.warn(
            f"model provenance {provenance!r} does not match expected "
            f"{expected_provenance!r}; the surrogate was trained on different data",
            stacklevel=2,
        )
    return SurrogateModelSet(nets, cfg, provenance, per_sub)
