"""Training orchestration: batch/block scheduling, gradient preconditioning,
SGD with momentum and weight decay, and bias compensation at block
boundaries.

The gradient-based whitening path never touches activations: per batch the
kernel gradients of a whitened layer are right-multiplied by the smoothed
preconditioner Q_s before the SGD update.  Preconditioning happens before
momentum accumulation; weight decay acts on the raw parameters,
uncoupled from Q.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .counters import add_macs
from .metrics import MetricsRecord, aggregate_layers, normalized_rank_kappa, whiteness_rho
from .linalg import condition_number
from .moments import BlockAccumulator, MomentState, accumulate, finalize_block, update_power
from .nn import (
    ConvLayer,
    DenseLayer,
    LayerGradients,
    accuracy,
    softmax_cross_entropy,
)
from .recursive import (
    RecursiveState,
    SubspaceError,
    apply_step,
    estimate_high_power_subspace,
    transform_step,
    whitened_covariance,
)
from .zca import METHODS, WhitenState, refresh_from_covariance

_TRAINABLE = (DenseLayer, ConvLayer)


class TrainingDiverged(RuntimeError):
    """Non-finite values appeared in a gradient or parameter update."""


@dataclass
class HyperParams:
    """Whitening hyperparameters; defaults depend on the method."""

    alpha: float = 0.9
    beta: float = 0.95
    gamma: float = 0.99
    delta: float = 0.25
    epsilon: float = 1e-5
    g_max: float = 10.0
    c_rel: float = 0.025
    c_abs: float = 1e-6

    @classmethod
    def evd_defaults(cls):
        return cls(alpha=0.9, beta=0.95)

    @classmethod
    def recursive_defaults(cls):
        return cls(alpha=0.1, beta=0.1, gamma=0.99, delta=0.25,
                   c_rel=0.025, c_abs=1e-6, epsilon=1e-5)

    @classmethod
    def for_method(cls, method):
        if method == "recursive":
            return cls.recursive_defaults()
        return cls.evd_defaults()


@dataclass
class OptimizerConfig:
    eta: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 32
    block_batches: int = 4
    method: str = "baseline"

    def __post_init__(self):
        if self.eta <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.block_batches < 1:
            raise ValueError("batch size and block length must be >= 1")
        if self.method not in METHODS:
            raise ValueError("unknown method %r" % (self.method,))


def transform_gradients(grads, q_s, counter=None):
    """Right-multiply every S x M kernel-gradient block by Q_s; bias untouched."""
    q_s = np.asarray(q_s, dtype=float)
    n, s, m = grads.kernels.shape
    if q_s.shape != (m, m):
        raise ValueError("Q_s shape %r does not match feature dim %d" % (q_s.shape, m))
    add_macs(counter, n * s * m * m)
    return LayerGradients(kernels=grads.kernels @ q_s, bias=grads.bias)


def sgd_step(layer, grads, velocity, cfg):
    """Momentum SGD with decoupled weight decay; plain SGD at momentum=0."""
    gk = grads.kernels + cfg.weight_decay * layer.kernels
    gb = grads.bias + cfg.weight_decay * layer.bias
    velocity.kernels *= cfg.momentum
    velocity.kernels += gk
    velocity.bias *= cfg.momentum
    velocity.bias += gb
    layer.kernels -= cfg.eta * velocity.kernels
    layer.bias -= cfg.eta * velocity.bias
    if not (np.all(np.isfinite(layer.kernels)) and np.all(np.isfinite(layer.bias))):
        raise TrainingDiverged("non-finite parameters after SGD step")


def compensate_bias(layer, mean_old, mean_new):
    """Shift the bias so the layer map is unchanged when the frozen mean moves.

    z = sum_n K_n (x_n - mu) + b loses K (mu_new - mu_old) per tap when mu
    advances, so b <- b + sum_n K_n (mu_new - mu_old); with shared kernels
    the (1/R) spatial average collapses to the same tap sum.
    """
    d = np.asarray(mean_new, dtype=float) - np.asarray(mean_old, dtype=float)
    if d.shape != (layer.in_features,):
        raise ValueError("mean length mismatch")
    layer.bias += np.einsum("nsm,m->s", layer.kernels, d)
    return layer


class _Slot:
    """Per-trainable-layer optimizer state."""

    def __init__(self, layer, whiten, cfg, hp):
        self.layer = layer
        self.whiten = whiten
        self.dim = layer.in_features
        self.vel = LayerGradients(
            kernels=np.zeros_like(layer.kernels), bias=np.zeros_like(layer.bias)
        )
        self.wstate = None
        self.rstate = None
        if whiten:
            self.acc = BlockAccumulator.zeros(self.dim)
            self.mom = MomentState.initial(self.dim, hp.alpha)
            if cfg.method == "recursive":
                self.rstate = RecursiveState.initial(
                    self.dim, hp.gamma, hp.delta, hp.c_rel, hp.c_abs, hp.epsilon
                )
                self._q_s = np.eye(self.dim)
                self._frozen = np.zeros(self.dim)
            else:
                self.wstate = WhitenState.initial(self.dim, hp.beta, cfg.method)

    def frozen_mean(self):
        if not self.whiten:
            return None
        if self.wstate is not None:
            return self.wstate.frozen_mean
        return self._frozen

    def q_s(self):
        if self.wstate is not None:
            return self.wstate.q_s
        return self._q_s

    def transform(self):
        if self.wstate is not None:
            return self.wstate.t
        return self.rstate.t


class Trainer:
    """One logical training loop over a layer stack.

    ``whiten`` flags (aligned with the trainable layers, in order) select
    which layers get moment tracking and gradient preconditioning; default
    is all of them.  With ``threads`` > 1 each batch is sharded across a
    worker pool and reduced in a fixed order.
    """

    def __init__(self, model, cfg, hp=None, whiten=None, counter=None,
                 collect_stride=1, threads=1):
        self.model = list(model)
        self.cfg = cfg
        self.hp = hp if hp is not None else HyperParams.for_method(cfg.method)
        self.counter = counter
        self.collect_stride = collect_stride
        self.threads = max(1, int(threads))
        trainable = [i for i, l in enumerate(self.model) if isinstance(l, _TRAINABLE)]
        if whiten is None:
            whiten = [True] * len(trainable)
        if len(whiten) != len(trainable):
            raise ValueError("whiten flags must match the trainable layer count")
        self.slots = [
            _Slot(self.model[i], w, cfg, self.hp) for i, w in zip(trainable, whiten)
        ]
        self._slot_of = {i: s for i, s in zip(trainable, self.slots)}
        self.step_count = 0
        self.block_count = 0
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    # -- forward / backward ------------------------------------------------

    def _forward(self, x, local_accs=None):
        caches = []
        h = x
        for i, layer in enumerate(self.model):
            caches.append(h)
            slot = self._slot_of.get(i)
            if slot is not None:
                if slot.whiten and local_accs is not None:
                    stats_in = h if h.ndim == 2 else h.reshape(h.shape[0], h.shape[1], -1)
                    accumulate(local_accs[id(slot)], stats_in, self.collect_stride)
                h = layer.forward(h, slot.frozen_mean())
            else:
                h = layer.forward(h)
        return caches, h

    def _backward(self, caches, dout):
        grads = {}
        d = dout
        for i in range(len(self.model) - 1, -1, -1):
            layer = self.model[i]
            slot = self._slot_of.get(i)
            if slot is not None:
                g, d = layer.backward(caches[i], d, slot.frozen_mean())
                grads[i] = g
            else:
                d = layer.backward(caches[i], d)
        return grads

    def _chunk_pass(self, x, y, total):
        local_accs = {
            id(s): BlockAccumulator.zeros(s.dim) for s in self.slots if s.whiten
        }
        caches, logits = self._forward(x, local_accs)
        if not np.all(np.isfinite(logits)):
            raise TrainingDiverged("non-finite activations in forward pass")
        loss_sum, dlogits = softmax_cross_entropy(logits, y, reduction="sum")
        grads = self._backward(caches, dlogits / total)
        return loss_sum, grads, local_accs

    # -- public API --------------------------------------------------------

    def train_batch(self, x, y):
        b = len(y)
        if self._pool is None or b < 2 * self.threads:
            parts = [(x, y)]
        else:
            chunks = np.array_split(np.arange(b), self.threads)
            parts = [(x[ix], y[ix]) for ix in chunks if len(ix)]
        if self._pool is not None and len(parts) > 1:
            futures = [self._pool.submit(self._chunk_pass, px, py, b) for px, py in parts]
            results = [f.result() for f in futures]
        else:
            results = [self._chunk_pass(px, py, b) for px, py in parts]

        loss_sum = 0.0
        merged = None
        for part_loss, grads, local_accs in results:
            loss_sum += part_loss
            if merged is None:
                merged = grads
            else:
                for i, g in grads.items():
                    merged[i].kernels += g.kernels
                    merged[i].bias += g.bias
            for s in self.slots:
                if s.whiten:
                    s.acc.merge(local_accs[id(s)])

        for i, slot in self._slot_of.items():
            g = merged[i]
            if slot.whiten and self.cfg.method != "baseline":
                g = transform_gradients(g, slot.q_s(), self.counter)
            sgd_step(slot.layer, g, slot.vel, self.cfg)

        self.step_count += 1
        if self.step_count % self.cfg.block_batches == 0:
            self.block_update()
        return loss_sum / b

    def block_update(self):
        """Block boundary: finalize moments, compensate bias, refresh T/Q/Q_s."""
        hp = self.hp
        for slot in self.slots:
            if not slot.whiten or slot.acc.count == 0:
                continue
            update_power(slot.mom, slot.acc)
            finalize_block(slot.mom, slot.acc)
            if self.cfg.method == "baseline":
                continue
            if not np.all(np.isfinite(slot.mom.cov)):
                raise TrainingDiverged("non-finite covariance at block boundary")
            new_mean = slot.mom.mean.copy()
            compensate_bias(slot.layer, slot.frozen_mean(), new_mean)
            if slot.wstate is not None:
                slot.wstate.frozen_mean = new_mean
                refresh_from_covariance(
                    slot.wstate, slot.mom.cov, hp.g_max, hp.epsilon, self.counter
                )
            else:
                slot._frozen = new_mean
                rst = slot.rstate
                phi_y = whitened_covariance(rst.t, slot.mom.cov)
                try:
                    est = estimate_high_power_subspace(
                        phi_y, rst.c_rel, rst.c_abs, self.counter
                    )
                except SubspaceError:
                    est = None
                if est is not None:
                    a_e, _ = transform_step(
                        est, slot.mom.mean_power, rst.delta, rst.epsilon
                    )
                    apply_step(rst, est, a_e, self.counter)
                slot._q_s = hp.beta * slot._q_s + (1.0 - hp.beta) * rst.q
        self.block_count += 1

    def evaluate(self, x, y, batch_size=512):
        loss_sum = 0.0
        correct = 0
        n = len(y)
        for start in range(0, n, batch_size):
            xb, yb = x[start : start + batch_size], y[start : start + batch_size]
            _, logits = self._forward(xb)
            part, _ = softmax_cross_entropy(logits, yb, reduction="sum")
            loss_sum += part
            correct += int(round(accuracy(logits, yb) * len(yb)))
        return loss_sum / n, correct / n

    def layer_metrics(self, cond_floor=1e-12):
        """kappa/rho/cond aggregates over whitened layers with valid stats."""
        kappas, rhos, conds = [], [], []
        for slot in self.slots:
            if not slot.whiten or slot.mom.block_index < 0:
                continue
            phi_y = whitened_covariance(slot.transform(), slot.mom.cov)
            if np.any(np.diag(phi_y) <= 0.0):
                continue
            kappas.append(normalized_rank_kappa(phi_y))
            rhos.append(whiteness_rho(phi_y))
            conds.append(condition_number(phi_y, cond_floor))
        if not kappas:
            nan = float("nan")
            return dict(kappa_mean=nan, kappa_stderr=nan, rho_mean=nan,
                        rho_stderr=nan, cond_mean=nan)
        km, ks = aggregate_layers(kappas)
        rm, rs = aggregate_layers(rhos)
        cm, _ = aggregate_layers(conds)
        return dict(kappa_mean=km, kappa_stderr=ks, rho_mean=rm,
                    rho_stderr=rs, cond_mean=cm)


def run_training(model, train, test, cfg, hp=None, epochs=1, seed=0, whiten=None,
                 counter=None, collect_stride=1, threads=1, loss_target=None):
    """Epoch loop over a dataset; returns (trainer, records, steps_to_target).

    Batches are drawn in a seeded shuffled order; partial trailing batches
    are dropped so every block sees exactly L batches of B samples.
    ``steps_to_target`` is the first step index at which the running
    block-mean train loss fell to ``loss_target`` (None if never).
    """
    trainer = Trainer(model, cfg, hp=hp, whiten=whiten, counter=counter,
                      collect_stride=collect_stride, threads=threads)
    rng = np.random.default_rng(seed)
    records = []
    steps_to_target = None
    n = len(train)
    b = cfg.batch_size
    window = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - b + 1, b):
            ix = order[start : start + b]
            loss = trainer.train_batch(train.x[ix], train.y[ix])
            losses.append(loss)
            window.append(loss)
            if len(window) > cfg.block_batches:
                window.pop(0)
            if (
                loss_target is not None
                and steps_to_target is None
                and sum(window) / len(window) <= loss_target
            ):
                steps_to_target = trainer.step_count
        _, test_acc = trainer.evaluate(test.x, test.y)
        lm = trainer.layer_metrics()
        wall_ms = int(round((time.perf_counter() - t0) * 1000.0))
        records.append(
            MetricsRecord(
                epoch=epoch,
                step=trainer.step_count,
                loss=float(np.mean(losses)) if losses else float("nan"),
                accuracy=test_acc,
                wall_ms=wall_ms,
                **lm,
            )
        )
    return trainer, records, steps_to_target


# -- fixed-transform equivalence harness -----------------------------------


def _make_fixed_transforms(dims, rng, scale=0.3):
    """One symmetric, well-conditioned, non-identity transform per layer."""
    t_list = []
    for m in dims[:-1]:
        r = rng.normal(size=(m, m))
        t_list.append(np.eye(m) + scale * 0.5 * (r + r.T) / np.sqrt(m))
    return t_list


def fixed_transform_divergence(dims, steps, eta, batch_size, seed):
    """Run the direct and gradient paths side by side with frozen transforms.

    Builds an MLP from ``dims``, injects a fixed non-identity T per layer
    into both paths (gradient path starts from W~ = W T), performs
    ``steps`` plain-SGD updates on identical batches, and returns the
    maximum relative parameter divergence between W~ and W T.
    """
    rng = np.random.default_rng(seed)
    n_layers = len(dims) - 1
    t_list = _make_fixed_transforms(dims, rng)
    w_direct, b_direct, w_tilde, b_tilde = [], [], [], []
    for l in range(n_layers):
        w = rng.normal(0.0, np.sqrt(2.0 / dims[l]), size=(dims[l + 1], dims[l]))
        bias = rng.normal(0.0, 0.1, size=dims[l + 1])
        w_direct.append(w.copy())
        b_direct.append(bias.copy())
        w_tilde.append(w @ t_list[l])
        b_tilde.append(bias.copy())
    q_list = [t.T @ t for t in t_list]

    classes = dims[-1]
    for _ in range(steps):
        x = rng.normal(size=(batch_size, dims[0]))
        y = rng.integers(0, classes, size=batch_size)

        # direct path: whiten activations, plain SGD on W
        h = x
        pre, whitened = [], []
        for l in range(n_layers):
            yw = h @ t_list[l].T
            z = yw @ w_direct[l].T + b_direct[l]
            whitened.append(yw)
            pre.append(z)
            h = np.maximum(z, 0.0) if l < n_layers - 1 else z
        _, d = softmax_cross_entropy(h, y, reduction="mean")
        for l in range(n_layers - 1, -1, -1):
            if l < n_layers - 1:
                d = d * (pre[l] > 0.0)
            dw = d.T @ whitened[l]
            db = d.sum(axis=0)
            d = (d @ w_direct[l]) @ t_list[l]
            w_direct[l] -= eta * dw
            b_direct[l] -= eta * db

        # gradient path: folded weights, preconditioned kernel gradients
        h = x
        pre, inputs = [], []
        for l in range(n_layers):
            z = h @ w_tilde[l].T + b_tilde[l]
            inputs.append(h)
            pre.append(z)
            h = np.maximum(z, 0.0) if l < n_layers - 1 else z
        _, d = softmax_cross_entropy(h, y, reduction="mean")
        for l in range(n_layers - 1, -1, -1):
            if l < n_layers - 1:
                d = d * (pre[l] > 0.0)
            dw = d.T @ inputs[l]
            db = d.sum(axis=0)
            d = d @ w_tilde[l]
            w_tilde[l] -= eta * (dw @ q_list[l])
            b_tilde[l] -= eta * db

    divergence = 0.0
    for l in range(n_layers):
        ref = w_direct[l] @ t_list[l]
        denom = max(np.max(np.abs(ref)), 1e-30)
        divergence = max(divergence, np.max(np.abs(w_tilde[l] - ref)) / denom)
        bden = max(np.max(np.abs(b_direct[l])), 1e-30)
        divergence = max(divergence, np.max(np.abs(b_tilde[l] - b_direct[l])) / bden)
    return float(divergence)
