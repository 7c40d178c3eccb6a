"""Per-domain latent factor training by mini-batch SGD.

The objective is the summed squared error over observed ratings, optionally
plus a weight-decay term on the rows a batch touches. ``train_smf`` is the
sharpness-aware variant: each step first finds a loss-maximizing L2-ball
perturbation of the batch's user rows and applies the gradient evaluated at
the perturbed point to the unperturbed parameters. With a zero-radius or
zero-step perturbation it reduces bitwise to ``train_mf``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import DomainDataset
from .errors import DivergenceError, MissingInputError, ValidationError
from .perturbation import PerturbConfig, find_delta

CHECKPOINT_VERSION = 1


@dataclass
class FactorModel:
    """User matrix U (n_users x d) and item matrix V (n_items x d)."""

    U: np.ndarray
    V: np.ndarray
    d: int

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.ndim != 2 or self.V.ndim != 2:
            raise ValidationError("U and V must be 2-D matrices")
        if self.U.shape[1] != self.d or self.V.shape[1] != self.d:
            raise ValidationError(f"matrix widths must equal d={self.d}")
        if not (np.all(np.isfinite(self.U)) and np.all(np.isfinite(self.V))):
            raise ValidationError("factor matrices must be finite")


@dataclass
class TrainConfig:
    """SGD hyperparameters for factor training (latent dim included)."""

    epochs: int
    learning_rate: float = 0.01
    batch_size: int = 256
    weight_decay: float = 0.0
    init_std: float = 0.01
    dim: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0.0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0.0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.init_std <= 0.0:
            raise ValidationError(f"init_std must be > 0, got {self.init_std}")
        if self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")


class MfGradient(NamedTuple):
    """Gradients for the rows a batch touches; untouched rows are implicitly zero."""

    user_index: np.ndarray
    user_grad: np.ndarray
    item_index: np.ndarray
    item_grad: np.ndarray


class MfTrainResult(NamedTuple):
    model: FactorModel
    loss_trace: list[float]


def predict(model: FactorModel, user_index: int, item_index: int) -> float:
    """Unclipped rating estimate: the inner product of one user and one item row."""
    if not 0 <= user_index < model.U.shape[0]:
        raise ValidationError(f"user index {user_index} out of range")
    if not 0 <= item_index < model.V.shape[0]:
        raise ValidationError(f"item index {item_index} out of range")
    return float(np.dot(model.U[user_index], model.V[item_index]))


def _batch_arrays(model: FactorModel, batch):
    batch = list(batch)
    if not batch:
        raise ValidationError("batch must be non-empty")
    ui = np.array([int(b[0]) for b in batch], dtype=np.int64)
    vi = np.array([int(b[1]) for b in batch], dtype=np.int64)
    r = np.array([float(b[2]) for b in batch], dtype=np.float64)
    if ui.min() < 0 or ui.max() >= model.U.shape[0]:
        raise ValidationError("user index out of range")
    if vi.min() < 0 or vi.max() >= model.V.shape[0]:
        raise ValidationError("item index out of range")
    return ui, vi, r


def mf_loss(model: FactorModel, batch, weight_decay: float = 0.0) -> float:
    """Summed squared rating error over a batch of (user, item, rating) triples.

    With positive ``weight_decay`` the squared norms of the rows the batch
    touches (each row once) are added, scaled by the decay.
    """
    ui, vi, r = _batch_arrays(model, batch)
    resid = r - np.einsum("ij,ij->i", model.U[ui], model.V[vi])
    loss = float(resid @ resid)
    if weight_decay > 0.0:
        uu = model.U[np.unique(ui)]
        vv = model.V[np.unique(vi)]
        loss += float(weight_decay) * (float((uu * uu).sum()) + float((vv * vv).sum()))
    return loss


def mf_grad(model: FactorModel, batch, weight_decay: float = 0.0) -> MfGradient:
    """Analytic gradient of :func:`mf_loss` for the touched U and V rows."""
    ui, vi, r = _batch_arrays(model, batch)
    uniq_u, inv_u = np.unique(ui, return_inverse=True)
    uniq_v, inv_v = np.unique(vi, return_inverse=True)
    u_rows = model.U[ui]
    v_rows = model.V[vi]
    resid = r - np.einsum("ij,ij->i", u_rows, v_rows)
    du = np.zeros((uniq_u.size, model.d))
    dv = np.zeros((uniq_v.size, model.d))
    np.add.at(du, inv_u, -2.0 * resid[:, None] * v_rows)
    np.add.at(dv, inv_v, -2.0 * resid[:, None] * u_rows)
    if weight_decay > 0.0:
        du += 2.0 * weight_decay * model.U[uniq_u]
        dv += 2.0 * weight_decay * model.V[uniq_v]
    return MfGradient(uniq_u, du, uniq_v, dv)


def _full_objective(U: np.ndarray, V: np.ndarray, dataset: DomainDataset, weight_decay: float) -> float:
    resid = dataset.rating - np.einsum("ij,ij->i", U[dataset.user_index], V[dataset.item_index])
    loss = float(resid @ resid)
    if weight_decay > 0.0:
        loss += weight_decay * (float((U * U).sum()) + float((V * V).sum()))
    return loss


def _sgd_step(U, V, ui, vi, r, config: TrainConfig, perturb: PerturbConfig | None) -> None:
    uniq_u, inv_u = np.unique(ui, return_inverse=True)
    uniq_v, inv_v = np.unique(vi, return_inverse=True)
    v_rows = V[vi]
    wd = config.weight_decay
    u_base = U[uniq_u]

    if perturb is not None and perturb.k > 0 and perturb.rho > 0.0:
        v_sq = float((V[uniq_v] ** 2).sum()) if wd > 0.0 else 0.0

        def loss_at(rows):
            res = r - np.einsum("ij,ij->i", rows[inv_u], v_rows)
            val = float(res @ res)
            if wd > 0.0:
                val += wd * (float((rows * rows).sum()) + v_sq)
            return val

        def grad_at(rows):
            res = r - np.einsum("ij,ij->i", rows[inv_u], v_rows)
            g = np.zeros_like(rows)
            np.add.at(g, inv_u, -2.0 * res[:, None] * v_rows)
            if wd > 0.0:
                g += 2.0 * wd * rows
            return g

        pert = find_delta(loss_at, grad_at, u_base, perturb)
        u_eval = u_base + pert.delta
    else:
        u_eval = u_base

    u_rows = u_eval[inv_u]
    resid = r - np.einsum("ij,ij->i", u_rows, v_rows)
    du = np.zeros_like(u_base)
    dv = np.zeros((uniq_v.size, U.shape[1]))
    np.add.at(du, inv_u, -2.0 * resid[:, None] * v_rows)
    np.add.at(dv, inv_v, -2.0 * resid[:, None] * u_rows)
    if wd > 0.0:
        du += 2.0 * wd * u_eval
        dv += 2.0 * wd * V[uniq_v]
    U[uniq_u] -= config.learning_rate * du
    V[uniq_v] -= config.learning_rate * dv


# overflow on the way to the divergence guard is expected, not a warning
@np.errstate(over="ignore", invalid="ignore")
def _train(dataset: DomainDataset, config: TrainConfig, perturb: PerturbConfig | None) -> MfTrainResult:
    rng = np.random.default_rng(config.seed)
    U = rng.normal(0.0, config.init_std, (dataset.n_users, config.dim))
    V = rng.normal(0.0, config.init_std, (dataset.n_items, config.dim))
    ui, vi, r = dataset.user_index, dataset.item_index, dataset.rating
    n = dataset.n_interactions
    trace: list[float] = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            sel = perm[start:start + config.batch_size]
            _sgd_step(U, V, ui[sel], vi[sel], r[sel], config, perturb)
        loss = _full_objective(U, V, dataset, config.weight_decay)
        if not np.isfinite(loss):
            raise DivergenceError(
                "training loss became non-finite",
                epoch=epoch, learning_rate=config.learning_rate,
            )
        trace.append(loss)
    return MfTrainResult(FactorModel(U, V, config.dim), trace)


def train_mf(dataset: DomainDataset, config: TrainConfig) -> MfTrainResult:
    """Seeded mini-batch SGD on the squared-error factorization objective."""
    return _train(dataset, config, None)


def train_smf(dataset: DomainDataset, config: TrainConfig, perturb: PerturbConfig) -> MfTrainResult:
    """Sharpness-aware factor training.

    Identical to :func:`train_mf` except each step evaluates the gradient at
    user rows shifted by the ball-constrained loss maximizer (items stay
    unperturbed) before updating the unperturbed rows.
    """
    return _train(dataset, config, perturb)


def save_factor_model(model: FactorModel, path, config: TrainConfig | None = None,
                      perturb: PerturbConfig | None = None) -> None:
    """Checkpoint a factor model as JSON; floats round-trip bit-exact."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "factor_model",
        "d": model.d,
        "n_users": int(model.U.shape[0]),
        "n_items": int(model.V.shape[0]),
        "U": model.U.tolist(),
        "V": model.V.tolist(),
        "config": None if config is None else {
            "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "weight_decay": config.weight_decay,
            "init_std": config.init_std,
            "dim": config.dim,
            "seed": config.seed,
        },
        "perturb": None if perturb is None else {
            "rho": perturb.rho, "k": perturb.k, "alpha": perturb.alpha,
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_factor_model(path) -> tuple[FactorModel, dict]:
    """Load a checkpoint, returning the model and the full document (config echo)."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"factor checkpoint not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_VERSION or doc.get("kind") != "factor_model":
        raise ValidationError(f"not a factor-model checkpoint: {path}")
    model = FactorModel(np.asarray(doc["U"]), np.asarray(doc["V"]), int(doc["d"]))
    if model.U.shape[0] != doc["n_users"] or model.V.shape[0] != doc["n_items"]:
        raise ValidationError("checkpoint shape metadata disagrees with payload")
    return model, doc
