"""Structure-preserving nonlinear energy parametrizations and their training.

The reduced model learned on top of a linear prior (K, C) is

    (I + M_NN) a + C v + dF_NN/dv + K q + dU_NN/dq = 0

with polynomial-plus-MLP energies

    U_NN(q) = sum_k alpha_k q^e_k + sum_i lambda_i MLP_i(q)
    F_NN(v) = sum_k beta_k  v^e_k + sum_i gamma_i  MLP_i(v)
    T_NN(v) = sum_k zeta_k  v^e_k         (total degree 2, M_NN = Hessian)

All coefficients and output scales start at zero, so an untrained model
reproduces the linear prior exactly. Training minimizes the Frobenius norm
of the residual over minibatches plus a ReLU penalty on negative kinetic
energy and dissipation, with ADAM.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diff as D
from .errors import ConfigError, NonFiniteLoss
from .lopinf import LinearLagrangianRom
from .reduce import ReducedDataset


# ------------------------------------------------------------------ bases


def monomial_basis(r: int, degrees) -> List[Tuple[int, ...]]:
    """All exponent tuples of length r whose total degree is in ``degrees``.

    Sorted by degree, then lexicographically descending, so r=2, {2} gives
    (2,0), (1,1), (0,2).
    """
    if r < 1:
        raise ValueError("r must be positive")
    degrees = sorted(set(int(d) for d in degrees))
    if any(d < 0 for d in degrees):
        raise ValueError("degrees must be nonnegative")
    out = []
    for d in degrees:
        block = []
        for combo in combinations_with_replacement(range(r), d):
            e = [0] * r
            for j in combo:
                e[j] += 1
            block.append(tuple(e))
        out.extend(sorted(set(block), reverse=True))
    return out


@dataclass(frozen=True)
class PolynomialTerm:
    multi_index: Tuple[int, ...]
    coefficient: float

    def __call__(self, x) -> float:
        return self.coefficient * float(np.prod(np.asarray(x, dtype=float) ** np.array(self.multi_index)))


@dataclass(frozen=True)
class Mlp:
    """Read-only view of one network: Swish hidden layers, linear scalar output."""

    widths: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    scale: float

    def __call__(self, x) -> float:
        y = np.asarray(x, dtype=float).reshape(-1, 1)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            y = D.swish_value(W @ y + b)
        return float(self.scale * (self.weights[-1] @ y + self.biases[-1])[0, 0])


# ----------------------------------------------------------- architecture


@dataclass(frozen=True)
class SpmlArch:
    r: int
    hidden: Tuple[int, ...] = (64, 30, 20, 6)
    degrees: Tuple[int, ...] = (2, 3, 4)
    n_mlp: int = 1
    use_TNN: bool = False
    use_FNN: bool = True

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError("r must be positive")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden}")
        if self.n_mlp < 0:
            raise ConfigError("n_mlp must be nonnegative")
        if any(d < 2 for d in self.degrees):
            raise ConfigError("polynomial degrees below 2 are not allowed")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "degrees", tuple(sorted(set(int(d) for d in self.degrees))))

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.r,) + self.hidden + (1,)

    def energies(self) -> Tuple[str, ...]:
        return ("U", "F") if self.use_FNN else ("U",)

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Parameter names and shapes in flattening order."""
        shapes = []
        if self.use_TNN:
            shapes.append(("zeta", (len(monomial_basis(self.r, (2,))), 1)))
        n_poly = len(monomial_basis(self.r, self.degrees))
        w = self.widths
        for e in self.energies():
            shapes.append((f"{e}_poly", (1, n_poly)))
            for i in range(self.n_mlp):
                for l in range(len(w) - 1):
                    shapes.append((f"{e}{i}_W{l}", (w[l + 1], w[l])))
                    shapes.append((f"{e}{i}_b{l}", (w[l + 1], 1)))
                shapes.append((f"{e}{i}_scale", (1, 1)))
        return shapes

    @property
    def n_params(self) -> int:
        return int(sum(math.prod(s) for _, s in self.param_shapes()))

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ model


@dataclass
class SpmlModel:
    arch: SpmlArch
    params: Dict[str, np.ndarray]

    @property
    def r(self) -> int:
        return self.arch.r

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.params[n].reshape(-1) for n, _ in self.arch.param_shapes()])

    def with_theta(self, theta) -> "SpmlModel":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.arch.n_params,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.arch.n_params},)")
        params, pos = {}, 0
        for name, shape in self.arch.param_shapes():
            size = math.prod(shape)
            params[name] = theta[pos : pos + size].reshape(shape).copy()
            pos += size
        return SpmlModel(self.arch, params)

    @classmethod
    def zeros(cls, arch: SpmlArch) -> "SpmlModel":
        return cls(arch, {n: np.zeros(s) for n, s in arch.param_shapes()})

    # views
    def poly_terms(self, energy: str) -> List[PolynomialTerm]:
        if energy == "T":
            if not self.arch.use_TNN:
                return []
            basis = monomial_basis(self.r, (2,))
            coef = self.params["zeta"][:, 0]
        else:
            basis = monomial_basis(self.r, self.arch.degrees)
            coef = self.params[f"{energy}_poly"][0]
        return [PolynomialTerm(e, float(c)) for e, c in zip(basis, coef)]

    def mlps(self, energy: str) -> List[Mlp]:
        nl = len(self.arch.widths) - 1
        out = []
        for i in range(self.arch.n_mlp):
            p = f"{energy}{i}_"
            out.append(
                Mlp(
                    self.arch.widths,
                    tuple(self.params[f"{p}W{l}"] for l in range(nl)),
                    tuple(self.params[f"{p}b{l}"] for l in range(nl)),
                    float(self.params[f"{p}scale"][0, 0]),
                )
            )
        return out


def glorot_init(widths: Sequence[int], seed=None, rng: Optional[np.random.Generator] = None):
    """Uniform(-b, b) weights with b = sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(seed) if rng is None else rng
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        b = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-b, b, size=(fan_out, fan_in)), np.zeros((fan_out, 1))))
    return layers


def init_model(arch: SpmlArch, seed: int = 0) -> SpmlModel:
    """Glorot network weights; polynomial coefficients and output scales zero."""
    model = SpmlModel.zeros(arch)
    rng = np.random.default_rng(seed)
    for e in arch.energies():
        for i in range(arch.n_mlp):
            for l, (W, b) in enumerate(glorot_init(arch.widths, rng=rng)):
                model.params[f"{e}{i}_W{l}"] = W
                model.params[f"{e}{i}_b{l}"] = b
    return model


# ------------------------------------------------------------------ graphs


def _mass_map(r: int) -> np.ndarray:
    """Constant S with vec(M_NN) = S zeta for the quadratic T_NN."""
    basis = monomial_basis(r, (2,))
    S = np.zeros((r * r, len(basis)))
    for k, e in enumerate(basis):
        idx = [j for j in range(r) for _ in range(e[j])]
        i, j = idx
        if i == j:
            S[i * r + i, k] = 2.0
        else:
            S[i * r + j, k] = 1.0
            S[j * r + i, k] = 1.0
    return S


class _Graphs:
    """Symbolic pieces shared by every program of one architecture."""

    def __init__(self, arch: SpmlArch):
        self.arch = arch
        self.p = {n: D.param(n) for n, _ in arch.param_shapes()}
        self.E = np.array(monomial_basis(arch.r, arch.degrees), dtype=np.int64)
        self.E_T = np.array(monomial_basis(arch.r, (2,)), dtype=np.int64)

    def energy(self, e: str, X: D.Expr) -> D.Expr:
        """Row vector of U_NN or F_NN evaluated at each column of X."""
        out = D.matmul(self.p[f"{e}_poly"], D.monomials(X, self.E))
        nl = len(self.arch.widths) - 1
        for i in range(self.arch.n_mlp):
            p = f"{e}{i}_"
            y = X
            for l in range(nl - 1):
                y = D.swish(D.matmul(self.p[f"{p}W{l}"], y) + self.p[f"{p}b{l}"])
            y = D.matmul(self.p[f"{p}W{nl - 1}"], y) + self.p[f"{p}b{nl - 1}"]
            out = out + self.p[f"{p}scale"] * y
        return out

    def kinetic(self, V: D.Expr) -> D.Expr:
        return D.matmul(D.transpose(self.p["zeta"]), D.monomials(V, self.E_T))

    def mass(self) -> D.Expr:
        r = self.arch.r
        return D.reshape(D.matmul(D.const(_mass_map(r)), self.p["zeta"]), (r, r))

    def residual(self, Q, Qd, Qdd, K, C) -> D.Expr:
        R = Qdd + D.matmul(K, Q) + D.matmul(C, Qd)
        if self.arch.use_TNN:
            R = R + D.matmul(self.mass(), Qdd)
        R = R + D.grad_input(D.sum(self.energy("U", Q)), Q)
        if self.arch.use_FNN:
            R = R + D.grad_input(D.sum(self.energy("F", Qd)), Qd)
        return R

    def positivity(self, Qd, C):
        """Per-column kinetic energy and total dissipation rows."""
        kin = 0.5 * D.sum_axis(Qd * Qd, 0)
        if self.arch.use_TNN:
            kin = kin + 0.5 * D.sum_axis(Qd * D.matmul(self.mass(), Qd), 0)
        F = 0.5 * D.sum_axis(Qd * D.matmul(C, Qd), 0)
        if self.arch.use_FNN:
            F = F + self.energy("F", Qd)
        return kin, F


@lru_cache(maxsize=32)
def _graphs(arch: SpmlArch) -> _Graphs:
    return _Graphs(arch)


@lru_cache(maxsize=32)
def _loss_program(arch: SpmlArch, with_grad: bool) -> D.Program:
    g = _graphs(arch)
    Q, Qd, Qdd = D.input("Q"), D.input("Qd"), D.input("Qdd")
    K, C, w = D.input("K"), D.input("C"), D.input("penalty_weight")
    R = g.residual(Q, Qd, Qdd, K, C)
    kin, F = g.positivity(Qd, C)
    res = D.norm(R)
    pen = D.norm(D.relu(-kin) + D.relu(-F))
    J = res + w * pen
    outs = [J, res, pen]
    if with_grad:
        names = [n for n, _ in arch.param_shapes()]
        outs += D.grad_params(J, [g.p[n] for n in names])
    return D.compile(outs)


@lru_cache(maxsize=32)
def _eval_program(arch: SpmlArch) -> D.Program:
    g = _graphs(arch)
    Q, Qd, Qdd = D.input("Q"), D.input("Qd"), D.input("Qdd")
    K, C = D.input("K"), D.input("C")
    outs = [g.residual(Q, Qd, Qdd, K, C), g.energy("U", Q)]
    outs += list(g.positivity(Qd, C))
    outs.append(g.energy("F", Qd) if arch.use_FNN else D.zeros_like(D.sum_axis(Qd, 0)))
    outs.append(g.kinetic(Qd) if arch.use_TNN else D.zeros_like(D.sum_axis(Qd, 0)))
    return D.compile(outs)


# -------------------------------------------------------------- evaluation


def _as_columns(x, r):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != r:
        raise ValueError(f"expected {r} rows, got {x.shape[0]}")
    return x


def _feed(model, lin, Q, Qd, Qdd, penalty_weight=1.0):
    r = model.r
    Q, Qd, Qdd = (_as_columns(a, r) for a in (Q, Qd, Qdd))
    if not Q.shape == Qd.shape == Qdd.shape:
        raise ValueError("batch blocks must have equal shapes")
    if lin.r != r:
        raise ValueError(f"linear prior has r={lin.r}, model has r={r}")
    feed = dict(model.params)
    feed.update(Q=Q, Qd=Qd, Qdd=Qdd, K=lin.K, C=lin.damping(), penalty_weight=np.asarray(penalty_weight, dtype=float))
    return feed


def _energy_eval(model: SpmlModel, x, which: int) -> float:
    r = model.r
    x = np.asarray(x, dtype=float)
    if x.shape != (r,):
        raise ValueError(f"state must have shape ({r},), got {x.shape}")
    col = x[:, None]
    lin = LinearLagrangianRom(np.zeros((r, r)), np.zeros((r, r)), 0.0)  # prior does not enter the energies
    out = _eval_program(model.arch)(_feed(model, lin, col, col, np.zeros_like(col)))
    return float(out[which][0, 0])


def eval_U_NN(model: SpmlModel, q) -> float:
    return _energy_eval(model, q, 1)


def eval_F_NN(model: SpmlModel, v) -> float:
    return _energy_eval(model, v, 4)


def eval_T_NN(model: SpmlModel, v) -> float:
    return _energy_eval(model, v, 5)


def m_nn(model: SpmlModel) -> np.ndarray:
    r = model.r
    if not model.arch.use_TNN:
        return np.zeros((r, r))
    return (_mass_map(r) @ model.params["zeta"]).reshape(r, r)


def residual_batch(model: SpmlModel, lin: LinearLagrangianRom, batch) -> np.ndarray:
    """Columnwise reduced Euler-Lagrange residual for (Qhat, Qdot, Qddot)."""
    Q, Qd, Qdd = batch
    return _eval_program(model.arch)(_feed(model, lin, Q, Qd, Qdd))[0]


def positivity_values(model: SpmlModel, lin: LinearLagrangianRom, Qd) -> Tuple[np.ndarray, np.ndarray]:
    """Per-column kinetic energy 1/2 v^T (I+M_NN) v and dissipation F(v)."""
    Qd = _as_columns(Qd, model.r)
    out = _eval_program(model.arch)(_feed(model, lin, np.zeros_like(Qd), Qd, np.zeros_like(Qd)))
    return out[2][0], out[3][0]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 250
    epochs: int = 100
    seed: int = 0
    penalty_weight: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("ADAM decay rates must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.penalty_weight < 0:
            raise ConfigError("penalty_weight must be nonnegative")


def loss(model: SpmlModel, lin: LinearLagrangianRom, batch, cfg: TrainConfig = TrainConfig()) -> float:
    Q, Qd, Qdd = batch
    return float(_loss_program(model.arch, False)(_feed(model, lin, Q, Qd, Qdd, cfg.penalty_weight))[0])


def loss_terms(model, lin, batch, cfg: TrainConfig = TrainConfig()):
    """(total, residual norm, penalty) on one batch."""
    Q, Qd, Qdd = batch
    J, res, pen = _loss_program(model.arch, False)(_feed(model, lin, Q, Qd, Qdd, cfg.penalty_weight))
    return float(J), float(res), float(pen)


def loss_and_grad(model, lin, batch, cfg: TrainConfig = TrainConfig()) -> Tuple[float, np.ndarray]:
    Q, Qd, Qdd = batch
    out = _loss_program(model.arch, True)(_feed(model, lin, Q, Qd, Qdd, cfg.penalty_weight))
    grads = [g.reshape(-1) for g in out[3:]]
    return float(out[0]), np.concatenate(grads)


# -------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta, g, state: AdamState, cfg: TrainConfig):
    """Bias-corrected ADAM update; returns (new theta, new state)."""
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    if theta.shape != g.shape or state.m.shape != g.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    theta = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return theta, AdamState(m, v, t)


@dataclass
class TrainHistory:
    epoch: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_epoch: int = 0

    def rows(self):
        return list(zip(self.epoch, self.train_loss, self.val_loss))


def train(
    data: ReducedDataset,
    lin: LinearLagrangianRom,
    arch: SpmlArch,
    cfg: TrainConfig = TrainConfig(),
    model: Optional[SpmlModel] = None,
    callback=None,
) -> Tuple[SpmlModel, TrainHistory]:
    """ADAM on shuffled minibatches of the train split; keep the best-validation model.

    Epoch 0 in the history is the initial model, so zero epochs return it
    unchanged. ``callback(epoch, train_loss, val_loss)`` may return True to stop.
    """
    if data.r != arch.r:
        raise ValueError(f"data has r={data.r}, architecture r={arch.r}")
    if "train" not in data.split or "val" not in data.split:
        raise ValueError("dataset must be split into train and val partitions")
    model = init_model(arch, cfg.seed) if model is None else model
    Xt = data.columns("train")
    Xv = data.columns("val")
    n_train = Xt[0].shape[1]
    rng = np.random.default_rng(cfg.seed)
    theta = model.theta
    state = AdamState.zeros(theta.size)

    def val_loss(th):
        return loss(model.with_theta(th), lin, Xv, cfg)

    starts = range(0, n_train, cfg.batch_size)
    hist = TrainHistory()
    best = (val_loss(theta), theta.copy(), 0)
    hist.epoch.append(0)
    init = [loss(model, lin, tuple(X[:, s : s + cfg.batch_size] for X in Xt), cfg) for s in starts]
    hist.train_loss.append(float(np.mean(init)))
    hist.val_loss.append(best[0])
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n_train)
        total = 0.0
        nb = 0
        for b, start in enumerate(starts):
            idx = perm[start : start + cfg.batch_size]
            batch = tuple(X[:, idx] for X in Xt)
            J, g = loss_and_grad(model.with_theta(theta), lin, batch, cfg)
            if not np.isfinite(J) or not np.all(np.isfinite(g)):
                raise NonFiniteLoss(epoch, b)
            theta, state = adam_step(theta, g, state, cfg)
            total += J
            nb += 1
        v = val_loss(theta)
        if not np.isfinite(v):
            raise NonFiniteLoss(epoch, -1)
        hist.epoch.append(epoch)
        hist.train_loss.append(total / nb)
        hist.val_loss.append(v)
        if v < best[0]:
            best = (v, theta.copy(), epoch)
        if callback is not None and callback(epoch, total / nb, v):
            break
    hist.best_epoch = best[2]
    return model.with_theta(best[1]), hist


# -------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"SPMLCKPT"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: SpmlModel) -> bytes:
    header = json.dumps(
        {"arch": model.arch.to_dict(), "params": [[n, list(s)] for n, s in model.arch.param_shapes()]},
        sort_keys=True,
    ).encode()
    theta = model.theta.astype("<f8").tobytes()
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + theta


def model_from_bytes(buf: bytes) -> SpmlModel:
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not an SpML checkpoint")
    version, hlen = struct.unpack("<II", buf[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[16 : 16 + hlen].decode())
    a = header["arch"]
    arch = SpmlArch(a["r"], tuple(a["hidden"]), tuple(a["degrees"]), a["n_mlp"], a["use_TNN"], a["use_FNN"])
    theta = np.frombuffer(buf[16 + hlen :], dtype="<f8").astype(float)
    if theta.size != arch.n_params:
        raise ValueError(f"checkpoint holds {theta.size} values, architecture needs {arch.n_params}")
    return SpmlModel.zeros(arch).with_theta(theta)


def save_checkpoint(model: SpmlModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> SpmlModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
