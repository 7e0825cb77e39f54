"""Vanilla SGD on small analytic models with trajectory recording.

Three model families with closed-form gradients and Hessian-vector products:
a quadratic bowl with per-sample centers (analytic everything), l2-regularized
logistic regression, and a one-hidden-layer tanh MLP with squared loss whose
gradient and HVP are hand-derived (forward-over-reverse).

No virtual perturbation ever enters the update; schedules and proxies consume
the recorded trajectory after the fact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _io, rng
from .errors import FormatError, InputError, RunError

__all__ = [
    "Quadratic",
    "Logistic",
    "MLP",
    "Dataset",
    "StepRecord",
    "Trajectory",
    "build_model",
    "build_dataset",
    "population_gradient",
    "run_sgd",
    "save_trajectory",
    "load_trajectory",
]

_DIVERGENCE_NORM = 1e8
_TRAJECTORY_VERSION = 1


def _check_w(w: np.ndarray, dim: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (dim,):
        raise InputError(f"expected parameter vector of length {dim}, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InputError("parameter vector has nonfinite entries")
    return w


def _check_batch(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise InputError("batch must be a nonempty (n, k) array")
    return samples


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class Quadratic:
    """loss(w, z) = 0.5 (w - z)^T A (w - z); samples are center vectors z."""

    a: np.ndarray
    center_mean: np.ndarray | None = None  # generator mean; enables analytic population gradient

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InputError("A must be square")
        if not np.allclose(a, a.T):
            raise InputError("A must be symmetric")
        if np.linalg.eigvalsh(a)[0] <= 0:
            raise InputError("A must be positive definite")
        object.__setattr__(self, "a", a)
        if self.center_mean is not None:
            object.__setattr__(self, "center_mean", np.asarray(self.center_mean, dtype=float))

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def loss(self, w, samples) -> float:
        w = _check_w(w, self.dim)
        z = _check_batch(samples)
        diff = w[None, :] - z
        return float(0.5 * np.mean(np.einsum("ij,jk,ik->i", diff, self.a, diff)))

    def loss_many(self, ws, samples) -> np.ndarray:
        ws = np.asarray(ws, dtype=float)
        z = _check_batch(samples)
        zbar = z.mean(axis=0)
        zz = float(np.mean(np.einsum("ij,jk,ik->i", z, self.a, z)))
        quad = np.einsum("mj,jk,mk->m", ws, self.a, ws)
        cross = ws @ (self.a @ zbar)
        return 0.5 * (quad - 2.0 * cross + zz)

    def grad(self, w, samples) -> np.ndarray:
        w = _check_w(w, self.dim)
        z = _check_batch(samples)
        return self.a @ (w - z.mean(axis=0))

    def grad_many(self, ws, samples) -> np.ndarray:
        ws = np.asarray(ws, dtype=float)
        z = _check_batch(samples)
        return (ws - z.mean(axis=0)[None, :]) @ self.a

    def hvp(self, w, v, samples) -> np.ndarray:
        _check_w(w, self.dim)
        return self.a @ np.asarray(v, dtype=float)


@dataclass(frozen=True)
class Logistic:
    """l2-regularized logistic regression; sample rows are (features..., label)."""

    dim: int
    lreg: float = 0.0

    def _split(self, samples):
        samples = _check_batch(samples)
        if samples.shape[1] != self.dim + 1:
            raise InputError(f"logistic samples need {self.dim + 1} columns")
        return samples[:, : self.dim], samples[:, self.dim]

    @staticmethod
    def _sigmoid(m):
        out = np.empty_like(m)
        pos = m >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
        e = np.exp(m[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def loss(self, w, samples) -> float:
        w = _check_w(w, self.dim)
        x, y = self._split(samples)
        m = x @ w
        # log(1 + e^m) - y m, computed stably
        ce = np.logaddexp(0.0, m) - y * m
        return float(np.mean(ce) + 0.5 * self.lreg * (w @ w))

    def loss_many(self, ws, samples) -> np.ndarray:
        ws = np.asarray(ws, dtype=float)
        x, y = self._split(samples)
        m = x @ ws.T  # (n, k)
        ce = np.logaddexp(0.0, m) - y[:, None] * m
        return ce.mean(axis=0) + 0.5 * self.lreg * np.sum(ws * ws, axis=1)

    def grad(self, w, samples) -> np.ndarray:
        w = _check_w(w, self.dim)
        x, y = self._split(samples)
        resid = self._sigmoid(x @ w) - y
        return x.T @ resid / x.shape[0] + self.lreg * w

    def grad_many(self, ws, samples) -> np.ndarray:
        ws = np.asarray(ws, dtype=float)
        x, y = self._split(samples)
        resid = self._sigmoid(x @ ws.T) - y[:, None]  # (n, k)
        return resid.T @ x / x.shape[0] + self.lreg * ws

    def hvp(self, w, v, samples) -> np.ndarray:
        w = _check_w(w, self.dim)
        v = np.asarray(v, dtype=float)
        x, y = self._split(samples)
        s = self._sigmoid(x @ w)
        weight = s * (1.0 - s)
        return x.T @ (weight * (x @ v)) / x.shape[0] + self.lreg * v


@dataclass(frozen=True)
class MLP:
    """One-hidden-layer tanh network, scalar output, squared loss.

    Parameters are packed as [W1 (h*p), b1 (h), w2 (h), b2 (1)].
    Sample rows are (inputs..., target).
    """

    in_dim: int
    hidden: int

    @property
    def dim(self) -> int:
        return self.hidden * self.in_dim + 2 * self.hidden + 1

    def _unpack(self, w):
        p, h = self.in_dim, self.hidden
        w1 = w[: h * p].reshape(h, p)
        b1 = w[h * p : h * p + h]
        w2 = w[h * p + h : h * p + 2 * h]
        b2 = w[-1]
        return w1, b1, w2, b2

    def _split(self, samples):
        samples = _check_batch(samples)
        if samples.shape[1] != self.in_dim + 1:
            raise InputError(f"mlp samples need {self.in_dim + 1} columns")
        return samples[:, : self.in_dim], samples[:, self.in_dim]

    def _forward(self, w, x):
        w1, b1, w2, b2 = self._unpack(w)
        a = x @ w1.T + b1  # (n, h)
        z = np.tanh(a)
        f = z @ w2 + b2
        return w1, b1, w2, b2, a, z, f

    def loss(self, w, samples) -> float:
        w = _check_w(w, self.dim)
        x, y = self._split(samples)
        *_, f = self._forward(w, x)
        return float(0.5 * np.mean((f - y) ** 2))

    def loss_many(self, ws, samples) -> np.ndarray:
        ws = np.asarray(ws, dtype=float)
        return np.array([self.loss(w, samples) for w in ws])

    def grad(self, w, samples) -> np.ndarray:
        w = _check_w(w, self.dim)
        x, y = self._split(samples)
        w1, b1, w2, b2, a, z, f = self._forward(w, x)
        n = x.shape[0]
        e = (f - y) / n  # (n,)
        gw2 = z.T @ e
        gb2 = np.sum(e)
        ga = (e[:, None] * w2[None, :]) * (1.0 - z * z)  # (n, h)
        gw1 = ga.T @ x
        gb1 = ga.sum(axis=0)
        return np.concatenate([gw1.ravel(), gb1, gw2, [gb2]])

    def grad_many(self, ws, samples) -> np.ndarray:
        ws = np.asarray(ws, dtype=float)
        return np.stack([self.grad(w, samples) for w in ws])

    def hvp(self, w, v, samples) -> np.ndarray:
        """Exact Hessian-vector product via the forward-over-reverse rule."""
        w = _check_w(w, self.dim)
        v = np.asarray(v, dtype=float)
        x, y = self._split(samples)
        w1, b1, w2, b2, a, z, f = self._forward(w, x)
        v1, c1, v2, c2 = self._unpack(v)
        n = x.shape[0]

        ra = x @ v1.T + c1  # R[a]
        dz = 1.0 - z * z
        rz = dz * ra  # R[z]
        rf = z @ v2 + rz @ w2 + c2  # R[f]

        e = (f - y) / n
        re = rf / n

        u = w2[None, :] * dz  # (n, h), d f / d a
        ru = v2[None, :] * dz + w2[None, :] * (-2.0 * z * rz)
        ga = e[:, None] * u
        rga = re[:, None] * u + e[:, None] * ru

        rgw2 = z.T @ re + rz.T @ e
        rgb2 = np.sum(re)
        rgw1 = rga.T @ x
        rgb1 = rga.sum(axis=0)
        return np.concatenate([rgw1.ravel(), rgb1, rgw2, [rgb2]])


Model = Quadratic | Logistic | MLP


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Dataset:
    """Train and eval samples plus the generator spec that produced them."""

    train: np.ndarray
    eval_samples: np.ndarray
    spec: dict = field(default_factory=dict)


def build_model(model_spec: dict) -> Model:
    kind = model_spec.get("kind")
    if kind == "quadratic":
        d = int(model_spec["dim"])
        a_kind = model_spec.get("a_kind", "identity")
        if a_kind == "identity":
            a = np.eye(d)
        elif a_kind == "random_spd":
            g = rng.stream(int(model_spec.get("a_seed", 0)), 7001)
            m = g.standard_normal((d, d))
            a = m @ m.T / d + np.eye(d)
        else:
            raise InputError(f"unknown a_kind {a_kind!r}")
        mean = model_spec.get("center_mean", 0.0)
        mean_vec = np.full(d, float(mean)) if np.isscalar(mean) else np.asarray(mean, float)
        return Quadratic(a, center_mean=mean_vec)
    if kind == "logistic":
        return Logistic(int(model_spec["dim"]), float(model_spec.get("lreg", 0.0)))
    if kind == "mlp":
        return MLP(int(model_spec["in_dim"]), int(model_spec["hidden"]))
    raise InputError(f"unknown model kind {kind!r}")


def _generate_samples(model_spec: dict, dataset_spec: dict, n: int, g: np.random.Generator):
    kind = model_spec["kind"]
    if kind == "quadratic":
        d = int(model_spec["dim"])
        mean = model_spec.get("center_mean", 0.0)
        mean_vec = np.full(d, float(mean)) if np.isscalar(mean) else np.asarray(mean, float)
        std = float(dataset_spec.get("center_std", 1.0))
        return mean_vec[None, :] + std * g.standard_normal((n, d))
    if kind == "logistic":
        d = int(model_spec["dim"])
        teacher = rng.stream(int(dataset_spec["seed"]), 7500).standard_normal(d)
        x = g.standard_normal((n, d))
        prob = Logistic._sigmoid(x @ teacher)
        y = (g.random(n) < prob).astype(float)
        return np.concatenate([x, y[:, None]], axis=1)
    if kind == "mlp":
        p = int(model_spec["in_dim"])
        h = int(model_spec["hidden"])
        teacher_rng = rng.stream(int(dataset_spec["seed"]), 7600)
        model = MLP(p, h)
        teacher_w = 0.5 * teacher_rng.standard_normal(model.dim)
        x = g.standard_normal((n, p))
        *_, f = model._forward(teacher_w, x)
        noise = float(dataset_spec.get("noise_std", 0.1)) * g.standard_normal(n)
        return np.concatenate([x, (f + noise)[:, None]], axis=1)
    raise InputError(f"unknown model kind {kind!r}")


def build_dataset(model_spec: dict, dataset_spec: dict) -> Dataset:
    """Generate train and eval samples; eval uses an independent stream."""
    seed = int(dataset_spec["seed"])
    n_train = int(dataset_spec.get("n_train", 100))
    n_eval = int(dataset_spec.get("n_eval", n_train))
    train = _generate_samples(model_spec, dataset_spec, n_train, rng.stream(seed, 1))
    eval_samples = _generate_samples(model_spec, dataset_spec, n_eval, rng.stream(seed, 2))
    return Dataset(train=train, eval_samples=eval_samples, spec=dict(dataset_spec))


def population_gradient(model: Model, w: np.ndarray, dataset: Dataset):
    """Analytic population gradient when available, else the eval-batch proxy.

    Returns ``(gradient, is_proxy)``.
    """
    if isinstance(model, Quadratic) and model.center_mean is not None:
        return model.a @ (np.asarray(w, float) - model.center_mean), False
    return model.grad(w, dataset.eval_samples), True


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class StepRecord:
    t: int
    w: np.ndarray
    eta: float
    batch: tuple[int, ...]
    g: np.ndarray
    g_sub: tuple[np.ndarray, ...] | None
    sub_sizes: tuple[int, ...] | None
    loss_train: float
    loss_eval: float


@dataclass(frozen=True)
class Trajectory:
    meta: dict
    steps: tuple[StepRecord, ...]

    @property
    def dim(self) -> int:
        return int(self.meta["d"])

    @property
    def horizon(self) -> int:
        return int(self.meta["T"])

    def final_iterate(self) -> np.ndarray:
        last = self.steps[-1]
        return last.w - last.eta * last.g


def _eta_schedule(eta_spec: dict, t: int) -> float:
    kind = eta_spec.get("kind", "constant")
    eta0 = float(eta_spec.get("eta0", 0.1))
    if kind == "constant":
        return eta0
    if kind == "inv_t":
        return eta0 / t
    raise InputError(f"unknown eta schedule kind {kind!r}")


def run_sgd(config: dict) -> Trajectory:
    """Run vanilla SGD and record the full trajectory.

    Required config keys: ``model``, ``dataset``, and ``sgd`` with
    ``T``, ``eta`` (dict), ``batch``, ``seed``; optional ``subbatch``
    ("none" | "pair" | int K >= 2) and ``replace`` (bool).
    """
    model_spec = config["model"]
    dataset_spec = config["dataset"]
    sgd = config["sgd"]
    model = build_model(model_spec)
    dataset = build_dataset(model_spec, dataset_spec)
    d = model.dim
    T = int(sgd["T"])
    if T < 2:
        raise InputError("sgd.T must be >= 2")
    batch_size = int(sgd.get("batch", len(dataset.train)))
    if not 1 <= batch_size <= len(dataset.train):
        raise InputError("sgd.batch out of range")
    subbatch = sgd.get("subbatch", "none")
    replace = bool(sgd.get("replace", False))
    seed = int(sgd["seed"])
    eta_spec = dict(sgd.get("eta", {"kind": "constant", "eta0": 0.1}))

    init = sgd.get("w1", "zeros")
    if init == "zeros":
        w = np.zeros(d)
    elif init == "gaussian":
        w = rng.stream(seed, 10).standard_normal(d)
    else:
        w = np.asarray(init, dtype=float)
        if w.shape != (d,):
            raise InputError("sgd.w1 has wrong length")

    sampler = rng.stream(seed, 20)
    steps = []
    for t in range(1, T):
        eta_t = _eta_schedule(eta_spec, t)
        if replace:
            idx = sampler.integers(0, len(dataset.train), size=batch_size)
        else:
            idx = sampler.choice(len(dataset.train), size=batch_size, replace=False)
        batch = dataset.train[idx]
        g = model.grad(w, batch)
        g_sub = None
        sub_sizes = None
        if subbatch != "none":
            k = 2 if subbatch == "pair" else int(subbatch)
            if k < 2 or k > batch_size:
                raise InputError("subbatch count must be in [2, batch]")
            bounds = np.linspace(0, batch_size, k + 1).round().astype(int)
            # first split takes ceil(b/2) indices in the pair case
            if k == 2:
                bounds = np.array([0, (batch_size + 1) // 2, batch_size])
            parts = [idx[bounds[i] : bounds[i + 1]] for i in range(k)]
            if any(len(p) == 0 for p in parts):
                raise InputError("subbatch split produced an empty part")
            g_sub = tuple(model.grad(w, dataset.train[p]) for p in parts)
            sub_sizes = tuple(len(p) for p in parts)
        steps.append(
            StepRecord(
                t=t,
                w=w.copy(),
                eta=eta_t,
                batch=tuple(int(i) for i in idx),
                g=g,
                g_sub=g_sub,
                sub_sizes=sub_sizes,
                loss_train=model.loss(w, dataset.train),
                loss_eval=model.loss(w, dataset.eval_samples),
            )
        )
        w = w - eta_t * g
        if not np.all(np.isfinite(w)) or np.linalg.norm(w) > _DIVERGENCE_NORM:
            raise RunError(f"SGD diverged at step {t}")

    meta = {
        "version": _TRAJECTORY_VERSION,
        "d": d,
        "T": T,
        "model": dict(model_spec),
        "dataset": dict(dataset_spec),
        "seed": seed,
        "eta": eta_spec,
        "sgd": {"batch": batch_size, "subbatch": str(subbatch), "replace": replace},
    }
    return Trajectory(meta=meta, steps=tuple(steps))


def save_trajectory(traj: Trajectory, path: str) -> None:
    lines = [_io.dumps(traj.meta)]
    for s in traj.steps:
        rec = {
            "t": s.t,
            "w": s.w,
            "eta": s.eta,
            "batch": list(s.batch),
            "g": s.g,
            "g_sub": [list(g) for g in s.g_sub] if s.g_sub is not None else None,
            "loss_train": s.loss_train,
            "loss_eval": s.loss_eval,
        }
        if s.sub_sizes is not None:
            rec["g_sub_sizes"] = list(s.sub_sizes)
        lines.append(_io.dumps(rec))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_trajectory(path: str) -> Trajectory:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty trajectory file")
    try:
        meta = _io.loads(lines[0])
    except FormatError as exc:
        raise FormatError(f"line 1: {exc}") from exc
    if meta.get("version") != _TRAJECTORY_VERSION:
        raise FormatError(f"unsupported trajectory version {meta.get('version')!r}")
    expected = int(meta["T"]) - 1
    steps = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = _io.loads(line)
        except FormatError as exc:
            raise FormatError(f"line {i}: {exc}") from exc
        required = {"t", "w", "eta", "batch", "g", "g_sub", "loss_train", "loss_eval"}
        if not required.issubset(rec):
            raise FormatError(f"line {i}: missing keys {sorted(required - set(rec))}")
        g_sub = rec["g_sub"]
        steps.append(
            StepRecord(
                t=int(rec["t"]),
                w=np.asarray(rec["w"], dtype=float),
                eta=float(rec["eta"]),
                batch=tuple(int(b) for b in rec["batch"]),
                g=np.asarray(rec["g"], dtype=float),
                g_sub=tuple(np.asarray(g, dtype=float) for g in g_sub) if g_sub is not None else None,
                sub_sizes=tuple(int(x) for x in rec["g_sub_sizes"]) if "g_sub_sizes" in rec else None,
                loss_train=float(rec["loss_train"]),
                loss_eval=float(rec["loss_eval"]),
            )
        )
    if len(steps) != expected:
        raise FormatError(f"expected {expected} step records, found {len(steps)}")
    return Trajectory(meta=meta, steps=tuple(steps))


def trajectory_hash(traj: Trajectory) -> str:
    """Stable content hash used in output metadata."""
    lines = [_io.dumps(traj.meta)]
    for s in traj.steps:
        lines.append(_io.dumps({"t": s.t, "w": s.w, "g": s.g, "eta": s.eta}))
    return _io.sha256_hex("\n".join(lines))


def hash_path(path: str) -> str:
    with open(path, "rb") as fh:
        return _io.sha256_hex(fh.read())
