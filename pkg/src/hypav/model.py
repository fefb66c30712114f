"""Two-branch audio-visual surrogate network, training loop and GZSL metrics.

Data flow per sample::

    v, a (512) --tanh encoders--> phi_v, phi_a (300)
                --gated cross-fusion--> phi_v_att, phi_a_att (300)
                --linear projectors--> theta_v, theta_a (64)
    w (512, per class) --linear word projector--> theta_w (64)

Classification scores are cosines between ``(theta_v + theta_a) / 2`` and
each ``theta_w``, divided by a temperature. The fusion step is
``phi_v_att = alpha_v * phi_v + (1 - alpha_v) * phi_a @ fuse_av`` with
``alpha_v = sigmoid(gate_v)`` (and symmetrically for audio).

All gradients are written by hand; :func:`loss_and_grads` returns the total
loss and the gradient of every trainable tensor.
"""

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import alignment
from .curvature import CurvatureMlp, adapt_curvatures, adapter_vjp, concat_features
from .errors import ConfigError, DataError, NumericalDomainError
from .hyperbolicity import delta_rel

log = logging.getLogger(__name__)

MODES = ("baseline", "hyper-alignment", "hyper-single", "hyper-multiple")
ALIGN_AT = ("phi", "phi_att", "theta")

_ENCODER_KEYS = ("enc_v_w", "enc_v_b", "enc_a_w", "enc_a_b")
_HEAD_KEYS = ("head_w", "head_b")


@dataclass
class ModelParams:
    """Trainable tensors plus the fixed temperature and initial curvature."""

    tensors: dict
    tau: float = 0.1
    c0: float = -0.4

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("temperature must be positive")
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NumericalDomainError(f"parameter {name} is not finite")

    def __getitem__(self, key):
        return self.tensors[key]

    @property
    def dims(self):
        t = self.tensors
        return t["enc_v_w"].shape[0], t["enc_v_w"].shape[1], t["proj_v_w"].shape[1], t["word_w"].shape[0]

    @property
    def head(self):
        if "head_w" not in self.tensors:
            return None
        return CurvatureMlp(self.tensors["head_w"], self.tensors["head_b"], self.c0)

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.tau, self.c0)

    @classmethod
    def init(cls, in_dim=512, hid_dim=300, emb_dim=64, word_dim=512, seed=0, tau=0.1,
             num_curvatures=0, head_in=None, c0=-0.4, head_init="uniform", head_seed=None):
        """Fan-in uniform weights, zero biases and gates.

        The curvature head, when requested, draws from its own seed so that
        the shared network tensors do not depend on whether a head exists.
        """
        rng = np.random.default_rng(seed)

        def uni(fan_in, shape):
            b = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-b, b, size=shape)

        t = {
            "enc_v_w": uni(in_dim, (in_dim, hid_dim)),
            "enc_v_b": np.zeros(hid_dim),
            "enc_a_w": uni(in_dim, (in_dim, hid_dim)),
            "enc_a_b": np.zeros(hid_dim),
            "fuse_av": uni(hid_dim, (hid_dim, hid_dim)),
            "fuse_va": uni(hid_dim, (hid_dim, hid_dim)),
            "gate_v": np.zeros(()),
            "gate_a": np.zeros(()),
            "proj_v_w": uni(hid_dim, (hid_dim, emb_dim)),
            "proj_v_b": np.zeros(emb_dim),
            "proj_a_w": uni(hid_dim, (hid_dim, emb_dim)),
            "proj_a_b": np.zeros(emb_dim),
            "word_w": uni(word_dim, (word_dim, emb_dim)),
            "word_b": np.zeros(emb_dim),
        }
        if num_curvatures:
            head_in = head_in or 2 * hid_dim
            if head_init == "zeros":
                head = CurvatureMlp.zeros(head_in, num_curvatures, c0)
            else:
                head = CurvatureMlp.init(head_in, num_curvatures, c0, seed if head_seed is None else head_seed)
            t["head_w"], t["head_b"] = head.weights, head.bias
        return cls(t, tau, c0)


@dataclass
class Forward:
    phi_v: np.ndarray
    phi_a: np.ndarray
    phi_v_att: np.ndarray
    phi_a_att: np.ndarray
    theta_v: np.ndarray
    theta_a: np.ndarray
    theta_w: np.ndarray

    def aligned(self, where):
        if where == "phi":
            return self.phi_v, self.phi_a
        if where == "phi_att":
            return self.phi_v_att, self.phi_a_att
        if where == "theta":
            return self.theta_v, self.theta_a
        raise ConfigError(f"unknown alignment location {where!r}")


def forward(v, a, w_all, params):
    t = params.tensors
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    w_all = np.asarray(w_all, dtype=np.float64)
    in_dim = t["enc_v_w"].shape[0]
    if v.ndim != 2 or v.shape != a.shape or v.shape[1] != in_dim:
        raise DataError(f"expected matching (N, {in_dim}) inputs, got {v.shape} and {a.shape}")
    if w_all.ndim != 2 or w_all.shape[1] != t["word_w"].shape[0]:
        raise DataError(f"word vectors have shape {w_all.shape}")
    phi_v = np.tanh(v @ t["enc_v_w"] + t["enc_v_b"])
    phi_a = np.tanh(a @ t["enc_a_w"] + t["enc_a_b"])
    al_v = expit(t["gate_v"])
    al_a = expit(t["gate_a"])
    phi_v_att = al_v * phi_v + (1.0 - al_v) * (phi_a @ t["fuse_av"])
    phi_a_att = al_a * phi_a + (1.0 - al_a) * (phi_v @ t["fuse_va"])
    theta_v = phi_v_att @ t["proj_v_w"] + t["proj_v_b"]
    theta_a = phi_a_att @ t["proj_a_w"] + t["proj_a_b"]
    theta_w = w_all @ t["word_w"] + t["word_b"]
    return Forward(phi_v, phi_a, phi_v_att, phi_a_att, theta_v, theta_a, theta_w)


def _unit(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    nz = n > 0
    safe = np.where(nz, n, 1.0)
    return np.where(nz, x / safe, 0.0), safe, nz


def _unit_vjp(u, n, nz, gu):
    return np.where(nz, (gu - u * np.sum(u * gu, axis=1, keepdims=True)) / n, 0.0)


def class_scores(theta_v, theta_a, theta_w, tau=0.1, score="cosine"):
    """Logits of every sample against every class embedding."""
    z = 0.5 * (theta_v + theta_a)
    if score == "cosine":
        uz, _, _ = _unit(z)
        uw, _, _ = _unit(theta_w)
        return (uz @ uw.T) / tau
    if score == "neg-sqdist":
        return -(np.sum(z * z, 1)[:, None] + np.sum(theta_w * theta_w, 1)[None, :] - 2 * z @ theta_w.T)
    raise ConfigError(f"unknown score {score!r}")


def base_loss(theta_v, theta_a, theta_w, labels, tau=0.1):
    """Cross-entropy of temperature-scaled cosine logits."""
    logits = class_scores(theta_v, theta_a, theta_w, tau)
    labels = np.asarray(labels)
    lse = logsumexp(logits, axis=1)
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def base_loss_vjp(theta_v, theta_a, theta_w, labels, tau=0.1, cotangent=1.0):
    """Returns ``(grad_theta_v, grad_theta_a, grad_theta_w)``."""
    labels = np.asarray(labels)
    n = len(labels)
    z = 0.5 * (theta_v + theta_a)
    uz, nzn, nzm = _unit(z)
    uw, nwn, nwm = _unit(theta_w)
    logits = (uz @ uw.T) / tau
    p = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    p[np.arange(n), labels] -= 1.0
    g_logits = p * (cotangent / n) / tau
    g_uz = g_logits @ uw
    g_uw = g_logits.T @ uz
    g_z = _unit_vjp(uz, nzn, nzm, g_uz)
    g_w = _unit_vjp(uw, nwn, nwm, g_uw)
    return 0.5 * g_z, 0.5 * g_z, g_w


# -- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    mode: str = "hyper-multiple"
    space: str = "hyperbolic"
    kernel: str = "neg-geodesic-distance"
    curvature: float = -0.2
    c0: float = -0.4
    num_curvatures: int = 2
    geometries: str = None
    align_at: str = "phi"
    align_weight: float = 1.0
    lr: float = 0.05
    batch_size: int = 64
    epochs: int = 30
    tau: float = 0.1
    xi: float = 1e-5
    score: str = "cosine"
    head_init: str = "uniform"
    hid_dim: int = 300
    emb_dim: int = 64
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.align_at not in ALIGN_AT:
            raise ConfigError(f"unknown alignment location {self.align_at!r}")
        if self.mode != "hyper-multiple":
            self.num_curvatures = 1
        if self.num_curvatures < 1:
            raise ConfigError("num_curvatures must be >= 1")
        if self.space == "spherical" and self.mode == "hyper-alignment" and not self.curvature > 0:
            raise ConfigError("spherical alignment needs a positive curvature")
        if self.space == "hyperbolic" and self.mode == "hyper-alignment" and not self.curvature < 0:
            raise ConfigError("hyperbolic alignment needs a negative curvature")
        if not self.c0 < 0:
            raise ConfigError("c0 must be negative")
        if self.lr <= 0 or self.batch_size < 2 or self.epochs < 0:
            raise ConfigError("lr > 0, batch_size >= 2 and epochs >= 0 are required")
        if self.score not in ("cosine", "neg-sqdist"):
            raise ConfigError(f"unknown score {self.score!r}")
        if self.head_init not in ("uniform", "zeros"):
            raise ConfigError(f"unknown head_init {self.head_init!r}")
        self.alignment_config()

    @property
    def adaptive(self):
        return self.mode in ("hyper-single", "hyper-multiple")

    def alignment_config(self):
        if self.mode == "baseline":
            return None
        curvature_mode = {
            "hyper-alignment": "fixed",
            "hyper-single": "single-adaptive",
            "hyper-multiple": "multi-adaptive",
        }[self.mode]
        fixed = self.curvature if self.mode == "hyper-alignment" else -0.2
        if self.space == "euclidean" and self.mode == "hyper-alignment":
            fixed = 0.0
        return alignment.AlignmentConfig(
            kernel=self.kernel,
            curvature_mode=curvature_mode,
            fixed_curvature=fixed,
            num_curvatures=self.num_curvatures,
            space=self.space,
            xi=self.xi,
            geometries=self.geometries,
        )

    def to_dict(self):
        return asdict(self)


def _clamp_curvatures(cs):
    """Keep adaptive curvatures at |c| >= 1e-6; clamped entries get zero gradient."""
    cs = np.asarray(cs, dtype=np.float64)
    clamped = cs > -1e-6
    return np.where(clamped, -1e-6, cs), ~clamped


def batch_curvatures(fw, params, cfg):
    """Curvatures used for the alignment term of one forward pass."""
    if cfg.mode == "baseline":
        return np.zeros(0)
    if cfg.mode == "hyper-alignment":
        return np.array([cfg.alignment_config().fixed_curvature])
    x_v, x_a = fw.aligned(cfg.align_at)
    return adapt_curvatures(concat_features(x_v, x_a), params.head)


def _backward_network(params, v, a, w_all, fw, g):
    """Backprop cotangents on intermediate features into parameter gradients."""
    t = params.tensors
    al_v = expit(t["gate_v"])
    al_a = expit(t["gate_a"])
    grads = {}
    grads["proj_v_w"] = fw.phi_v_att.T @ g["theta_v"]
    grads["proj_v_b"] = g["theta_v"].sum(0)
    grads["proj_a_w"] = fw.phi_a_att.T @ g["theta_a"]
    grads["proj_a_b"] = g["theta_a"].sum(0)
    grads["word_w"] = w_all.T @ g["theta_w"]
    grads["word_b"] = g["theta_w"].sum(0)

    g_vatt = g["phi_v_att"] + g["theta_v"] @ t["proj_v_w"].T
    g_aatt = g["phi_a_att"] + g["theta_a"] @ t["proj_a_w"].T
    mixed_v = fw.phi_a @ t["fuse_av"]
    mixed_a = fw.phi_v @ t["fuse_va"]
    grads["gate_v"] = np.asarray(np.sum(g_vatt * (fw.phi_v - mixed_v)) * al_v * (1 - al_v))
    grads["gate_a"] = np.asarray(np.sum(g_aatt * (fw.phi_a - mixed_a)) * al_a * (1 - al_a))
    grads["fuse_av"] = (1 - al_v) * fw.phi_a.T @ g_vatt
    grads["fuse_va"] = (1 - al_a) * fw.phi_v.T @ g_aatt
    g_phi_v = g["phi_v"] + al_v * g_vatt + (1 - al_a) * g_aatt @ t["fuse_va"].T
    g_phi_a = g["phi_a"] + al_a * g_aatt + (1 - al_v) * g_vatt @ t["fuse_av"].T

    g_hv = g_phi_v * (1.0 - fw.phi_v**2)
    g_ha = g_phi_a * (1.0 - fw.phi_a**2)
    grads["enc_v_w"] = v.T @ g_hv
    grads["enc_v_b"] = g_hv.sum(0)
    grads["enc_a_w"] = a.T @ g_ha
    grads["enc_a_b"] = g_ha.sum(0)
    return grads


def loss_and_grads(params, v, a, w_all, labels, cfg, need_align_grad=True):
    """Total loss of one batch and gradients for every trainable tensor.

    Returns ``(info, grads)`` where ``info`` holds ``base``, ``align``,
    ``total`` and the ``curvatures`` used.
    """
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    w_all = np.asarray(w_all, dtype=np.float64)
    fw = forward(v, a, w_all, params)
    base = base_loss(fw.theta_v, fw.theta_a, fw.theta_w, labels, params.tau)
    gtv, gta, gtw = base_loss_vjp(fw.theta_v, fw.theta_a, fw.theta_w, labels, params.tau)
    zeros_like = {k: np.zeros_like(getattr(fw, k)) for k in ("phi_v", "phi_a", "phi_v_att", "phi_a_att")}
    g = dict(zeros_like, theta_v=gtv, theta_a=gta, theta_w=gtw)

    info = {"base": base, "align": None, "curvatures": []}
    head_grads = {}
    if cfg.mode != "baseline":
        acfg = cfg.alignment_config()
        x_v, x_a = fw.aligned(cfg.align_at)
        raw = batch_curvatures(fw, params, cfg)
        cs, live = _clamp_curvatures(raw) if cfg.adaptive else (raw, np.ones(len(raw), bool))
        align = alignment.multi_curvature_loss(x_v, x_a, cs, acfg)
        info["align"] = align
        info["curvatures"] = [float(c) for c in cs]
        if need_align_grad and cfg.align_weight != 0.0:
            gxv, gxa, gcs = alignment.loss_vjp(x_v, x_a, cs, acfg, cfg.align_weight)
            if cfg.adaptive:
                gw, gb, gva = adapter_vjp(concat_features(x_v, x_a), params.head, gcs * live)
                head_grads = {"head_w": gw, "head_b": gb}
                gxv = gxv + gva[:, : x_v.shape[1]]
                gxa = gxa + gva[:, x_v.shape[1] :]
            kv, ka = {"phi": ("phi_v", "phi_a"), "phi_att": ("phi_v_att", "phi_a_att"),
                      "theta": ("theta_v", "theta_a")}[cfg.align_at]
            g[kv] = g[kv] + gxv
            g[ka] = g[ka] + gxa
    info["total"] = alignment.total_loss(base, info["align"] or 0.0, cfg.align_weight)

    grads = _backward_network(params, v, a, w_all, fw, g)
    for k in _HEAD_KEYS:
        if k in params.tensors:
            grads[k] = head_grads.get(k, np.zeros_like(params.tensors[k]))
    return info, grads


# -- evaluation ---------------------------------------------------------------


@dataclass
class GzslReport:
    S: float = None
    U: float = None
    HM: float = 0.0
    ZSL: float = None

    def to_dict(self):
        return asdict(self)


def harmonic_mean(s, u):
    """HM = 2US / (U + S), zero when both are zero."""
    if s < 0 or u < 0:
        raise ValueError("accuracies must be non-negative")
    if s + u == 0:
        return 0.0
    # Grouped so that HM(x, x) returns x exactly.
    return u * (s / ((s + u) / 2.0))


def _mean_per_class_accuracy(labels, preds, classes):
    accs = [np.mean(preds[labels == c] == c) for c in classes if np.any(labels == c)]
    return 100.0 * float(np.mean(accs)) if accs else None


def gzsl_report(scores, labels, seen):
    """Metrics from a score matrix (samples x all classes).

    S and U are mean per-class accuracies of the argmax over the joint label
    space; ZSL restricts the argmax to unseen classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    seen = np.asarray(seen, dtype=bool)
    seen_cls = np.flatnonzero(seen)
    unseen_cls = np.flatnonzero(~seen)
    preds = scores.argmax(axis=1)
    s = _mean_per_class_accuracy(labels, preds, seen_cls)
    u = _mean_per_class_accuracy(labels, preds, unseen_cls)
    zsl = None
    if len(unseen_cls):
        zpreds = unseen_cls[scores[:, unseen_cls].argmax(axis=1)]
        zsl = _mean_per_class_accuracy(labels, zpreds, unseen_cls)
    if s is None or u is None:
        warnings.warn("test split lacks seen or unseen samples; HM reported as 0", RuntimeWarning, stacklevel=2)
        hm = 0.0
    else:
        hm = harmonic_mean(s, u)
    return GzslReport(s, u, hm, zsl)


def embed(params, bundle, rows=None):
    rows = np.arange(len(bundle.labels)) if rows is None else rows
    with np.errstate(over="ignore", invalid="ignore"):
        fw = forward(bundle.video[rows], bundle.audio[rows], bundle.words, params)
    for name in ("theta_v", "theta_a", "theta_w"):
        if not np.all(np.isfinite(getattr(fw, name))):
            raise NumericalDomainError(f"{name} is not finite; parameters have diverged")
    return fw


def evaluate_gzsl(params, bundle, score="cosine"):
    """GZSL metrics on the bundle's test rows."""
    rows = bundle.rows("test")
    if len(rows) == 0:
        raise DataError("dataset has no test rows")
    fw = embed(params, bundle, rows)
    scores = class_scores(fw.theta_v, fw.theta_a, fw.theta_w, params.tau, score)
    return gzsl_report(scores, bundle.labels[rows], bundle.seen)


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)


def train(bundle, cfg, seed=None):
    """Plain SGD on the seen-class training rows.

    Returns the final parameters and one log record per epoch (epoch 0 is
    the state before any update).
    """
    seed = cfg.seed if seed is None else seed
    train_rows = bundle.rows("train")
    if len(train_rows) == 0:
        raise DataError("dataset has no training rows")
    seen_cls = np.flatnonzero(bundle.seen)
    if np.any(~bundle.seen[bundle.labels[train_rows]]):
        raise DataError("training split contains unseen-class samples")
    remap = -np.ones(bundle.num_classes, dtype=np.int64)
    remap[seen_cls] = np.arange(len(seen_cls))
    words_seen = np.asarray(bundle.words[seen_cls], dtype=np.float64)

    init_seq, head_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(3)
    in_dim = bundle.video.shape[1]
    loc_dim = {"phi": cfg.hid_dim, "phi_att": cfg.hid_dim, "theta": cfg.emb_dim}[cfg.align_at]
    params = ModelParams.init(
        in_dim, cfg.hid_dim, cfg.emb_dim, bundle.words.shape[1], seed=init_seq, tau=cfg.tau,
        num_curvatures=cfg.num_curvatures if cfg.adaptive else 0, head_in=2 * loc_dim,
        c0=cfg.c0, head_init=cfg.head_init, head_seed=head_seq,
    )
    rng = np.random.default_rng(shuffle_seq)
    video = np.asarray(bundle.video, dtype=np.float64)
    audio = np.asarray(bundle.audio, dtype=np.float64)

    def record(epoch, base, align, total, curv):
        rec = {"epoch": epoch, "base_loss": base, "align_loss": align, "total_loss": total, "curvatures": curv}
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            rec.update(evaluate_gzsl(params, bundle, cfg.score).to_dict())
        return rec

    history = []
    probe = train_rows[: cfg.batch_size]
    info, _ = loss_and_grads(params, video[probe], audio[probe], words_seen,
                             remap[bundle.labels[probe]], cfg, need_align_grad=False)
    history.append(record(0, info["base"], info["align"], info["total"], info["curvatures"]))

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_rows)
        sums = {"base": 0.0, "align": 0.0, "total": 0.0}
        steps = 0
        curv = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            lab = remap[bundle.labels[idx]]
            if np.any(lab < 0):
                raise DataError("unseen-class sample in a training batch")
            info, grads = loss_and_grads(params, video[idx], audio[idx], words_seen, lab, cfg)
            if not np.isfinite(info["total"]):
                raise NumericalDomainError(
                    f"non-finite loss at epoch {epoch}, step {steps}: base={info['base']}, align={info['align']}"
                )
            for k, gk in grads.items():
                params.tensors[k] = np.asarray(params.tensors[k] - cfg.lr * gk)
                if not np.all(np.isfinite(params.tensors[k])):
                    raise NumericalDomainError(f"parameter {k} diverged at epoch {epoch}, step {steps}")
            sums["base"] += info["base"]
            sums["align"] += info["align"] or 0.0
            sums["total"] += info["total"]
            curv = info["curvatures"]
            steps += 1
        means = {k: v / max(steps, 1) for k, v in sums.items()}
        rec = record(epoch, means["base"], means["align"] if cfg.mode != "baseline" else None, means["total"], curv)
        log.debug("epoch %d: %s", epoch, rec)
        history.append(rec)
    return TrainResult(params, history)


def embedding_delta_rel(params, bundle, feature="theta_v", metric="euclidean", c=None):
    """delta_rel of one embedding over the test rows."""
    fw = embed(params, bundle, bundle.rows("test"))
    return delta_rel(getattr(fw, feature), metric, c)
