"""Lp-ball projections, normalized-gradient PGD, and universal perturbations.

The PGD update is ``delta <- P_eps(delta + s * alpha * g / ||g||_p)``
with ``s = +1`` ascending the classification loss (the default: the
attack maximizes loss) or ``s = -1`` for the literal descent form of
the update equation; both directions are one config flag apart.  For
the infinity norm the normalized gradient defaults to ``sign(g)``, the
steepest-ascent direction in that geometry, with the literal
``g / max|g|`` available behind a switch.

A universal perturbation is one (T,F) delta shared across every clip:
each step takes the batch-mean gradient of the loss with respect to
the shared delta, then projects back onto the ball and the mask
support.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .base import BaseEstimator, check_binary_targets
from .container import atomic_write_bytes, read_feature_file, tensor_bytes
from .errors import ConfigurationError, DimensionError, FormatError, ValidationError

__all__ = [
    "NORMS", "project", "normalize_gradient",
    "Mask", "AttackConfig", "Perturbation",
    "pgd_step", "multimodal_pgd_step",
    "train_universal_perturbation", "apply_perturbation",
    "save_perturbation", "load_perturbation",
    "UniversalPerturbation",
]

NORMS = ("l1", "l2", "linf")


def _check_norm(norm):
    if norm not in NORMS:
        raise ConfigurationError(f"norm must be one of {NORMS}, got {norm!r}")
    return norm


def project(v, norm, eps):
    """Euclidean projection of v onto the Lp ball of radius eps.

    linf clamps elementwise; l2 rescales radially when outside; l1 uses
    the sort-and-threshold rule: soft-threshold by the unique theta >= 0
    with sum(max(|v_i| - theta, 0)) == eps whenever ||v||_1 > eps.
    """
    _check_norm(norm)
    eps = float(eps)
    if eps <= 0.0:
        raise ConfigurationError(f"projection radius must be positive, got {eps}")
    v = np.asarray(v, dtype=np.float64)
    if norm == "linf":
        return np.clip(v, -eps, eps)
    if norm == "l2":
        n = float(np.sqrt(np.sum(v * v)))
        if n <= eps:
            return v.copy()
        return v * (eps / n)
    mags = np.abs(v).reshape(-1)
    if mags.sum() <= eps:
        return v.copy()
    u = np.sort(mags)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, u.size + 1)
    rho = int(np.max(np.nonzero(u - (css - eps) / j > 0.0)[0])) + 1
    theta = (css[rho - 1] - eps) / rho
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def normalize_gradient(g, norm, linf_mode="sign"):
    """Scale a gradient to unit Lp norm; zero gradients map to zeros."""
    _check_norm(norm)
    g = np.asarray(g, dtype=np.float64)
    if norm == "linf":
        if linf_mode == "sign":
            return np.sign(g)
        peak = float(np.max(np.abs(g)))
        return np.zeros_like(g) if peak == 0.0 else g / peak
    n = float(np.abs(g).sum()) if norm == "l1" else float(np.sqrt(np.sum(g * g)))
    if n == 0.0:
        return np.zeros_like(g)
    return g / n


@dataclass(frozen=True)
class Mask:
    """Optional frequency/temporal support constraint, half-open ranges."""
    freq: tuple | None = None     # (f_lo, f_hi) over mel bins
    time: tuple | None = None     # (t_lo, t_hi) over frames

    def validate(self, shape):
        t, f = shape
        for rng, extent, what in ((self.freq, f, "frequency"), (self.time, t, "temporal")):
            if rng is None:
                continue
            lo, hi = rng
            if not (0 <= lo < hi <= extent):
                raise ValidationError(
                    f"{what} mask [{lo},{hi}) outside the feature geometry "
                    f"[0,{extent})")

    def array(self, shape):
        """Dense 0/1 support over a (T,F) grid; all-ones when unconstrained."""
        self.validate(shape)
        m = np.zeros(shape)
        t_lo, t_hi = self.time if self.time else (0, shape[0])
        f_lo, f_hi = self.freq if self.freq else (0, shape[1])
        m[t_lo:t_hi, f_lo:f_hi] = 1.0
        return m

    def to_dict(self):
        return {"f_lo": None if self.freq is None else self.freq[0],
                "f_hi": None if self.freq is None else self.freq[1],
                "t_lo": None if self.time is None else self.time[0],
                "t_hi": None if self.time is None else self.time[1]}

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return None
        freq = None if d.get("f_lo") is None else (int(d["f_lo"]), int(d["f_hi"]))
        time = None if d.get("t_lo") is None else (int(d["t_lo"]), int(d["t_hi"]))
        if freq is None and time is None:
            return None
        return cls(freq=freq, time=time)


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "l2"
    epsilon: float = 0.3
    alpha: float = 0.01
    steps: int | None = None           # None -> ceil(epsilon / alpha)
    mask: Mask | None = None
    seed: int = 0
    direction: str = "ascent"          # ascent | descent
    linf_normalize: str = "sign"       # sign | scale
    random_start: bool = False
    batch_size: int = 32

    def __post_init__(self):
        _check_norm(self.norm)
        if self.epsilon <= 0.0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if self.alpha <= 0.0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.steps is not None and self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if self.direction not in ("ascent", "descent"):
            raise ConfigurationError(f"direction must be ascent or descent, got {self.direction!r}")
        if self.linf_normalize not in ("sign", "scale"):
            raise ConfigurationError("linf_normalize must be 'sign' or 'scale'")

    def resolved_steps(self):
        if self.steps is not None:
            return int(self.steps)
        return max(1, math.ceil(self.epsilon / self.alpha))

    def to_dict(self):
        return {"norm": self.norm, "epsilon": self.epsilon, "alpha": self.alpha,
                "steps": self.resolved_steps(),
                "mask": None if self.mask is None else self.mask.to_dict(),
                "seed": self.seed, "direction": self.direction,
                "linf_normalize": self.linf_normalize,
                "random_start": self.random_start, "batch_size": self.batch_size}


def pgd_step(delta, grad, cfg):
    """One projected step: mask, normalize, step, project, re-mask."""
    delta = np.asarray(delta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if delta.shape != grad.shape:
        raise DimensionError(
            f"delta shape {delta.shape} does not match gradient shape {grad.shape}")
    support = None
    if cfg.mask is not None:
        support = cfg.mask.array(delta.shape)
        grad = grad * support
    direction = 1.0 if cfg.direction == "ascent" else -1.0
    step = direction * cfg.alpha * normalize_gradient(grad, cfg.norm, cfg.linf_normalize)
    out = project(delta + step, cfg.norm, cfg.epsilon)
    if support is not None:
        out = out * support
    return out


def multimodal_pgd_step(delta_audio, grad_audio, cfg):
    """Identical update rule to :func:`pgd_step`.

    The distinction is the gradient's provenance: ``grad_audio`` must be
    computed through the fused model with the video input held
    constant, so the perturbation touches the video pathway only via
    the model's output.
    """
    return pgd_step(delta_audio, grad_audio, cfg)


@dataclass
class Perturbation:
    """A universal delta plus the constraints and provenance it was trained under."""
    delta: np.ndarray
    config: AttackConfig
    provenance: dict

    def validate(self):
        norm = self.config.norm
        d = self.delta
        value = {"l1": np.abs(d).sum(),
                 "l2": np.sqrt(np.sum(d * d)),
                 "linf": np.abs(d).max() if d.size else 0.0}[norm]
        if value > self.config.epsilon + 1e-9:
            raise ValidationError(
                f"perturbation {norm} norm {value} exceeds epsilon {self.config.epsilon}")
        if self.config.mask is not None:
            outside = 1.0 - self.config.mask.array(d.shape)
            if np.any(d * outside != 0.0):
                raise ValidationError("perturbation is nonzero outside its mask support")
        return self


def _data_digest(audio, labels):
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(audio).tobytes())
    h.update(np.ascontiguousarray(labels).tobytes())
    return h.hexdigest()


def train_universal_perturbation(model, audio, labels, cfg, video=None,
                                 provenance=None, step_hook=None):
    """Train one shared delta over a training split.

    Starting from zero (or a seeded random point inside the ball), each
    update takes the batch-mean gradient of the loss w.r.t. the shared
    delta over a seeded shuffled batch and applies one PGD step.  Runs
    exactly ``cfg.resolved_steps()`` updates.
    """
    audio = np.asarray(audio)
    labels = check_binary_targets(labels)
    if audio.ndim != 3 or audio.shape[0] == 0:
        raise ValidationError("universal perturbation training requires a non-empty "
                              "(clips, frames, bins) feature array")
    shape = audio.shape[1:]
    if cfg.mask is not None:
        cfg.mask.validate(shape)
    rng = np.random.default_rng(cfg.seed)
    if cfg.random_start:
        delta = project(rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape),
                        cfg.norm, cfg.epsilon)
        if cfg.mask is not None:
            delta = delta * cfg.mask.array(shape)
    else:
        delta = np.zeros(shape)
    n = audio.shape[0]
    steps = cfg.resolved_steps() if cfg.steps is None else int(cfg.steps)
    order = []
    for step in range(steps):
        if not order:
            order = list(rng.permutation(n))
        take = min(cfg.batch_size, len(order))
        idx = np.array(order[:take])
        order = order[take:]
        batch_video = None if video is None else np.asarray(video[idx], dtype=np.float64)
        _, grad = model.loss_and_input_grad(
            np.asarray(audio[idx], dtype=np.float64), labels[idx],
            video=batch_video, delta=delta)
        delta = pgd_step(delta, grad, cfg)
        if step_hook is not None:
            step_hook(step, delta)
    prov = {"manifest_hash": provenance or _data_digest(audio, labels),
            "steps_run": steps, "seed": cfg.seed}
    return Perturbation(delta=delta, config=cfg, provenance=prov).validate()


def apply_perturbation(features, perturbation):
    """Elementwise sum, no clipping: the log-mel domain is unbounded."""
    delta = getattr(perturbation, "delta", perturbation)
    features = np.asarray(features, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if features.shape[-2:] != delta.shape:
        raise DimensionError(
            f"features shape {features.shape} does not match perturbation "
            f"shape {delta.shape}")
    return features + delta


def save_perturbation(path, perturbation):
    """AVFB delta (float64) plus a JSON sidecar with constraints and provenance."""
    path = Path(path)
    perturbation.validate()
    atomic_write_bytes(path, tensor_bytes(perturbation.delta, dtype="float64"))
    cfg = perturbation.config
    sidecar = {"norm": cfg.norm, "epsilon": cfg.epsilon, "alpha": cfg.alpha,
               "steps": perturbation.provenance.get("steps_run", cfg.resolved_steps()),
               "mask": Mask().to_dict() if cfg.mask is None else cfg.mask.to_dict(),
               "manifest_hash": perturbation.provenance.get("manifest_hash"),
               "seed": cfg.seed, "direction": cfg.direction}
    atomic_write_bytes(path.with_suffix(".json"),
                       (json.dumps(sidecar, sort_keys=True, indent=1) + "\n").encode())


def load_perturbation(path):
    path = Path(path)
    delta = read_feature_file(path).astype(np.float64)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise FormatError(f"perturbation sidecar {sidecar_path} is missing")
    sidecar = json.loads(sidecar_path.read_text())
    cfg = AttackConfig(norm=sidecar["norm"], epsilon=sidecar["epsilon"],
                       alpha=sidecar["alpha"], steps=sidecar["steps"],
                       mask=Mask.from_dict(sidecar.get("mask")),
                       seed=sidecar.get("seed", 0),
                       direction=sidecar.get("direction", "ascent"))
    prov = {"manifest_hash": sidecar.get("manifest_hash"),
            "steps_run": sidecar["steps"], "seed": sidecar.get("seed", 0)}
    return Perturbation(delta=delta, config=cfg, provenance=prov).validate()


class UniversalPerturbation(BaseEstimator):
    """Estimator-style wrapper: fit learns the delta, transform applies it.

    ``fit(model, X, y, video=...)`` trains the universal delta against a
    trained victim model; ``transform(X)`` adds it to every clip.
    """

    def __init__(self, norm="l2", epsilon=0.3, alpha=0.01, steps=None,
                 freq_mask=None, time_mask=None, seed=0, direction="ascent",
                 linf_normalize="sign", random_start=False, batch_size=32):
        self.norm = norm
        self.epsilon = epsilon
        self.alpha = alpha
        self.steps = steps
        self.freq_mask = freq_mask
        self.time_mask = time_mask
        self.seed = seed
        self.direction = direction
        self.linf_normalize = linf_normalize
        self.random_start = random_start
        self.batch_size = batch_size

    def _config(self):
        mask = None
        if self.freq_mask is not None or self.time_mask is not None:
            mask = Mask(freq=None if self.freq_mask is None else tuple(self.freq_mask),
                        time=None if self.time_mask is None else tuple(self.time_mask))
        return AttackConfig(norm=self.norm, epsilon=self.epsilon, alpha=self.alpha,
                            steps=self.steps, mask=mask, seed=self.seed,
                            direction=self.direction,
                            linf_normalize=self.linf_normalize,
                            random_start=self.random_start,
                            batch_size=self.batch_size)

    def fit(self, model, X, y, video=None, provenance=None):
        self.perturbation_ = train_universal_perturbation(
            model, X, y, self._config(), video=video, provenance=provenance)
        self.delta_ = self.perturbation_.delta
        self.n_steps_ = self.perturbation_.provenance["steps_run"]
        return self

    def transform(self, X):
        return apply_perturbation(X, self.perturbation_)
