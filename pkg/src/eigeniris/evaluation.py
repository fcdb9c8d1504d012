"""Verification protocol, error rates and trained score-level fusion.

All rate computations first map scores so that higher means more genuine
(Hamming distances are negated). At threshold ``t`` an impostor is falsely
accepted when its score is ``>= t`` and a genuine trial is falsely rejected
when its score is ``< t``.
"""
from __future__ import annotations

import enum
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import FusionTrainingError, InvalidArgumentError


class Polarity(enum.Enum):
    LOWER_IS_BETTER = "lower"
    HIGHER_IS_BETTER = "higher"

    @property
    def sign(self) -> float:
        return -1.0 if self is Polarity.LOWER_IS_BETTER else 1.0


@dataclass(frozen=True, eq=False)
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    polarity: Polarity = Polarity.HIGHER_IS_BETTER
    matcher: str = ""
    factor: int = 0
    scenario: int = 0
    enhancement: str = "none"
    reconstruction: str = ""

    def __post_init__(self):
        for name in ("genuine", "impostor"):
            arr = np.array(getattr(self, name), dtype=np.float64).ravel()
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"{name} scores must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """(genuine, impostor) mapped so that higher is more genuine."""
        s = self.polarity.sign
        return s * self.genuine, s * self.impostor

    def require_nonempty(self):
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise InvalidArgumentError("both genuine and impostor score lists must be non-empty")


# --- protocol ----------------------------------------------------------------

class Trial(NamedTuple):
    pair_id: int
    user_a: str
    img_a: str
    user_b: str
    img_b: str
    label: str  # "G" or "I"


def group_by_user(annotations) -> dict[str, list[str]]:
    """Image ids per user, users and images in lexicographic order."""
    users = defaultdict(list)
    for a in annotations:
        users[a.user].append(a.image_id)
    return {u: sorted(users[u]) for u in sorted(users)}


def build_protocol(annotations) -> list[Trial]:
    """Genuine trials are all unordered same-user pairs. Impostor trials pair
    the first image of each user with the second image of every other user
    that has at least two images."""
    users = group_by_user(annotations)
    trials = []
    for u, imgs in users.items():
        for a, b in itertools.combinations(imgs, 2):
            trials.append((u, a, u, b, "G"))
    second = [v for v, imgs in users.items() if len(imgs) >= 2]
    for u, imgs in users.items():
        for v in second:
            if v != u:
                trials.append((u, imgs[0], v, users[v][1], "I"))
    return [Trial(i, *t) for i, t in enumerate(trials)]


def protocol_counts(images_per_user: Sequence[int]) -> tuple[int, int]:
    """Closed-form (genuine, impostor) counts for a roster."""
    k = np.asarray(images_per_user, dtype=np.int64)
    k = k[k > 0]
    n2 = int(np.count_nonzero(k >= 2))
    return int((k * (k - 1) // 2).sum()), n2 * (len(k) - 1)


# --- error rates -------------------------------------------------------------

def error_rates(s: ScoreSet):
    """(thresholds, far, frr) over the sorted distinct scores and one point past the maximum."""
    s.require_nonempty()
    g, i = s.normalized()
    u = np.unique(np.concatenate([g, i]))
    t = np.append(u, u[-1] + 1.0)
    gs = np.sort(g)
    im = np.sort(i)
    frr = np.searchsorted(gs, t, side="left") / gs.size
    far = 1.0 - np.searchsorted(im, t, side="left") / im.size
    return t, far, frr


def eer(s: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold, in the score's own polarity.

    The crossing is located at the first threshold where FRR >= FAR and
    interpolated linearly from the preceding threshold.
    """
    t, far, frr = error_rates(s)
    d = frr - far
    k = int(np.argmax(d >= 0))  # d[-1] == 1 so a crossing always exists
    if d[k] == 0 or k == 0:
        rate, thr = far[k], t[k]
    else:
        alpha = -d[k - 1] / (d[k] - d[k - 1])
        rate = far[k - 1] + alpha * (far[k] - far[k - 1])
        thr = t[k - 1] + alpha * (t[k] - t[k - 1])
    return float(rate), float(s.polarity.sign * thr)


def det_curve(s: ScoreSet, points: int = 200) -> list[tuple[float, float]]:
    """(far, frr) operating points, ordered by increasing FRR, both endpoints kept."""
    if points < 2:
        raise InvalidArgumentError("points must be >= 2")
    _, far, frr = error_rates(s)
    n = far.size
    if n > points:
        idx = np.unique(np.round(np.linspace(0, n - 1, points)).astype(np.int64))
        far, frr = far[idx], frr[idx]
    return [(float(a), float(b)) for a, b in zip(far, frr)]


# --- fusion ------------------------------------------------------------------

@dataclass(frozen=True)
class FusionModel:
    """``f = a0 + sum_k a_k * (sign_k * s_k)`` with sign_k from each matcher's polarity."""
    weights: tuple[float, ...]
    polarities: tuple[Polarity, ...]
    matchers: tuple[str, ...] = ()
    iterations: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.polarities) + 1:
            raise InvalidArgumentError("need one weight per matcher plus an intercept")

    @property
    def n_matchers(self) -> int:
        return len(self.polarities)


def _features(sets: Sequence[ScoreSet]):
    if len(sets) < 1:
        raise InvalidArgumentError("need at least one score set")
    g_len = {s.genuine.size for s in sets}
    i_len = {s.impostor.size for s in sets}
    if len(g_len) != 1 or len(i_len) != 1:
        raise InvalidArgumentError("per-matcher score lists must be index-aligned")
    ng, ni = g_len.pop(), i_len.pop()
    if ng == 0 or ni == 0:
        raise InvalidArgumentError("fusion training needs both genuine and impostor trials")
    cols = [np.concatenate(s.normalized()) for s in sets]
    x = np.column_stack(cols)
    y = np.concatenate([np.ones(ng), np.zeros(ni)])
    w = np.concatenate([np.full(ng, 0.5 / ng), np.full(ni, 0.5 / ni)])
    return x, y, w


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def train_fusion(sets: Sequence[ScoreSet], reg: float = 1e-6, tol: float = 1e-8,
                 max_iter: int = 100) -> FusionModel:
    """Class-weighted ridge logistic regression by Newton iterations.

    Each class carries total weight 1/2. Inputs are standardized before the
    fit so that the ridge term does not depend on score units; the returned
    weights act on the polarity-normalized raw scores.
    """
    if reg < 0:
        raise InvalidArgumentError("reg must be >= 0")
    x, y, w = _features(sets)
    mu = (w[:, None] * x).sum(0) / w.sum()
    sd = np.sqrt((w[:, None] * (x - mu) ** 2).sum(0) / w.sum())
    sd[sd == 0] = 1.0
    z = np.column_stack([np.ones(len(x)), (x - mu) / sd])
    pen = np.full(z.shape[1], reg)
    pen[0] = 0.0

    def objective(b):
        f = z @ b
        return -(w * (y * _log_sigmoid(f) + (1 - y) * _log_sigmoid(-f))).sum() + 0.5 * (pen * b * b).sum()

    beta = np.zeros(z.shape[1])
    obj = objective(beta)
    gnorm = math.inf
    for it in range(1, max_iter + 1):
        p = np.exp(_log_sigmoid(z @ beta))
        grad = z.T @ (w * (p - y)) + pen * beta
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            break
        hess = (z * (w * p * (1 - p))[:, None]).T @ z + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta - t * step
            c_obj = objective(cand)
            if c_obj <= obj or t < 1e-10:
                break
            t *= 0.5
        beta, obj = cand, c_obj
    else:
        p = np.exp(_log_sigmoid(z @ beta))
        gnorm = float(np.linalg.norm(z.T @ (w * (p - y)) + pen * beta))
        if gnorm >= tol:
            raise FusionTrainingError(
                f"logistic fusion did not converge in {max_iter} iterations (gradient norm {gnorm:.3g})",
                iterations=max_iter, grad_norm=gnorm)
        it = max_iter
    slopes = beta[1:] / sd
    a0 = beta[0] - float(slopes @ mu)
    return FusionModel((float(a0), *map(float, slopes)), tuple(s.polarity for s in sets),
                       tuple(s.matcher for s in sets), it)


def apply_fusion(model: FusionModel, scores: Sequence) -> np.ndarray | float:
    """Fused score (higher = more genuine) for one value, or an array, per matcher."""
    if len(scores) != model.n_matchers:
        raise InvalidArgumentError(f"expected {model.n_matchers} matcher scores, got {len(scores)}")
    out = model.weights[0]
    for a, pol, s in zip(model.weights[1:], model.polarities, scores):
        out = out + a * (pol.sign * np.asarray(s, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def fuse_sets(model: FusionModel, sets: Sequence[ScoreSet], **labels) -> ScoreSet:
    g = apply_fusion(model, [s.genuine for s in sets])
    i = apply_fusion(model, [s.impostor for s in sets])
    return ScoreSet(np.atleast_1d(g), np.atleast_1d(i), Polarity.HIGHER_IS_BETTER, **labels)


def kfold_fusion(sets: Sequence[ScoreSet], k: int = 5, reg: float = 1e-6, seed: int | None = None,
                 **labels) -> ScoreSet:
    """Fused scores where each trial is scored by a model trained on the other folds.

    Folds are assigned separately within each class, round-robin over the
    trial order (or over a permutation drawn from ``seed``).
    """
    if k < 2:
        raise InvalidArgumentError("k must be >= 2")
    _features(sets)
    ng, ni = sets[0].genuine.size, sets[0].impostor.size
    if min(ng, ni) < k:
        raise InvalidArgumentError(f"each class needs at least k={k} trials")
    if seed is None:
        gf, if_ = np.arange(ng) % k, np.arange(ni) % k
    else:
        rng = np.random.default_rng(seed)
        gf, if_ = rng.permutation(ng) % k, rng.permutation(ni) % k
    g_out, i_out = np.empty(ng), np.empty(ni)
    for fold in range(k):
        train = [ScoreSet(s.genuine[gf != fold], s.impostor[if_ != fold], s.polarity, s.matcher) for s in sets]
        model = train_fusion(train, reg)
        g_out[gf == fold] = apply_fusion(model, [s.genuine[gf == fold] for s in sets])
        i_out[if_ == fold] = apply_fusion(model, [s.impostor[if_ == fold] for s in sets])
    return ScoreSet(g_out, i_out, Polarity.HIGHER_IS_BETTER, **labels)


def fuse_mean(sets: Sequence[ScoreSet], **labels) -> ScoreSet:
    """Baseline: mean of z-normalized, polarity-normalized scores."""
    x, _, _ = _features(sets)
    mu, sd = x.mean(0), x.std(0)
    sd[sd == 0] = 1.0
    f = ((x - mu) / sd).mean(1)
    ng = sets[0].genuine.size
    return ScoreSet(f[:ng], f[ng:], Polarity.HIGHER_IS_BETTER, **labels)
