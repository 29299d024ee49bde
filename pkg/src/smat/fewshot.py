"""Prototypical-network head, cross-entropy and distillation losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .params import ParamSet, embed


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray | None
    n_way: int
    domain: str = ""
    is_ood: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.support_y = np.asarray(self.support_y, dtype=np.int64)
        if self.query_y is not None:
            self.query_y = np.asarray(self.query_y, dtype=np.int64)
        labels = set(self.support_y.tolist())
        if labels != set(range(self.n_way)):
            raise ValueError("support must cover every class in [0, n_way)")
        if self.query_y is not None and self.query_y.size and (
                self.query_y.min() < 0 or self.query_y.max() >= self.n_way):
            raise ValueError("query labels out of range")

    @property
    def k_shot(self) -> int:
        return int(np.bincount(self.support_y, minlength=self.n_way).min())


def one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def centroid_matrix(labels: np.ndarray, n_way: int) -> np.ndarray:
    """(n_way, n_support) averaging matrix: ``A @ E`` gives class means."""
    oh = one_hot(labels, n_way).T
    counts = oh.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("every class needs at least one support example")
    return oh / counts


def _distances(q: Tensor, c: Tensor, metric: str) -> Tensor:
    if metric == "sqeuclid":
        qq = dc.sum(dc.square(q), axis=1, keepdims=True)
        cc = dc.sum(dc.square(c), axis=1, keepdims=True)
        return qq - 2.0 * dc.matmul(q, c.T) + cc.T
    if metric == "cosine":
        qn = q / dc.sqrt(dc.sum(dc.square(q), axis=1, keepdims=True) + 1e-12)
        cn = c / dc.sqrt(dc.sum(dc.square(c), axis=1, keepdims=True) + 1e-12)
        return 1.0 - dc.matmul(qn, cn.T)
    raise ValueError(f"unknown metric {metric!r}")


def logits_from_embeddings(support_emb: Tensor, support_y: np.ndarray, query_emb: Tensor,
                           n_way: int, metric: str = "sqeuclid") -> Tensor:
    centroids = dc.matmul(Tensor(centroid_matrix(support_y, n_way)), support_emb)
    return -_distances(query_emb, centroids, metric)


def _embed_episode(net: ParamSet, episode: Episode) -> tuple[Tensor, Tensor]:
    n_s = len(episode.support_x)
    x = np.concatenate([episode.support_x, episode.query_x], axis=0)
    e = embed(net, x)
    return e[:n_s], e[n_s:]


def protonet_logits(net: ParamSet, episode: Episode, metric: str = "sqeuclid") -> Tensor:
    """Negative distances from query embeddings to support class centroids."""
    s, q = _embed_episode(net, episode)
    return logits_from_embeddings(s, episode.support_y, q, episode.n_way, metric)


def support_logits(net: ParamSet, episode: Episode, metric: str = "sqeuclid",
                   leave_one_out: bool = True) -> Tensor:
    """Support points scored against the centroids.

    With ``leave_one_out`` and at least two shots, each point's own-class
    centroid excludes the point itself.
    """
    e = embed(net, episode.support_x)
    y, n_way = episode.support_y, episode.n_way
    a = centroid_matrix(y, n_way)
    d_all = _distances(e, dc.matmul(Tensor(a), e), metric)
    if not leave_one_out or episode.k_shot < 2:
        return -d_all
    counts = np.bincount(y, minlength=n_way)
    own = one_hot(y, n_way)
    n = len(y)
    loo = np.zeros((n, n))
    for j in range(n):
        same = y == y[j]
        loo[j, same] = 1.0 / (counts[y[j]] - 1)
        loo[j, j] = 0.0
    own_c = dc.matmul(Tensor(loo), e)
    if metric == "sqeuclid":
        d_own = dc.sum(dc.square(e - own_c), axis=1, keepdims=True)
    else:
        en = e / dc.sqrt(dc.sum(dc.square(e), axis=1, keepdims=True) + 1e-12)
        cn = own_c / dc.sqrt(dc.sum(dc.square(own_c), axis=1, keepdims=True) + 1e-12)
        d_own = 1.0 - dc.sum(en * cn, axis=1, keepdims=True)
    return -(d_all * Tensor(1.0 - own) + d_own * Tensor(own))


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    if labels is None:
        raise ValueError("cross-entropy needs labels")
    labels = np.asarray(labels, dtype=np.int64)
    lp = dc.log_softmax(logits, axis=1)
    return -dc.sum(lp * Tensor(one_hot(labels, logits.shape[1]))) / len(labels)


def kd_loss(student: Tensor, teacher, temp: float = 2.0) -> Tensor:
    """``temp**2 * mean_q KL(softmax(teacher/temp) || softmax(student/temp))``.

    The teacher is treated as a constant.
    """
    if temp <= 0:
        raise ValueError("temperature must be positive")
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=np.float64)
    if t.shape != student.shape:
        raise dc.ShapeError("student and teacher logits differ in shape")
    ts = t / temp
    ts = ts - ts.max(axis=1, keepdims=True)
    log_pt = ts - np.log(np.exp(ts).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = dc.log_softmax(student / temp, axis=1)
    kl = dc.sum(Tensor(pt) * (Tensor(log_pt) - log_ps)) / student.shape[0]
    return temp * temp * kl


def combined_loss(student_logits: Tensor, teacher_logits, labels, beta_w: float,
                  temp: float = 2.0) -> Tensor:
    """``beta_w * CE + (1 - beta_w) * KD`` on query logits."""
    if not 0.0 <= beta_w <= 1.0:
        raise ValueError("beta_w must lie in [0, 1]")
    if beta_w == 1.0:
        return ce_loss(student_logits, labels)
    if beta_w == 0.0:
        return kd_loss(student_logits, teacher_logits, temp)
    return (beta_w * ce_loss(student_logits, labels)
            + (1.0 - beta_w) * kd_loss(student_logits, teacher_logits, temp))


def episode_meta_loss(theta_i: ParamSet, theta_tr: ParamSet, episode: Episode, beta_w: float,
                      temp: float = 2.0, metric: str = "sqeuclid") -> Tensor:
    student = protonet_logits(theta_i, episode, metric)
    teacher = protonet_logits(theta_tr.detach(), episode, metric) if beta_w < 1.0 else None
    return combined_loss(student, teacher, episode.query_y, beta_w, temp)


def accuracy(logits, labels) -> float:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(z.argmax(axis=1) == np.asarray(labels)))
