"""Contrastive text-motion evaluators and the metrics computed in their embedding space."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import (AdamW, Embedding, Linear, Module, Parameter, Tensor, TransformerLayer,
                       checkpoint, clip_grad_norm, concat, make_rng, no_grad, sinusoidal_positions)
from .numerics.tensor import ShapeError
from .text import EOS, Vocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    input_width: int
    vocab_size: int
    kind: str = "transformer"    # or "conv" for the small architecturally distinct model
    width: int = 64
    heads: int = 4
    layers: int = 1
    embed_dim: int = 32
    patch: int = 4               # frames merged into one motion token


class _TransformerTower(Module):
    def __init__(self, width: int, heads: int, layers: int, rng):
        self.layers = [TransformerLayer(width, heads, rng) for _ in range(layers)]

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask)
        return x


def _patchify(frames: Sequence[np.ndarray], patch: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad to a shared length (edge-replicated) and merge ``patch`` frames per token."""
    lengths = [-(-f.shape[0] // patch) for f in frames]
    n_tok = max(lengths)
    d = frames[0].shape[1]
    out = np.zeros((len(frames), n_tok * patch, d))
    mask = np.zeros((len(frames), n_tok), dtype=bool)
    for i, f in enumerate(frames):
        out[i, :f.shape[0]] = f
        out[i, f.shape[0]:] = f[-1]
        mask[i, :lengths[i]] = True
    return out.reshape(len(frames), n_tok, patch * d), mask


class EvalModel(Module):
    def __init__(self, config: EvalConfig, rng: np.random.Generator):
        c = config
        self.config = config
        if c.kind == "transformer":
            self.m_in = Linear(c.input_width * c.patch, c.width, rng)
            self.cls = Parameter(rng.normal(0, 0.02, size=(1, 1, c.width)))
            self.m_tower = _TransformerTower(c.width, c.heads, c.layers, rng)
            self.t_tower = _TransformerTower(c.width, c.heads, c.layers, rng)
        elif c.kind == "conv":
            self.m_in = Linear(c.input_width * c.patch, c.width, rng)
            self.m_hidden = Linear(c.width, c.width, rng)
        else:
            raise ValueError(f"unknown evaluator kind {c.kind!r}")
        self.tok = Embedding(c.vocab_size, c.width, rng)
        self.m_out = Linear(c.width, c.embed_dim, rng)
        self.t_out = Linear(c.width, c.embed_dim, rng)
        self.logit_scale = Parameter(np.array(math.log(1 / 0.07)))
        self.bind_names()

    def motion_tensor(self, frames: Sequence[np.ndarray]) -> Tensor:
        c = self.config
        if frames[0].shape[1] != c.input_width:
            raise ShapeError(f"evaluator expects width {c.input_width}, got {frames[0].shape[1]}")
        x, mask = _patchify(frames, c.patch)
        h = self.m_in(Tensor(x))
        if c.kind == "transformer":
            B, L = mask.shape
            h = h + sinusoidal_positions(L, c.width)[None]
            h = concat([self.cls.broadcast_to((B, 1, c.width)), h], axis=1)
            full = np.concatenate([np.ones((B, 1), bool), mask], axis=1)
            pooled = self.m_tower(h, full)[:, 0, :]
        else:
            w = mask[..., None] / mask.sum(axis=1)[:, None, None]
            pooled = (self.m_hidden(h.relu()).relu() * w).sum(axis=1)
        return _l2norm(self.m_out(pooled))

    def text_tensor(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        c = self.config
        h = self.tok(ids)
        if c.kind == "transformer":
            h = h + sinusoidal_positions(ids.shape[1], c.width)[None]
            h = self.t_tower(h, mask)
            last = mask.sum(axis=1) - 1   # EOS position
            onehot = np.zeros(ids.shape + (1,))
            onehot[np.arange(len(ids)), last, 0] = 1.0
            pooled = (h * onehot).sum(axis=1)
        else:
            w = mask[..., None] / mask.sum(axis=1)[:, None, None]
            pooled = (h * w).sum(axis=1)
        return _l2norm(self.t_out(pooled))

    def embed_motions(self, frames: Sequence[np.ndarray], batch: int = 128) -> np.ndarray:
        with no_grad():
            return np.concatenate([self.motion_tensor(frames[i:i + batch]).data
                                   for i in range(0, len(frames), batch)])

    def embed_texts(self, vocab: Vocab, captions: Sequence[Sequence[str]], batch: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(captions), batch):
                ids, mask = vocab.batch(captions[i:i + batch], eos=True)
                out.append(self.text_tensor(ids, mask).data)
        return np.concatenate(out)


def _l2norm(x: Tensor) -> Tensor:
    return x / ((x * x).sum(axis=-1, keepdims=True) + 1e-12).sqrt()


def contrastive_loss(m_emb: Tensor, t_emb: Tensor, logit_scale: Tensor,
                     same: np.ndarray | None = None) -> Tensor:
    """Symmetric cross-entropy over the scaled similarity matrix.

    ``same[i, j]`` marks pairs with identical captions; their target mass is
    shared so duplicate captions are not pushed apart.
    """
    B = m_emb.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    target = np.eye(B) if same is None else same / same.sum(axis=1, keepdims=True)
    logits = (m_emb @ t_emb.T) * logit_scale.exp()
    l_m = -(logits.log_softmax(axis=1) * target).sum() * (1.0 / B)
    l_t = -(logits.T.log_softmax(axis=1) * target.T).sum() * (1.0 / B)
    return (l_m + l_t) * 0.5


@dataclass
class EvalTrainConfig:
    steps: int = 600
    batch_size: int = 64
    lr: float = 1e-3
    clip: float = 1.0
    max_logit_scale: float = math.log(100.0)
    log_every: int = 100


def train_evaluator(frames: Sequence[np.ndarray], captions: Sequence[Sequence[str]], vocab: Vocab,
                    config: EvalConfig, train: EvalTrainConfig, seed: int,
                    tag: str = "eval") -> tuple[EvalModel, list[float]]:
    if len(frames) != len(captions) or len(frames) < 2:
        raise ValueError("need at least two paired (motion, caption) samples")
    model = EvalModel(config, make_rng(seed, tag, "init"))
    params = model.named_parameters()
    opt = AdamW(params, lr=train.lr)
    rng = make_rng(seed, tag, "data")
    keys = [" ".join(c) for c in captions]
    losses = []
    for step in range(train.steps):
        idx = rng.choice(len(frames), size=min(train.batch_size, len(frames)), replace=False)
        ids, mask = vocab.batch([captions[i] for i in idx], eos=True)
        k = np.array([keys[i] for i in idx])
        same = (k[:, None] == k[None, :]).astype(np.float64)
        model.zero_grad()
        loss = contrastive_loss(model.motion_tensor([frames[i] for i in idx]),
                                model.text_tensor(ids, mask), model.logit_scale, same)
        loss.backward()
        grads = {n: p.grad for n, p in params.items()}
        clip_grad_norm(grads, train.clip)
        opt.step(grads)
        model.logit_scale.data = np.minimum(model.logit_scale.data, train.max_logit_scale)
        losses.append(float(loss.data))
        if train.log_every and step % train.log_every == 0:
            log.info("%s step %d loss %.4f", tag, step, losses[-1])
    return model, losses


def save_evaluator(path, model: EvalModel) -> None:
    blob = dict(model.state_dict())
    for k, v in asdict(model.config).items():
        if k == "kind":
            v = {"transformer": 0, "conv": 1}[v]
        blob[f"config.{k}"] = np.array(float(v))
    checkpoint.save(path, blob)


def load_evaluator(path) -> EvalModel:
    blob = checkpoint.load(path)
    cfg = {k[len("config."):]: int(v) for k, v in blob.items() if k.startswith("config.")}
    cfg["kind"] = ("transformer", "conv")[cfg["kind"]]
    model = EvalModel(EvalConfig(**cfg), make_rng(0, "eval", "load"))
    model.load_state_dict({k: v for k, v in blob.items() if not k.startswith("config.")})
    return model


# ----------------------------------------------------------------- metrics

@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def gaussian_stats(emb: np.ndarray) -> GaussianStats:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    cov = np.cov(emb, rowvar=False)
    return GaussianStats(emb.mean(axis=0), np.atleast_2d(0.5 * (cov + cov.T)))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    try:
        w, v = np.linalg.eigh(0.5 * (m + m.T))
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"eigensolver did not converge: {exc}") from exc
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        log.debug("clamping eigenvalue %.3e", w.min())
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between two Gaussians.

    Sa^1/2 Sb Sa^1/2 = M M^T with M = Sa^1/2 Sb^1/2, so the trace of its
    square root is the sum of singular values of M. This avoids square roots
    of rounding-level eigenvalues, which matter for rank-deficient inputs.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError("FID inputs differ in width")
    try:
        tr_sqrt = float(np.sum(np.linalg.svd(_psd_sqrt(a.cov) @ _psd_sqrt(b.cov), compute_uv=False)))
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"SVD did not converge: {exc}") from exc
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)


def fid_from_embeddings(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    return fid(gaussian_stats(emb_a), gaussian_stats(emb_b))


def r_precision(motion_emb: np.ndarray, text_emb: np.ndarray, rng: np.random.Generator,
                pool: int = 32, top: int = 3) -> np.ndarray:
    """Top-k retrieval accuracy of each true caption among ``pool - 1`` mismatches.

    Mismatches are drawn without replacement from the other pairs. The true
    caption sits at a random pool slot so exact distance ties are broken fairly.
    """
    n = len(motion_emb)
    if pool > n:
        raise ValueError(f"pool {pool} larger than evaluation set {n}")
    hits = np.zeros(top)
    for i in range(n):
        others = rng.choice(n - 1, size=pool - 1, replace=False)
        others = others + (others >= i)
        cand = np.insert(others, int(rng.integers(pool)), i)
        d = np.linalg.norm(text_emb[cand] - motion_emb[i], axis=1)
        rank = int(np.nonzero(cand[np.argsort(d, kind="stable")] == i)[0][0])
        hits[rank:] += rank < top
    return hits / n


def matching_score(motion_emb: np.ndarray, text_emb: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(motion_emb - text_emb, axis=1)))


def multimodality(groups: Sequence[np.ndarray]) -> float:
    """Mean pairwise distance among repeated generations of each caption."""
    vals = []
    for g in groups:
        g = np.asarray(g)
        if len(g) < 2:
            raise ValueError("multimodality needs at least 2 repeats per caption")
        d = np.linalg.norm(g[:, None] - g[None, :], axis=-1)
        vals.append(d[np.triu_indices(len(g), 1)].mean())
    return float(np.mean(vals))


def clip_score(motion_emb: np.ndarray, text_emb: np.ndarray) -> float:
    a = motion_emb / np.linalg.norm(motion_emb, axis=1, keepdims=True)
    b = text_emb / np.linalg.norm(text_emb, axis=1, keepdims=True)
    return float(np.mean(np.sum(a * b, axis=1)))


def ci95(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(1.96 * v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0


def metrics_report(real_emb: np.ndarray, gen_emb: np.ndarray | Sequence[np.ndarray], text_emb: np.ndarray,
                   seed: int, repeats: int = 20, pool: int = 32,
                   mm_groups: Sequence[np.ndarray] | None = None) -> dict:
    """Metrics averaged over repeated evaluations, with 95% intervals.

    ``gen_emb`` is one embedding set or a list of sets from independent
    generation runs (cycled over the repeats). Every repeat redraws the
    R-precision pools; nothing is resampled, so ground truth scored against
    itself gives FID 0.
    """
    runs = [gen_emb] if isinstance(gen_emb, np.ndarray) else list(gen_emb)
    rng = make_rng(seed, "eval", "report")
    per = {k: [] for k in ("fid", "r1", "r2", "r3", "matching", "clip_score")}
    for i in range(repeats):
        g = runs[i % len(runs)]
        r = r_precision(g, text_emb, rng, pool=min(pool, len(g)))
        per["fid"].append(fid_from_embeddings(real_emb, g))
        per["r1"].append(r[0]); per["r2"].append(r[1]); per["r3"].append(r[2])
        per["matching"].append(matching_score(g, text_emb))
        per["clip_score"].append(clip_score(g, text_emb))
    report = {k: float(np.mean(v)) for k, v in per.items()}
    report["multimodality"] = multimodality(mm_groups) if mm_groups is not None else None
    report.update(n=int(len(runs[0])), seed=int(seed), ci95={k: ci95(v) for k, v in per.items()})
    return report


# ------------------------------------------------------- dual-evaluator study

@dataclass
class StudyCell:
    target: str
    mode: str
    sigma: float
    fid_full: float
    fid_essential: float
    r1_full: float
    r1_essential: float

    def inflation(self, base: "StudyCell") -> tuple[float, float]:
        return self.fid_full / base.fid_full, self.fid_essential / base.fid_essential


@dataclass
class StudyReport:
    baseline: StudyCell
    cells: list[StudyCell] = field(default_factory=list)

    def cell(self, target: str, mode: str, sigma: float | None = None) -> StudyCell:
        for c in self.cells:
            if c.target == target and c.mode == mode and (sigma is None or c.sigma == sigma):
                return c
        raise KeyError((target, mode, sigma))

    def ordering_holds(self) -> bool:
        """Full-dim evaluator inflates more than the essential one under redundant replacement."""
        full, ess = self.cell("redundant", "replace").inflation(self.baseline)
        return full > ess


def dual_eval_study(full_model: EvalModel | None, ess_model: EvalModel | None, vocab: Vocab,
                    reference: Sequence, probe: Sequence, captions: Sequence[Sequence[str]],
                    grid: Sequence[tuple[str, str, float]], seed: int,
                    perturb_fn: Callable | None = None, pool: int = 32) -> StudyReport:
    """Compare a full-dim evaluator and an essential-dim evaluator under perturbations.

    ``reference`` and ``probe`` are disjoint sets of normalized full-layout
    MotionSequences; FID is probe-vs-reference, R-precision uses ``captions``
    of the probe set.
    """
    if full_model is None or ess_model is None:
        raise ValueError("dual evaluation needs both evaluators")
    from .motion import extract_essential, perturb
    perturb_fn = perturb_fn or perturb
    ess_w = ess_model.config.input_width
    ref_full = full_model.embed_motions([m.frames for m in reference])
    ref_ess = ess_model.embed_motions([m.frames[:, :ess_w] for m in reference])
    txt_full = full_model.embed_texts(vocab, captions)
    txt_ess = ess_model.embed_texts(vocab, captions)

    def run(target, mode, sigma, rng) -> StudyCell:
        seqs = [perturb_fn(m, target, mode, sigma, rng) if sigma else m for m in probe]
        ef = full_model.embed_motions([m.frames for m in seqs])
        ee = ess_model.embed_motions([extract_essential(m).frames for m in seqs])
        r_rng = make_rng(seed, "study", "pool")  # same pools in every cell
        return StudyCell(target, mode, sigma, fid_from_embeddings(ref_full, ef),
                         fid_from_embeddings(ref_ess, ee),
                         float(r_precision(ef, txt_full, r_rng, pool=pool)[0]),
                         float(r_precision(ee, txt_ess, make_rng(seed, "study", "pool"), pool=pool)[0]))

    report = StudyReport(run("essential", "add_noise", 0.0, make_rng(seed, "study", "base")))
    for target, mode, sigma in grid:
        report.cells.append(run(target, mode, sigma, make_rng(seed, "study", target, mode, sigma)))
    return report
