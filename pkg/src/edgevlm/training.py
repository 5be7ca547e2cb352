"""
Three-stage training (projector pretraining, SFT, minimal-edit DPO) and the
preference-pair tooling that feeds the last stage.

The vision encoder is frozen in every stage, so its outputs are computed once
per image and reused as constants.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import lm, projector, vision
from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ContractError, DatasetError, TrainingError
from .model import Weights, clone_weights, component_of, init_weights
from .tensor import Tensor

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    PRETRAIN = "pretrain"
    SFT = "sft"
    DPO = "dpo"


TRAINABLE = {
    Stage.PRETRAIN: frozenset({"projector"}),
    Stage.SFT: frozenset({"projector", "lm"}),
    Stage.DPO: frozenset({"projector", "lm"}),
}


def stage_mask(stage: Stage | str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    """The subset of ``params`` a stage may update. The encoder is never in it."""
    allowed = TRAINABLE[Stage(stage)]
    return {name: t for name, t in params.items() if component_of(name) in allowed}


# -- data records ------------------------------------------------------------
@dataclass
class Sample:
    image: vision.Image
    prompt: str
    response: str


@dataclass
class PreferencePair:
    prompt: str
    image: str | vision.Image
    chosen: str
    rejected: str
    edit_distance: int
    normalized_distance: float

    @classmethod
    def from_record(cls, rec: dict, unit: str = "token") -> "PreferencePair":
        """Parse a pair-file record; distances are computed when the record omits them."""
        missing = [k for k in ("prompt", "image", "chosen", "rejected") if k not in rec]
        if missing:
            raise DatasetError(f"pair record is missing {missing}")
        chosen, rejected = str(rec["chosen"]), str(rec["rejected"])
        if "edit_distance" in rec and "normalized_distance" in rec:
            dist, norm = int(rec["edit_distance"]), float(rec["normalized_distance"])
        else:
            a, b = edit_units(chosen, unit), edit_units(rejected, unit)
            dist = levenshtein(a, b)
            norm = dist / max(len(a), len(b), 1)
        return cls(str(rec["prompt"]), rec["image"], chosen, rejected, dist, norm)

    def to_record(self) -> dict:
        if not isinstance(self.image, str):
            raise ContractError("only pairs that reference an image path can be serialized")
        return {"prompt": self.prompt, "image": self.image, "chosen": self.chosen,
                "rejected": self.rejected, "edit_distance": self.edit_distance,
                "normalized_distance": self.normalized_distance}


# -- minimal-edit tooling ----------------------------------------------------
def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance between two token sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_units(text: str, unit: str = "token") -> list:
    if unit == "token":
        return lm.tokenize(text)
    if unit == "word":
        return text.split()
    raise ConfigError(f"unknown edit unit {unit!r}")


@dataclass
class PairRejection:
    index: int
    reason: str
    normalized_distance: float | None = None


DPO_FIELDS = ("image", "prompt", "original", "edited")


def build_pairs(records: Iterable, tau: float = 0.3, unit: str = "token"
                ) -> tuple[list[PreferencePair], list[PairRejection]]:
    """Turn (prompt, image, original, edited) records into chosen=edited / rejected=original pairs.

    Pairs whose normalized edit distance exceeds ``tau`` are not admitted.
    Malformed records are skipped with a logged reason.
    """
    if not 0 < tau <= 1:
        raise ConfigError(f"tau must be in (0, 1], got {tau}")
    pairs, rejected = [], []
    for i, rec in enumerate(records):
        if isinstance(rec, (tuple, list)) and len(rec) == 4:
            rec = dict(zip(("prompt", "image", "original", "edited"), rec))
        if not isinstance(rec, dict) or any(k not in rec for k in DPO_FIELDS):
            rejected.append(PairRejection(i, "malformed record"))
            log.warning("record %d skipped: malformed", i)
            continue
        orig, edited = rec["original"], rec["edited"]
        if not isinstance(orig, str) or not isinstance(edited, str) or not isinstance(rec["prompt"], str):
            rejected.append(PairRejection(i, "text fields must be strings"))
            log.warning("record %d skipped: text fields must be strings", i)
            continue
        if orig == edited:
            rejected.append(PairRejection(i, "original and edited are identical"))
            log.warning("record %d skipped: original == edited", i)
            continue
        a, b = edit_units(edited, unit), edit_units(orig, unit)
        dist = levenshtein(a, b)
        norm = dist / max(len(a), len(b))
        if norm > tau:
            rejected.append(PairRejection(i, f"normalized distance {norm:.4f} > tau {tau}", norm))
            continue
        pairs.append(PreferencePair(rec["prompt"], rec["image"], edited, orig, dist, norm))
    return pairs, rejected


# -- losses ------------------------------------------------------------------
def perplexity(mean_nll: float) -> float:
    if not math.isfinite(mean_nll):
        raise ContractError(f"mean NLL must be finite, got {mean_nll}")
    return math.exp(mean_nll)


class FeatureCache:
    """Frozen encoder outputs, keyed by image identity."""

    def __init__(self, cfg: ModelConfig, weights: Weights):
        self.cfg, self.weights = cfg, weights
        self._store: dict[int, tuple[vision.Image, np.ndarray]] = {}

    def get(self, image: vision.Image) -> np.ndarray:
        hit = self._store.get(id(image))
        if hit is None or hit[0] is not image:
            feats = vision.vision_encode(image, self.cfg.vision, self.weights).data[0]
            hit = (image, feats)
            self._store[id(image)] = hit
        return hit[1]

    def batch(self, images: Sequence[vision.Image]) -> Tensor:
        return Tensor(np.stack([self.get(img) for img in images]))


def caption_loss(samples: Sequence[Sample], weights: Weights, cfg: ModelConfig,
                 features: FeatureCache | None = None) -> Tensor:
    """Mean cross-entropy over response tokens (+EOS); image and prompt positions are masked out."""
    if not samples:
        raise ContractError("caption_loss needs at least one sample")
    if any(not s.response for s in samples):
        raise ContractError("captions must be nonempty")
    features = features or FeatureCache(cfg, weights)
    img = projector.project(features.batch([s.image for s in samples]), cfg, weights)
    emb, targets, mask = lm.build_batch(weights, img, [lm.tokenize(s.prompt) for s in samples],
                                        [lm.tokenize(s.response) for s in samples], append_eos=True)
    return T.cross_entropy(lm.forward(weights, cfg.lm, emb), targets, mask)


def dpo_objective(policy_chosen: Tensor, policy_rejected: Tensor, ref_chosen, ref_rejected,
                  beta: float) -> tuple[Tensor, np.ndarray]:
    """-log sigmoid(beta * margin), averaged over the batch; also returns the per-pair margins."""
    if beta <= 0:
        raise ConfigError(f"DPO beta must be positive, got {beta}")
    ref_gap = np.asarray(ref_chosen, dtype=policy_chosen.dtype) - np.asarray(ref_rejected, dtype=policy_chosen.dtype)
    margin = (policy_chosen - policy_rejected - Tensor(ref_gap)) * beta
    return T.mean(-T.log_sigmoid(margin)), margin.data.copy()


def pair_logprobs(pairs: Sequence[PreferencePair], weights: Weights, cfg: ModelConfig,
                  features: FeatureCache, images: Sequence[vision.Image]) -> tuple[Tensor, Tensor]:
    """Sequence log-probabilities of chosen and rejected texts, one forward over both."""
    n = len(pairs)
    img = projector.project(features.batch(list(images) * 2), cfg, weights)
    prompts = [lm.tokenize(p.prompt) for p in pairs] * 2
    responses = [lm.tokenize(p.chosen) for p in pairs] + [lm.tokenize(p.rejected) for p in pairs]
    lp = lm.response_logprobs(weights, cfg.lm, img, prompts, responses)
    return lp[:n], lp[n:]


def dpo_loss(pair: PreferencePair, policy: Weights, reference: Weights, cfg: ModelConfig,
             beta: float = 0.1, image: vision.Image | None = None) -> Tensor:
    """Single-pair DPO loss; gradients flow into ``policy`` only."""
    if beta <= 0:
        raise ConfigError(f"DPO beta must be positive, got {beta}")
    image = image if image is not None else _pair_image(pair)
    with T.no_grad():
        rc, rr = pair_logprobs([pair], reference, cfg, FeatureCache(cfg, reference), [image])
    pc, pr = pair_logprobs([pair], policy, cfg, FeatureCache(cfg, policy), [image])
    return dpo_objective(pc, pr, rc.data, rr.data, beta)[0]


def _pair_image(pair: PreferencePair) -> vision.Image:
    if isinstance(pair.image, vision.Image):
        return pair.image
    return vision.read_ppm(pair.image)


# -- optimizer ---------------------------------------------------------------
class SGD:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9,
                 clip_norm: float | None = None):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params, self.lr, self.momentum, self.clip_norm = params, lr, momentum, clip_norm
        self.velocity = {n: np.zeros_like(p.data) for n, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the global gradient norm before clipping."""
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name in sorted(self.params):
            p, v = self.params[name], self.velocity[name]
            v *= self.momentum
            v += grads[name] * scale
            p.data = p.data - self.lr * v
        return norm


# -- stage runner ------------------------------------------------------------
# Projector-only pretraining tolerates a larger step than stages that also move the LM.
DEFAULT_LR = {Stage.PRETRAIN: 0.2, Stage.SFT: 0.05, Stage.DPO: 0.05}


@dataclass
class TrainConfig:
    stage: Stage = Stage.PRETRAIN
    learning_rate: float | None = None  # None -> DEFAULT_LR[stage]
    steps: int = 500
    batch_size: int = 8
    momentum: float = 0.9
    beta: float = 0.1
    tau: float = 0.3
    seed: int = 0
    eval_every: int = 50
    clip_norm: float | None = 5.0

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.stage]
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must be in (0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps must be >= 0, batch_size and eval_every >= 1")


@dataclass
class MetricRow:
    step: int
    loss: float
    val_loss: float | None = None
    val_ppl: float | None = None
    margin: float | None = None


@dataclass
class TrainResult:
    weights: Weights
    metrics: list[MetricRow] = field(default_factory=list)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "loss", "val_loss", "val_ppl"])
        for m in self.metrics:
            writer.writerow([m.step, _fmt(m.loss), _fmt(m.val_loss), _fmt(m.val_ppl)])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _check_finite(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step}")
    return value


def evaluate_caption_loss(samples: Sequence[Sample], weights: Weights, cfg: ModelConfig,
                          features: FeatureCache, batch_size: int = 16) -> float:
    """Token-weighted mean NLL over ``samples``."""
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            n_tok = sum(len(lm.tokenize(s.response)) + 1 for s in chunk)
            total += caption_loss(chunk, weights, cfg, features).item() * n_tok
            count += n_tok
    return total / count


def dpo_margins(pairs: Sequence[PreferencePair], images: Sequence[vision.Image], policy: Weights,
                ref_logps: tuple[np.ndarray, np.ndarray], cfg: ModelConfig, features: FeatureCache,
                beta: float) -> np.ndarray:
    with T.no_grad():
        pc, pr = pair_logprobs(pairs, policy, cfg, features, images)
    return beta * ((pc.data - ref_logps[0]) - (pr.data - ref_logps[1]))


def train_stage(config: TrainConfig, model_cfg: ModelConfig, weights: Weights,
                train: Sequence, val: Sequence = ()) -> TrainResult:
    """Run ``config.steps`` SGD steps of the stage loss over the stage's trainable parameters.

    ``train``/``val`` hold :class:`Sample` records for pretrain/SFT and
    :class:`PreferencePair` records for DPO. Returns new weights; the input
    weights are not modified. Deterministic for a fixed seed.
    """
    stage = config.stage
    if not train:
        raise TrainingError("empty training set")
    expects_pairs = stage is Stage.DPO
    for rec in list(train) + list(val):
        if isinstance(rec, PreferencePair) != expects_pairs:
            raise TrainingError(f"{stage.value} stage got {type(rec).__name__} records")
    policy = clone_weights(weights, requires_grad=False)
    trainable = stage_mask(stage, policy)
    for p in trainable.values():
        p.requires_grad = True
    opt = SGD(trainable, config.learning_rate, config.momentum, config.clip_norm)
    features = FeatureCache(model_cfg, policy)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(policy)

    if expects_pairs:
        train_imgs = [_pair_image(p) for p in train]
        val_imgs = [_pair_image(p) for p in val]
        reference = clone_weights(weights, requires_grad=False)
        with T.no_grad():
            ref_train = tuple(x.data for x in pair_logprobs(train, reference, model_cfg, features, train_imgs))
            ref_val = (tuple(x.data for x in pair_logprobs(val, reference, model_cfg, features, val_imgs))
                       if val else None)

    def evaluate(step: int, loss: float) -> MetricRow:
        row = MetricRow(step, loss)
        if not val:
            return row
        if expects_pairs:
            m = dpo_margins(val, val_imgs, policy, ref_val, model_cfg, features, config.beta)
            row.margin = float(m.mean())
            row.val_loss = float(np.mean(np.logaddexp(0.0, -m)))
        else:
            row.val_loss = evaluate_caption_loss(val, policy, model_cfg, features)
            row.val_ppl = perplexity(row.val_loss)
        return row

    n = len(train)
    for step in range(config.steps + 1):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        if expects_pairs:
            batch = [train[i] for i in idx]
            pc, pr = pair_logprobs(batch, policy, model_cfg, features, [train_imgs[i] for i in idx])
            loss, _ = dpo_objective(pc, pr, ref_train[0][idx], ref_train[1][idx], config.beta)
        else:
            loss = caption_loss([train[i] for i in idx], policy, model_cfg, features)
        value = _check_finite(loss, step)
        if step % config.eval_every == 0 or step == config.steps:
            result.metrics.append(evaluate(step, value))
        else:
            result.metrics.append(MetricRow(step, value))
        if step == config.steps:
            break  # the last row only measures the final weights
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        log.debug("%s step %d loss %.4f", stage.value, step, value)
    for p in policy.values():
        p.requires_grad = True
        p.grad = None
    return result


# -- compression-ratio sweep -------------------------------------------------
@dataclass
class SweepConfig:
    ratios: tuple[int, ...] = (1, 3, 9, 81)
    kind: str = "reshape"
    n_train: int = 32
    n_val: int = 16
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=60, batch_size=4, eval_every=10))
    seed: int = 0


@dataclass
class SweepResult:
    curves: dict[int, list[tuple[int, float]]]  # image-token count -> [(step, val_loss)]
    prefill_tokens: dict[int, int]

    def to_csv(self) -> str:
        counts = sorted(self.curves, reverse=True)
        steps = sorted({s for c in self.curves.values() for s, _ in c})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step"] + [f"tokens_{c}" for c in counts])
        for s in steps:
            row = [s]
            for c in counts:
                vals = dict(self.curves[c])
                row.append(_fmt(vals.get(s)))
            writer.writerow(row)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "curves": {str(c): [{"step": s, "val_loss": v} for s, v in pts] for c, pts in self.curves.items()},
            "prefill_tokens": {str(c): n for c, n in self.prefill_tokens.items()},
        }, indent=2, sort_keys=True)


def ratio_sweep(base: ModelConfig, sweep: SweepConfig | None = None,
                data: tuple[Sequence[Sample], Sequence[Sample]] | None = None) -> SweepResult:
    """Train one toy model per compression ratio on the same data and seed, recording validation loss.

    The encoder and LM start from identical weights for every ratio; only the
    projector differs. No ordering between ratios is implied.
    """
    sweep = sweep or SweepConfig()
    seq = base.vision.seq_len
    for r in sweep.ratios:
        if r < 1 or seq % r:
            raise ConfigError(f"ratio {r} does not divide {seq} vision tokens")
    if data is None:
        samples = [Sample(img, "", cap) for img, cap in
                   vision.synthetic_caption_dataset(sweep.n_train + sweep.n_val, base.vision.image_size, sweep.seed)]
        data = samples[:sweep.n_train], samples[sweep.n_train:]
    train, val = data
    curves, prefill = {}, {}
    for r in sweep.ratios:
        cfg = base.with_strategy(sweep.kind, r)
        weights = init_weights(cfg, sweep.seed)
        res = train_stage(sweep.train, cfg, weights, train, val)
        count = cfg.image_tokens
        curves[count] = [(m.step, m.val_loss) for m in res.metrics if m.val_loss is not None]
        prefill[count] = count
        log.info("ratio %d (%d tokens): val loss %.4f -> %.4f", r, count, curves[count][0][1], curves[count][-1][1])
    return SweepResult(curves, prefill)


def write_metrics(path: str | Path, result: TrainResult) -> None:
    Path(path).write_text(result.metrics_csv())
