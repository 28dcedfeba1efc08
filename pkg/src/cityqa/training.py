"""End-to-end training: loss assembly, modality dropout, synthetic data.

The trained model is IMF fusion -> linear projector -> answer decoder. The
total loss is mean answer NLL plus a weighted KL regularizer. Incomplete
inputs are exercised two ways: structurally (corpus items tagged image /
point / point-image get only those features) and stochastically (modality
dropout during training). Everything is a pure function of (config, dataset,
seed); checkpoints round-trip bit-exactly through JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Optional

import numpy as np

from .decoder import (
    AnswerDecoder,
    DecoderConfig,
    DecoderInput,
    Vocab,
    answer_ids,
    tokenize,
)
from .imf import ImfParams, ModalityBundle, fuse, fuse_backward, fuse_traced
from .numerics import Adam, Mlp, NumericError, Parameter
from .seeding import derive_rng

CHECKPOINT_VERSION = 1
CONDITIONS = ("both", "image-only", "point-only")

SYNTHETIC_QUESTION = "what is the main object in this scene"
_CLASS_NAMES = ("building", "car", "road", "tree", "bridge", "park", "tower", "river")


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, wrong version, or inconsistent."""


@dataclass
class TrainConfig:
    """Optimizer settings, loss weights, and every architecture dimension."""

    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 4
    kl_weight: float = 1e-3
    modality_dropout_p: float = 0.3
    epochs: int = 30
    seed: int = 0
    # architecture
    image_dim: int = 6
    point_dim: int = 6
    encoder_hidden: int = 16
    encoded_dim: int = 8
    latent_dim: int = 8
    model_dim: int = 16
    ff_dim: int = 32
    vision_token_count: int = 2
    max_question_len: int = 20
    max_answer_len: int = 8
    # corpus featurization
    feature_noise: float = 0.3
    feature_offset: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.modality_dropout_p < 1.0:
            raise ValueError("modality_dropout_p must be in [0, 1)")
        if self.kl_weight < 0.0:
            raise ValueError("kl_weight must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            model_dim=self.model_dim,
            vision_token_count=self.vision_token_count,
            max_question_len=self.max_question_len,
            max_answer_len=self.max_answer_len,
            ff_dim=self.ff_dim,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ValueError(f"unknown training config field {key!r}")
        return cls(**d)


@dataclass
class SyntheticTaskSpec:
    """Class-coded feature task where the two modalities split the label bits.

    Labels carry ceil(log2(n_classes)) bits. Coordinate k of each modality
    holds gain * (+1/-1) for bit k, everything drowned in Gaussian noise.
    With the defaults the image modality sees only bit 0 while the point
    modality sees both bits (bit 0 weakly), so point-only beats image-only
    and the pair beats either alone. A constant offset shifts the whole
    feature cloud away from the origin (real backbone features are nowhere
    near zero-mean), which makes a zero-padded modality genuinely
    out-of-distribution for models never trained with one.
    """

    n_classes: int = 4
    image_dim: int = 6
    point_dim: int = 6
    train_size: int = 240
    test_size: int = 160
    noise: float = 0.6
    image_bit_gains: tuple = (1.0, 0.0)
    point_bit_gains: tuple = (0.5, 1.0)
    feature_offset: float = 1.5

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_classes > len(_CLASS_NAMES):
            raise ValueError(f"at most {len(_CLASS_NAMES)} classes supported")
        if self.train_size < 1 or self.test_size < 1:
            raise ValueError("split sizes must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        n_bits = self.n_bits
        if len(self.image_bit_gains) != n_bits or len(self.point_bit_gains) != n_bits:
            raise ValueError(f"bit gain tuples must have length {n_bits}")
        if self.image_dim < n_bits or self.point_dim < n_bits:
            raise ValueError("feature dims must cover every label bit")
        for k in range(n_bits):
            if self.image_bit_gains[k] == 0 and self.point_bit_gains[k] == 0:
                raise ValueError(f"label bit {k} is carried by neither modality")

    @property
    def n_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.n_classes)))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ValueError(f"unknown synthetic task field {key!r}")
        d = dict(d)
        for tup in ("image_bit_gains", "point_bit_gains"):
            if tup in d:
                d[tup] = tuple(d[tup])
        return cls(**d)


@dataclass
class Example:
    """One trainable item: visual features, question text, gold answer."""

    id: str
    bundle: ModalityBundle
    question: str
    answer: str
    qtype: str = "unknown"


@dataclass
class Dataset:
    train: list
    test: list


def _class_features(label: int, dim: int, gains: tuple, noise: float,
                    offset: float, rng: np.random.Generator) -> np.ndarray:
    x = rng.normal(0.0, noise, size=dim) if noise > 0 else np.zeros(dim)
    for k, gain in enumerate(gains):
        x[k] += gain * (1.0 if (label >> k) & 1 else -1.0)
    return x + offset


def make_synthetic_dataset(spec: SyntheticTaskSpec, seed: int = 0) -> Dataset:
    """Deterministic synthetic splits; labels cycle round-robin (balanced)."""
    rng = derive_rng("synthetic-data", seed)
    splits = {}
    for split, size in (("train", spec.train_size), ("test", spec.test_size)):
        items = []
        for i in range(size):
            label = i % spec.n_classes
            bundle = ModalityBundle(
                image_features=_class_features(
                    label, spec.image_dim, spec.image_bit_gains, spec.noise,
                    spec.feature_offset, rng),
                point_features=_class_features(
                    label, spec.point_dim, spec.point_bit_gains, spec.noise,
                    spec.feature_offset, rng),
            )
            items.append(Example(
                id=f"{split}-{i:04d}",
                bundle=bundle,
                question=SYNTHETIC_QUESTION,
                answer=_CLASS_NAMES[label],
            ))
        splits[split] = items
    return Dataset(train=splits["train"], test=splits["test"])


def mask_bundle(bundle: ModalityBundle, condition: str) -> ModalityBundle:
    """Restrict a bundle to an evaluation condition."""
    if condition == "both":
        return bundle
    if condition == "image-only":
        if not bundle.image_present:
            raise ValueError("bundle has no image features to keep")
        return ModalityBundle(image_features=bundle.image_features)
    if condition == "point-only":
        if not bundle.point_present:
            raise ValueError("bundle has no point features to keep")
        return ModalityBundle(point_features=bundle.point_features)
    raise ValueError(f"unknown condition {condition!r}; allowed: {CONDITIONS}")


def nearest_centroid_accuracy(train: list, test: list, condition: str = "both") -> float:
    """Brute-force nearest-centroid classifier accuracy on raw features."""

    def feats(ex: Example) -> np.ndarray:
        b = ex.bundle
        if condition == "both":
            return np.concatenate([b.image_features, b.point_features])
        if condition == "image-only":
            return b.image_features
        if condition == "point-only":
            return b.point_features
        raise ValueError(f"unknown condition {condition!r}")

    by_answer: dict[str, list[np.ndarray]] = {}
    for ex in train:
        by_answer.setdefault(ex.answer, []).append(feats(ex))
    centroids = {a: np.mean(v, axis=0) for a, v in by_answer.items()}
    answers = sorted(centroids)
    correct = 0
    for ex in test:
        x = feats(ex)
        best = min(answers, key=lambda a: float(np.sum((x - centroids[a]) ** 2)))
        correct += best == ex.answer
    return correct / len(test)


def modality_dropout(bundle: ModalityBundle, p: float,
                     rng: np.random.Generator) -> ModalityBundle:
    """Independently drop each present modality with probability p.

    Draws one uniform per present modality, in image-then-point order. If
    every present modality would be dropped, the last one is retained so the
    bundle never goes empty.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    present = []
    if bundle.image_present:
        present.append("image")
    if bundle.point_present:
        present.append("point")
    dropped = {m: bool(rng.random() < p) for m in present}
    if all(dropped.values()):
        dropped[present[-1]] = False
    return ModalityBundle(
        image_features=None if dropped.get("image", True) else bundle.image_features,
        point_features=None if dropped.get("point", True) else bundle.point_features,
    )


# -- model assembly ----------------------------------------------------------


@dataclass
class Model:
    config: TrainConfig
    vocab: Vocab
    imf: ImfParams
    projector: Mlp
    decoder: AnswerDecoder

    def parameters(self) -> list[Parameter]:
        return self.imf.parameters() + self.projector.parameters() + self.decoder.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if not p.name or p.name in out:
                raise ValueError(f"parameter name missing or duplicated: {p.name!r}")
            out[p.name] = p
        return out


def build_model(config: TrainConfig, vocab: Vocab) -> Model:
    """Seeded model construction; init order is fixed for reproducibility."""
    rng = derive_rng("model-init", config.seed)
    enc_dims = [config.encoder_hidden, config.encoded_dim]
    imf = ImfParams(
        encoder_image=Mlp([config.image_dim] + enc_dims, ["tanh", "identity"],
                          rng, name="imf.encoder_image"),
        encoder_point=Mlp([config.point_dim] + enc_dims, ["tanh", "identity"],
                          rng, name="imf.encoder_point"),
        head_mu=Mlp([2 * config.encoded_dim, config.latent_dim], ["identity"],
                    rng, name="imf.head_mu"),
        head_log_sigma=Mlp([2 * config.encoded_dim, config.latent_dim], ["identity"],
                           rng, name="imf.head_log_sigma"),
    )
    projector = Mlp(
        [config.latent_dim, config.vision_token_count * config.model_dim],
        ["identity"], rng, name="projector",
    )
    decoder = AnswerDecoder(config.decoder_config(), vocab, rng, name="decoder")
    return Model(config=config, vocab=vocab, imf=imf, projector=projector, decoder=decoder)


# -- loss --------------------------------------------------------------------


def _example_pass(model: Model, ex: Example, eps: np.ndarray, with_grads: bool):
    """Forward (and optional backward) for one example; returns (ce, kl)."""
    cfg = model.config
    fused, trace = fuse_traced(ex.bundle, model.imf, eps)
    y, proj_tape = model.projector.forward(fused.z.reshape(1, -1))
    h_v = y.reshape(cfg.vision_token_count, cfg.model_dim)
    inp = DecoderInput(h_v=h_v, question_ids=tokenize(ex.question, model.vocab))
    gold = answer_ids(ex.answer, model.vocab)
    ce, tape = model.decoder.ce_loss(inp, gold)
    if with_grads:
        d_hv = model.decoder.ce_backward(tape)
        dz = model.projector.backward(proj_tape, d_hv.reshape(1, -1))
        fuse_backward(model.imf, trace, dz, kl_weight=cfg.kl_weight)
    return ce, fused.kl


def _batch_pass(batch: list, model: Model, rng: np.random.Generator,
                with_grads: bool) -> tuple[float, dict]:
    if not batch:
        raise ValueError("batch is empty")
    ce_sum = kl_sum = 0.0
    for ex in batch:
        eps = rng.standard_normal(model.imf.latent_dim)
        ce, kl = _example_pass(model, ex, eps, with_grads)
        ce_sum += ce
        kl_sum += kl
    n = len(batch)
    if with_grads:
        for p in model.parameters():
            p.grad *= 1.0 / n
    ce_mean, kl_mean = ce_sum / n, kl_sum / n
    total = ce_mean + model.config.kl_weight * kl_mean
    return total, {"ce": ce_mean, "kl": kl_mean}


def total_loss(batch: list, model: Model, rng: np.random.Generator) -> tuple[float, dict]:
    """mean(ce) + kl_weight * mean(kl) over the batch; eps drawn from rng."""
    return _batch_pass(batch, model, rng, with_grads=False)


def loss_and_grads(batch: list, model: Model, rng: np.random.Generator) -> tuple[float, dict]:
    """Like total_loss, but also accumulates analytic grads into the model.

    Per-sample contributions are rescaled by 1/batch at the end, so call
    this with freshly zeroed grads (Adam.step leaves them that way).
    """
    return _batch_pass(batch, model, rng, with_grads=True)


# -- training loop -------------------------------------------------------------


def train(config: TrainConfig, dataset: Dataset) -> tuple["Checkpoint", list[dict]]:
    """Mini-batched Adam over the train split; returns checkpoint and trace.

    Per batch: modality dropout on each bundle, fresh eps per sample, one
    optimizer step. Aborts with a diagnostic if any batch loss goes
    non-finite. The loss trace records per-epoch means over samples.
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    vocab = Vocab.build(
        [ex.question for ex in dataset.train] + [ex.answer for ex in dataset.train]
    )
    model = build_model(config, vocab)
    opt = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = derive_rng("train-loop", config.seed)
    n = len(dataset.train)
    trace: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum = ce_sum = kl_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [
                Example(
                    id=dataset.train[i].id,
                    bundle=modality_dropout(
                        dataset.train[i].bundle, config.modality_dropout_p, rng),
                    question=dataset.train[i].question,
                    answer=dataset.train[i].answer,
                    qtype=dataset.train[i].qtype,
                )
                for i in idx
            ]
            ids = ", ".join(ex.id for ex in batch)
            try:
                loss, comps = loss_and_grads(batch, model, rng)
                if not np.isfinite(loss):
                    raise NumericError("loss is not finite")
                opt.step()
            except NumericError as exc:
                raise NumericError(
                    f"aborting: epoch {epoch}, batch starting at sample "
                    f"{start} (items: {ids}): {exc}"
                ) from exc
            loss_sum += loss * len(batch)
            ce_sum += comps["ce"] * len(batch)
            kl_sum += comps["kl"] * len(batch)
        trace.append({
            "epoch": epoch,
            "loss": loss_sum / n,
            "ce": ce_sum / n,
            "kl": kl_sum / n,
        })
    ckpt = Checkpoint(
        params={name: p.value.copy() for name, p in model.named_parameters().items()},
        vocab_tokens=list(vocab.tokens),
        config=config,
        rng_state=rng.bit_generator.state,
    )
    return ckpt, trace


# -- inference & evaluation helpers -------------------------------------------


def decode_answer(model: Model, ex: Example, condition: str = "both") -> str:
    """Greedy answer under an evaluation condition, via the mean latent."""
    bundle = mask_bundle(ex.bundle, condition)
    fused = fuse(bundle, model.imf, mode="infer")
    y, _ = model.projector.forward(fused.z.reshape(1, -1))
    h_v = y.reshape(model.config.vision_token_count, model.config.model_dim)
    inp = DecoderInput(h_v=h_v, question_ids=tokenize(ex.question, model.vocab))
    return model.decoder.greedy_decode(inp)


def condition_accuracy(model: Model, examples: list, condition: str = "both") -> float:
    """Normalized exact-match accuracy of greedy decoding under a condition."""
    from .evalkit import normalize

    if not examples:
        raise ValueError("no examples to evaluate")
    hits = sum(
        normalize(decode_answer(model, ex, condition)) == normalize(ex.answer)
        for ex in examples
    )
    return hits / len(examples)


def accuracy_by_condition(model: Model, examples: list,
                          conditions: Iterable[str] = CONDITIONS) -> dict:
    return {c: condition_accuracy(model, examples, c) for c in conditions}


def missing_modality_degradation(acc: dict) -> float:
    """How much accuracy falls from 'both' to the single-modality average."""
    return acc["both"] - 0.5 * (acc["image-only"] + acc["point-only"])


# -- corpus featurization ------------------------------------------------------


def featurize_pairs(pairs: list, config: TrainConfig,
                    respect_tags: bool = True) -> list[Example]:
    """Deterministic stand-in features for generated QA pairs.

    Real visual backbones are out of scope, so each distinct answer string
    gets a fixed per-modality centroid (seed-independent) and every item adds
    seeded noise around it. With respect_tags=True the bundle carries only
    the modalities named by the pair's tag; with False both are synthesized
    (used at evaluation time so every condition can be exercised).
    """
    examples = []
    for pair in pairs:
        feats = {}
        for modality, dim in (("image", config.image_dim), ("point", config.point_dim)):
            centroid = derive_rng("corpus-centroid", modality, pair.answer).standard_normal(dim)
            noise = derive_rng("corpus-noise", config.seed, pair.id, modality).normal(
                0.0, config.feature_noise, size=dim)
            feats[modality] = centroid + noise + config.feature_offset
        if respect_tags:
            want_image = pair.modality in ("image", "point-image")
            want_point = pair.modality in ("point", "point-image")
        else:
            want_image = want_point = True
        examples.append(Example(
            id=pair.id,
            bundle=ModalityBundle(
                image_features=feats["image"] if want_image else None,
                point_features=feats["point"] if want_point else None,
            ),
            question=pair.question,
            answer=pair.answer,
            qtype=pair.qtype,
        ))
    return examples


# -- checkpoint persistence ----------------------------------------------------


@dataclass
class Checkpoint:
    params: dict
    vocab_tokens: list
    config: TrainConfig
    rng_state: Optional[dict] = None
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """JSON container: version, config echo, vocab, rng state, named blobs."""
    payload = {
        "format_version": ckpt.version,
        "config": asdict(ckpt.config),
        "vocab": list(ckpt.vocab_tokens),
        "rng_state": ckpt.rng_state,
        "parameters": {
            name: {"shape": list(value.shape), "data": value.ravel().tolist()}
            for name, value in ckpt.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"corrupt checkpoint {path}: missing format_version")
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint has format version {version}, this build reads "
            f"{CHECKPOINT_VERSION}"
        )
    try:
        config = TrainConfig.from_dict(payload["config"])
        params = {}
        for name, blob in payload["parameters"].items():
            arr = np.array(blob["data"], dtype=np.float64).reshape(blob["shape"])
            params[name] = arr
        vocab_tokens = list(payload["vocab"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return Checkpoint(
        params=params,
        vocab_tokens=vocab_tokens,
        config=config,
        rng_state=payload.get("rng_state"),
        version=version,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    """Rebuild the model and install every stored parameter by name."""
    model = build_model(ckpt.config, Vocab(ckpt.vocab_tokens))
    named = model.named_parameters()
    missing = sorted(set(named) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(named))
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {', '.join(missing)}")
    if extra:
        raise CheckpointError(f"checkpoint has unknown parameters: {', '.join(extra)}")
    for name, p in named.items():
        stored = ckpt.params[name]
        if stored.shape != p.value.shape:
            raise CheckpointError(
                f"parameter {name} has shape {stored.shape} in the checkpoint, "
                f"model expects {p.value.shape}"
            )
        p.value[:] = stored
    return model
