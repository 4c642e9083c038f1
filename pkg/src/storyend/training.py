"""Joint-objective training: generation loss plus incoherence detection,
with per-root corruption, linear warmup, gradient clipping, and a CSV
metrics log.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .decoder import LabelVocab, ModelConfig, Vocab
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import StoryEndingModel
from .optim import Adam, clip_grad_norm
from .params import save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    """Training hyperparameters plus the model dimensions.

    Defaults follow the reference recipe (alpha 0.2, lr 2e-4, weight decay
    0.01, warmup proportion 0.1, corruption probability 0.1) at desk-scale
    batch size. `max_steps` = 0 means run all epochs.
    """

    alpha: float = 0.2
    lr: float = 2e-4
    batch_size: int = 8
    epochs: int = 25
    max_steps: int = 0
    weight_decay: float = 0.01
    warmup_proportion: float = 0.1
    corruption_prob: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    clean_gen_pass: bool = False
    d_model: int = 64
    n_heads: int = 4
    dec_layers: int = 2
    enc_layers: int = 1
    reason_layers: int = 2
    fuse_layers: int = 2
    max_len: int = 25
    n_sentences: int = 4
    self_loop: bool = False
    vector_gate: bool = False
    cross_modal_edges: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ConfigError(f"corruption_prob must lie in [0, 1], got {self.corruption_prob}")
        if not 0.0 <= self.warmup_proportion <= 1.0:
            raise ConfigError(f"warmup_proportion must lie in [0, 1], got {self.warmup_proportion}")

    def model_config(self):
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, dec_layers=self.dec_layers,
            enc_layers=self.enc_layers, reason_layers=self.reason_layers,
            fuse_layers=self.fuse_layers, max_len=self.max_len,
            n_sentences=self.n_sentences, self_loop=self.self_loop,
            vector_gate=self.vector_gate, cross_modal_edges=self.cross_modal_edges)


_BOOL = {"true": True, "false": False}


def config_to_text(config):
    lines = ["# storyend training configuration"]
    for f in fields(TrainingConfig):
        value = getattr(config, f.name)
        lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


def config_from_text(text):
    """Parse the flat `key = value` config format; every key is required."""
    known = {f.name: f.type for f in fields(TrainingConfig)}
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ConfigError(f"line {line_no}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key '{key}'")
        kind = known[key]
        try:
            if kind in ("bool", bool):
                values[key] = _BOOL[value.lower()]
            elif kind in ("int", int):
                values[key] = int(value)
            else:
                values[key] = float(value)
        except (KeyError, ValueError):
            raise ConfigError(f"line {line_no}: bad value {value!r} for key '{key}'")
    missing = sorted(set(known) - set(values))
    if missing:
        raise ConfigError(f"missing config key '{missing[0]}'")
    return TrainingConfig(**values)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


# -- incoherence corruption ------------------------------------------------


@dataclass
class CorruptionOutcome:
    """Per-story replacement labels (1 = that sentence root was swapped)
    and the donor story index used for each replacement."""

    labels: np.ndarray
    donors: list  # entries: None or batch index of the donor story


def plan_corruption(batch_size, n_roots, corruption_prob, rng):
    """Sample the corruption decisions up front so a plan can be replayed
    (finite-difference checks re-run the forward pass bit-for-bit)."""
    plans = []
    for i in range(batch_size):
        labels = np.zeros(n_roots, dtype=np.int64)
        donors = [None] * n_roots
        if batch_size >= 2:
            for s in range(n_roots):
                if rng.random() < corruption_prob:
                    donor = int(rng.integers(batch_size - 1))
                    donor = donor if donor < i else donor + 1
                    labels[s] = 1
                    donors[s] = donor
        plans.append(CorruptionOutcome(labels=labels, donors=donors))
    return plans


def corrupt(states, corruption_prob, rng, plans=None):
    """Swap sentence-root features between batch members.

    Independently per root, with probability `corruption_prob`, a root's
    feature row is replaced by the same-index root of a uniformly chosen
    other story. Event rows and all edges are untouched. Returns the new
    per-story feature tensors plus the outcomes. A batch of one story
    cannot corrupt (no donor): all labels stay zero and a warning is
    logged.
    """
    n_roots = len(states[0].root_rows)
    if len(states) < 2 and corruption_prob > 0:
        log.warning("batch of 1 story: corruption disabled (no donor available)")
    if plans is None:
        plans = plan_corruption(len(states), n_roots, corruption_prob, rng)
    new_features = []
    for i, state in enumerate(states):
        plan = plans[i]
        if not plan.labels.any():
            new_features.append(state.semantic_features)
            continue
        rows = [T.row(state.semantic_features, r)
                for r in range(state.semantic_features.data.shape[0])]
        for s, donor in enumerate(plan.donors):
            if donor is not None:
                donor_state = states[donor]
                rows[state.root_rows[s]] = T.row(
                    donor_state.semantic_features, donor_state.root_rows[s])
        new_features.append(T.stack_rows(rows))
    return new_features, plans


def clf_loss(probs, labels):
    """Mean binary cross-entropy over the per-root replacement labels."""
    return T.binary_cross_entropy(probs, np.asarray(labels, dtype=np.float64))


def total_loss(gen_loss, detection_loss, alpha):
    """Joint objective: generation loss plus alpha times the detection loss."""
    return gen_loss + alpha * detection_loss


def warmup_lr(base_lr, step, total_steps, warmup_proportion):
    """Linear warmup over the first fraction of steps, then constant."""
    warmup_steps = int(total_steps * warmup_proportion)
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    return base_lr


@dataclass
class TrainResult:
    model: StoryEndingModel
    history: list  # rows: (step, loss, gen_loss, clf_loss, lr)


def batch_losses(model, records, config, rng, plans=None, corrupt_enabled=True):
    """Forward pass for one batch; returns (total, gen, clf) loss tensors.

    Pipeline per story: build graphs, per-modality reasoning, corruption,
    fusion, teacher-forced decoding, incoherence head.
    """
    states = [model.build_story(rec) for rec in records]
    if corrupt_enabled and config.corruption_prob > 0:
        corrupted, plans = corrupt(states, config.corruption_prob, rng, plans)
    else:
        plans = plans or plan_corruption(len(states), len(states[0].root_rows), 0.0, rng)
        corrupted = [s.semantic_features for s in states]
    gen_terms = []
    clf_terms = []
    for state, feats, plan in zip(states, corrupted, plans):
        fused = model.fuse_story(StoryStateView(state, feats))
        gen, final_hidden = model.generation_loss(fused)
        clf_terms.append(clf_loss(model.incoherence_probs(final_hidden), plan.labels))
        if config.clean_gen_pass and plan.labels.any():
            # Two-pass reading: the generation loss sees the uncorrupted plot.
            clean_fused = model.fuse_story(state)
            gen, _ = model.generation_loss(clean_fused)
        gen_terms.append(gen)
    n = float(len(records))
    gen_mean = gen_terms[0] * (1.0 / n)
    for term in gen_terms[1:]:
        gen_mean = gen_mean + term * (1.0 / n)
    clf_mean = clf_terms[0] * (1.0 / n)
    for term in clf_terms[1:]:
        clf_mean = clf_mean + term * (1.0 / n)
    return total_loss(gen_mean, clf_mean, config.alpha), gen_mean, clf_mean


def train(records, config, log_path=None, checkpoint_path=None):
    """Run the full training loop; deterministic given `config.seed`."""
    if not records:
        raise DataError("training corpus is empty")
    rng = np.random.default_rng(config.seed)
    vocab = Vocab.from_records(records)
    categories = LabelVocab(
        [cat for rec in records for _, cat, _ in rec.scene_objects])
    predicates = LabelVocab(
        [pred for rec in records for _, pred, _ in rec.scene_relations])
    model = StoryEndingModel(config.model_config(), vocab, categories, predicates, rng=rng)
    optimizer = Adam(model.params, lr=config.lr, weight_decay=config.weight_decay)

    steps_per_epoch = max(1, (len(records) + config.batch_size - 1) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps:
        total_steps = min(total_steps, config.max_steps)

    history = []
    writer = None
    log_file = None
    if log_path:
        log_file = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss", "gen_loss", "clf_loss", "lr"])

    step = 0
    try:
        done = False
        for _ in range(config.epochs):
            if done:
                break
            order = rng.permutation(len(records))
            for start in range(0, len(records), config.batch_size):
                batch = [records[i] for i in order[start:start + config.batch_size]]
                lr = warmup_lr(config.lr, step, total_steps, config.warmup_proportion)
                model.params.zero_grad()
                with T.Tape():
                    try:
                        loss, gen, clf = batch_losses(model, batch, config, rng)
                    except NumericError as exc:
                        raise NumericError(
                            f"training aborted at step {step}: {exc}") from exc
                    T.backward(loss)
                clip_grad_norm(model.params, config.grad_clip)
                optimizer.step(lr=lr)
                rows = (step, loss.item(), gen.item(), clf.item(), lr)
                history.append(rows)
                if writer:
                    writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in rows])
                step += 1
                if step >= total_steps:
                    done = True
                    break
    finally:
        if log_file:
            log_file.close()

    if checkpoint_path:
        save_checkpoint(checkpoint_path, model.params, meta=model.meta())
    return TrainResult(model=model, history=history)


# -- held-out incoherence evaluation ---------------------------------------


def detection_accuracy(model, records, rng):
    """Forced single-root corruption probe: for each story, one uniformly
    chosen sentence root is swapped with another story's same-index root;
    detection counts as correct when the head's argmax names that root.
    Chance level is 1/N_s."""
    if len(records) < 2:
        raise ContractError("detection probe needs at least 2 stories")
    states = [model.build_story(rec) for rec in records]
    n_roots = len(states[0].root_rows)
    hits = 0
    for i, state in enumerate(states):
        target = int(rng.integers(n_roots))
        donor = int(rng.integers(len(states) - 1))
        donor = donor if donor < i else donor + 1
        plan = CorruptionOutcome(labels=np.zeros(n_roots, dtype=np.int64),
                                 donors=[None] * n_roots)
        plan.labels[target] = 1
        plan.donors[target] = donor
        rows = [T.row(state.semantic_features, r)
                for r in range(state.semantic_features.data.shape[0])]
        donor_state = states[donor]
        rows[state.root_rows[target]] = T.row(
            donor_state.semantic_features, donor_state.root_rows[target])
        corrupted = T.stack_rows(rows)
        patched = StoryStateView(state, corrupted)
        fused = model.fuse_story(patched)
        _, final_hidden = model.generation_loss(fused)
        probs = model.incoherence_probs(final_hidden)
        if int(np.argmax(probs.data)) == target:
            hits += 1
    return hits / len(states)


class StoryStateView:
    """A StoryState with its semantic features swapped out."""

    def __init__(self, state, semantic_features):
        self.record = state.record
        self.semantic_graph = state.semantic_graph
        self.visual_graph = state.visual_graph
        self.semantic_features = semantic_features
        self.visual_features = state.visual_features
        self.root_rows = state.root_rows
