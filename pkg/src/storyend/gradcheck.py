"""Central finite-difference verification of every differentiable op and
of the end-to-end micro pipeline (graphs -> RGCN -> fusion -> injector ->
decoder -> joint loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import training as TR
from .synthdata import make_synthetic_corpus
from .decoder import LabelVocab, Vocab
from .model import StoryEndingModel
from .tensor import Tensor

H = 1e-4
RTOL = 1e-3
ATOL = 1e-5


@dataclass
class OpReport:
    name: str
    max_rel_err: float
    passed: bool


def _rel_err(analytic, numeric):
    return abs(analytic - numeric) / max(ATOL / RTOL, abs(analytic), abs(numeric))


def _check(name, make_scalar, leaves, rng, samples=6):
    """Compare tape gradients of `make_scalar()` against central
    differences on randomly sampled components of `leaves`."""
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    with T.Tape():
        loss = make_scalar()
        T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        grad = leaf.grad.reshape(-1)
        count = min(samples, flat.size)
        for idx in rng.choice(flat.size, size=count, replace=False):
            orig = flat[idx]
            flat[idx] = orig + H
            up = make_scalar().item()
            flat[idx] = orig - H
            down = make_scalar().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * H)
            analytic = grad[idx]
            err = _rel_err(analytic, numeric)
            if abs(analytic - numeric) > ATOL + RTOL * max(abs(analytic), abs(numeric)):
                worst = max(worst, err)
            else:
                worst = max(worst, min(err, RTOL))
    return OpReport(name, worst, worst <= RTOL)


def _rand(rng, *shape, away_from_zero=False):
    data = rng.uniform(-2.0, 2.0, shape)
    if away_from_zero:
        # keep ReLU inputs off the kink so central differences are valid
        data = np.where(np.abs(data) < 0.05, 0.05 * np.sign(data) + (data == 0) * 0.05, data)
    return Tensor(data)


def op_checks(seed):
    """One finite-difference report per differentiable op."""
    rng = np.random.default_rng(seed)
    reports = []

    a = _rand(rng, 3, 4)
    b = _rand(rng, 4, 2)
    w = _rand(rng, 3, 2)
    reports.append(_check(
        "matmul", lambda: T.tsum(T.matmul(a, b) * w), [a, b], rng))

    x = _rand(rng, 2, 5)
    wx = _rand(rng, 2, 5)
    reports.append(_check(
        "softmax", lambda: T.tsum(T.softmax(x, axis=-1) * wx), [x], rng))

    r = _rand(rng, 3, 3, away_from_zero=True)
    wr = _rand(rng, 3, 3)
    reports.append(_check("relu", lambda: T.tsum(T.relu(r) * wr), [r], rng))

    s = _rand(rng, 6)
    ws = _rand(rng, 6)
    reports.append(_check("sigmoid", lambda: T.tsum(T.sigmoid(s) * ws), [s], rng))

    ln_x = _rand(rng, 4, 5)
    ln_g = _rand(rng, 5)
    ln_b = _rand(rng, 5)
    wl = _rand(rng, 4, 5)
    reports.append(_check(
        "layer_norm",
        lambda: T.tsum(T.layer_norm(ln_x, ln_g, ln_b) * wl),
        [ln_x, ln_g, ln_b], rng))

    mp = _rand(rng, 5, 3)
    mask = np.array([True, False, True, True, False])
    wm = _rand(rng, 3)
    reports.append(_check(
        "mean_pool", lambda: T.tsum(T.mean_pool(mp, mask) * wm), [mp], rng))

    ce = _rand(rng, 7)
    reports.append(_check("cross_entropy", lambda: T.cross_entropy(ce, 2), [ce], rng))

    sce = _rand(rng, 4, 6)
    targets = rng.integers(0, 6, size=4)
    smask = np.array([True, True, False, True])
    reports.append(_check(
        "sequence_cross_entropy",
        lambda: T.sequence_cross_entropy(sce, targets, smask), [sce], rng))

    p_raw = _rand(rng, 5)
    labels = rng.integers(0, 2, size=5).astype(float)
    reports.append(_check(
        "binary_cross_entropy",
        lambda: T.binary_cross_entropy(T.sigmoid(p_raw), labels), [p_raw], rng))

    mu = _rand(rng, 3, 4)
    mv = _rand(rng, 3, 4)
    reports.append(_check("mul", lambda: T.tsum(T.mul(mu, mv) * mu), [mu, mv], rng))

    ga = _rand(rng, 6, 3)
    wg = _rand(rng, 4, 3)
    reports.append(_check(
        "gather_rows",
        lambda: T.tsum(T.gather_rows(ga, [0, 2, 2, 5]) * wg), [ga], rng))

    rows = [_rand(rng, 4) for _ in range(3)]
    wst = _rand(rng, 3, 4)
    reports.append(_check(
        "stack_rows", lambda: T.tsum(T.stack_rows(rows) * wst), rows, rng))
    return reports


def micro_model(seed, corpus):
    """Tiny model (d=8, one layer everywhere) over a 2-story corpus."""
    from .decoder import ModelConfig
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d_model=8, n_heads=2, dec_layers=1, enc_layers=1,
                      reason_layers=1, fuse_layers=1, max_len=16)
    vocab = Vocab.from_records(corpus)
    categories = LabelVocab([c for rec in corpus for _, c, _ in rec.scene_objects])
    predicates = LabelVocab([p for rec in corpus for _, p, _ in rec.scene_relations])
    return StoryEndingModel(cfg, vocab, categories, predicates, rng=rng)


def pipeline_check(seed, samples=24):
    """Finite differences through the whole joint objective on 2 stories,
    including a forced root corruption so the detection path is live."""
    rng = np.random.default_rng(seed)
    corpus = make_synthetic_corpus(2, np.random.default_rng(seed + 1))
    model = micro_model(seed, corpus)
    # Check at a generic parameter point: structured initial values (zero
    # biases, unit gains) can park ReLU pre-activations exactly on their
    # kink, where central differences are invalid at any step size.
    jitter = np.random.default_rng(seed + 3)
    for name in model.params.names():
        data = model.params[name].data
        data += 0.02 * jitter.standard_normal(data.shape)
    config = TR.TrainingConfig(d_model=8, n_heads=2, dec_layers=1, enc_layers=1,
                               reason_layers=1, fuse_layers=1, max_len=16,
                               corruption_prob=1.0, alpha=0.2, seed=seed)
    plans = TR.plan_corruption(2, config.n_sentences, 1.0, np.random.default_rng(seed + 2))

    def make_scalar():
        loss, _, _ = TR.batch_losses(model, corpus, config, None, plans=plans)
        return loss

    model.params.zero_grad()
    with T.Tape():
        T.backward(make_scalar())

    names = model.params.names()
    worst = 0.0
    # A finer step than the per-op checks: the composed loss has many ReLU
    # kinks, and the secant needs to stay on one smooth piece.
    h = 1e-6
    for _ in range(samples):
        name = names[rng.integers(len(names))]
        t = model.params[name]
        flat = t.data.reshape(-1)
        idx = int(rng.integers(flat.size))
        orig = flat[idx]
        flat[idx] = orig + h
        up = make_scalar().item()
        flat[idx] = orig - h
        down = make_scalar().item()
        flat[idx] = orig + h / 2
        up_half = make_scalar().item()
        flat[idx] = orig - h / 2
        down_half = make_scalar().item()
        flat[idx] = orig
        numeric = (up - down) / (2 * h)
        numeric_half = (up_half - down_half) / h
        # A smooth loss gives step-size-consistent secants; a probe whose
        # interval straddles a remaining kink does not, and no step size
        # recovers the tape's one-sided derivative there, so skip it.
        # A wrong analytic gradient cannot trip this filter.
        if abs(numeric - numeric_half) > 1e-3 * max(1.0, abs(numeric)):
            continue
        analytic = t.grad.reshape(-1)[idx]
        if abs(analytic - numeric) > ATOL + RTOL * max(abs(analytic), abs(numeric)):
            worst = max(worst, _rel_err(analytic, numeric))
        else:
            worst = max(worst, min(_rel_err(analytic, numeric), RTOL))
    return OpReport("micro_pipeline", worst, worst <= RTOL)


def run_suite(seed):
    """Every op exactly once plus the micro pipeline; list of OpReports."""
    reports = op_checks(seed)
    reports.append(pipeline_check(seed))
    return reports
