"""Built-in diagnostics: independent re-derivations of the core numerics.

Each check recomputes a quantity the library produces through a second,
deliberately different route -- numeric differentiation instead of the
tape, pair counting instead of the trapezoid sweep, a hand formula
instead of composed ops -- and compares the two at pinned tolerances.
``run_all`` returns one result per check; the CLI turns a failure into a
nonzero exit code.  The whole battery is cheap enough to run before any
long experiment.
"""

from __future__ import annotations

import itertools
import tempfile
from dataclasses import dataclass

import numpy as np

from . import engine, metrics
from .checkpoint import load_checkpoint
from .continual import (
    LossWeights,
    MethodKind,
    compose_loss,
    distillation_term,
    ewc_penalty,
    lwf_weight,
    run_sequence,
)
from .engine import ParamSet, Tape, Tensor
from .network import BackboneSpec, HeadSpec, InverseSpec, Network

GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-6
ROUTE_TOL = 1e-5
EWC_VALUE_TOL = 1e-9
EWC_GRAD_TOL = 1e-7
AUC_TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _numeric_grads(loss_fn, arrays, h=1e-5):
    """Central differences, one entry at a time, arrays perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.ravel(), g.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_fn()
            flat[j] = orig - h
            fm = loss_fn()
            flat[j] = orig
            gf[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(seed=0):
    """Full training-loss gradient vs. numeric differentiation.

    Builds the smallest interesting network (two heads plus inverse, a few
    hundred weights), assembles the richest loss the library composes --
    task term, distillation term through a frozen head, reconstruction
    term through a frozen inverse -- and differentiates every trainable
    entry both ways.  Runs at a jittered parameter point in float64 so no
    pre-activation sits exactly on a relu kink, where one-sided
    conventions and symmetric differences legitimately disagree.
    """
    rng = np.random.default_rng(seed)
    net = Network(BackboneSpec((8, 8, 1), widths=(2, 4, 4)),
                  [HeadSpec(3, "new_head")], inverse=InverseSpec((4,)))
    params = net.build_params(seed=seed)
    params.add_group("old_head_1", net.init_head("old_head_1", seed + 1, classes=3))
    for t in params.tensors():
        t.data = (t.data + 0.05 * rng.standard_normal(t.data.shape)).astype(np.float64)
    params.freeze("old_head_1")
    params.freeze("inverse")

    images = rng.random((4, 8, 8, 1))
    labels = rng.integers(0, 3, 4)
    stored = rng.normal(size=(4, 3))
    weights = LossWeights()

    def loss_value():
        z = net.backbone_forward(Tensor(images), params)
        _, logits = net.head_logits(z, params.group("new_head"))
        _, old_logits = net.head_logits(z, params.group("old_head_1"))
        parts = {
            "task": engine.softmax_cross_entropy(logits, labels),
            "distill": {"old_head_1": distillation_term(old_logits, stored)},
            "rec": net.reconstruction_loss(z, params.group("old_head_1"),
                                           params.group("inverse")),
        }
        return compose_loss(MethodKind.PROPOSED, 2, parts, weights)

    with Tape() as tape:
        loss = loss_value()
    engine.backward(tape, loss)

    trainable = params.tensors(trainable_only=True)
    numeric = _numeric_grads(lambda: float(loss_value().data),
                             [t.data for t in trainable])
    checked = 0
    worst = 0.0
    for t, num in zip(trainable, numeric):
        if t.grad is None:
            return CheckResult("gradients-match-fd", False,
                               f"missing gradient on a {t.data.shape} tensor")
        diff = np.abs(t.grad - num)
        bound = GRAD_ATOL + GRAD_RTOL * np.abs(num)
        worst = max(worst, float((diff - bound).max()))
        checked += t.data.size
    passed = worst <= 0.0
    return CheckResult(
        "gradients-match-fd", passed,
        f"{checked} parameters, worst tolerance excess {worst:.2e} "
        f"(rtol {GRAD_RTOL}, atol {GRAD_ATOL})")


def check_head_routes(seed=0, trials=100):
    """Pooled 1x1-conv logits vs. the matched dense-after-pooling route.

    Pooling is linear, so projecting then averaging must equal averaging
    then projecting with the same weights; the two code paths share
    nothing past the parameter arrays.
    """
    rng = np.random.default_rng(seed)
    net = Network(BackboneSpec((8, 8, 1), widths=(4, 8, 8)), [HeadSpec(3, "new_head")])
    worst = 0.0
    for i in range(trials):
        head = net.init_head("new_head", seed=int(rng.integers(1 << 30)))
        z = Tensor(rng.normal(size=(2, 2, 2, 8)))
        _, pooled = net.head_logits(z, head)
        dense = net.dense_head_logits(z, head)
        worst = max(worst, float(np.abs(pooled.data - dense.data).max()))
    return CheckResult("head-routes-agree", worst <= ROUTE_TOL,
                       f"{trials} random feature maps, max route gap {worst:.2e} "
                       f"(tol {ROUTE_TOL})")


def check_ewc_penalty(seed=0):
    """Composed quadratic penalty vs. its closed form, value and gradient."""
    rng = np.random.default_rng(seed)
    shapes = [(3, 3, 2, 4), (4,), (5, 3)]
    params = ParamSet()
    tensors = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    params.add_group("shared", tensors)
    anchor = {"shared": [rng.normal(size=s) for s in shapes]}
    fisher = {"shared": [rng.uniform(0.0, 2.0, size=s) for s in shapes]}
    lam = 0.37

    with Tape() as tape:
        loss = ewc_penalty(params, anchor, fisher, lam)
    engine.backward(tape, loss)

    want = 0.5 * lam * sum(
        float((f * (t.data - a) ** 2).sum())
        for t, a, f in zip(tensors, anchor["shared"], fisher["shared"]))
    value_gap = abs(float(loss.data) - want) / max(abs(want), 1.0)

    grad_gap = 0.0
    for t, a, f in zip(tensors, anchor["shared"], fisher["shared"]):
        analytic = lam * f * (t.data - a)
        grad_gap = max(grad_gap, float(np.abs(t.grad - analytic).max()))

    passed = value_gap <= EWC_VALUE_TOL and grad_gap <= EWC_GRAD_TOL
    return CheckResult("ewc-penalty-analytic", passed,
                       f"value gap {value_gap:.2e} (tol {EWC_VALUE_TOL}), "
                       f"gradient gap {grad_gap:.2e} (tol {EWC_GRAD_TOL})")


def _pairwise_auc(scores, labels):
    # direct definition: fraction of (positive, negative) pairs ranked
    # correctly, ties counted half
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def check_auc(seed=0, random_sets=1000):
    """Trapezoid ROC area vs. direct pair counting.

    Exhausts every label pattern up to 12 examples on tie-heavy score
    grids, then adds random score/label sets; the two computations must
    agree to near machine precision.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    grid = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    for n in range(2, 13):
        scores = grid[rng.integers(0, grid.size, n)]
        for pattern in itertools.product((0, 1), repeat=n):
            labels = np.array(pattern)
            if labels.min() == labels.max():
                continue  # needs both classes
            auc, _ = metrics.roc_auc(scores, labels)
            worst = max(worst, abs(auc - _pairwise_auc(scores, labels)))
            cases += 1
    for _ in range(random_sets):
        n = int(rng.integers(2, 40))
        if rng.random() < 0.5:
            scores = grid[rng.integers(0, grid.size, n)]
        else:
            scores = rng.random(n)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[rng.integers(0, n)] = 1 - labels[0]
        auc, _ = metrics.roc_auc(scores, labels)
        worst = max(worst, abs(auc - _pairwise_auc(scores, labels)))
        cases += 1
    return CheckResult("auc-matches-pairwise", worst <= AUC_TOL,
                       f"{cases} score/label sets, max gap {worst:.2e} (tol {AUC_TOL})")


def check_frozen_groups(seed=0):
    """Groups pinned after stage 1 must survive later stages bit for bit."""
    from .config import ExperimentConfig

    cfg = ExperimentConfig.from_dict({
        "method": "proposed", "stages": 3, "seeds": [seed],
        "data": {"kind": "synthetic", "classes": 3, "n_per_class": 30,
                 "noise_sigma": 0.25, "test_n_per_class": 12, "val_count": 18},
        "network": {"widths": [4, 8, 8], "inverse_widths": [8]},
        "schedule": {"lr0": 0.01, "epochs": 2, "decay_period": 2},
        "batch_size": 16, "eval_batch": 64,
    })
    with tempfile.TemporaryDirectory() as td:
        run_sequence(cfg, seed=seed, out_dir=td)
        first = load_checkpoint(f"{td}/stage1.ckpt")
        last = load_checkpoint(f"{td}/stage3.ckpt")
    pairs = [("new_head", "old_head_1"), ("inverse", "inverse")]
    for src, dst in pairs:
        for a, b in zip(first.params.group(src), last.params.group(dst)):
            if a.data.dtype != b.data.dtype or not np.array_equal(a.data, b.data):
                return CheckResult(
                    "frozen-groups-pinned", False,
                    f"stage-3 '{dst}' drifted from stage-1 '{src}'")
    if last.params.frozen != {"old_head_1", "inverse"}:
        return CheckResult("frozen-groups-pinned", False,
                           f"unexpected frozen set {sorted(last.params.frozen)}")
    n = sum(t.data.size for name in ("old_head_1", "inverse")
            for t in last.params.group(name))
    return CheckResult("frozen-groups-pinned", True,
                       f"3-stage run, {n} pinned values identical")


def check_preservation_weights():
    """Per-head distillation weights follow base/(K-1) exactly."""
    cases = [(2, 0.1 / 1), (3, 0.1 / 2), (4, 0.1 / 3), (7, 0.1 / 6)]
    for k, want in cases:
        if lwf_weight(k) != want:
            return CheckResult("preservation-weights", False,
                               f"stage count {k}: got {lwf_weight(k)!r}, want {want!r}")
    total = sum(lwf_weight(5) for _ in range(4))
    return CheckResult("preservation-weights", True,
                       f"{len(cases)} stage counts exact; 4 heads at K=5 sum to {total}")


ALL_CHECKS = (
    check_gradients,
    check_head_routes,
    check_ewc_penalty,
    check_auc,
    check_frozen_groups,
    check_preservation_weights,
)


def run_all(seed=0):
    """Run every diagnostic; a crash inside a check is itself a failure."""
    results = []
    for fn in ALL_CHECKS:
        kwargs = {} if fn is check_preservation_weights else {"seed": seed}
        try:
            results.append(fn(**kwargs))
        except Exception as exc:  # noqa: BLE001 - surface as a failed check
            name = fn.__name__.replace("check_", "").replace("_", "-")
            results.append(CheckResult(name, False, f"raised {type(exc).__name__}: {exc}"))
    return results
