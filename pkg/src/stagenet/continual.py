"""Sequential-training methods and the stage lifecycle.

Seven method variants share one training loop and differ in which loss
terms they add and how parameter groups carry over between stages:

* ``ft``          -- plain fine-tuning on each new chunk.
* ``ewc``         -- quadratic penalty toward the previous stage's
                     parameters, weighted by a diagonal Fisher estimate.
* ``lwf``         -- one preservation head per past stage, each matching
                     pseudo logits recorded before training.
* ``lwf_plus``    -- a single preservation head for all past stages.
* ``ewc_lwf``     -- lwf plus the ewc penalty.
* ``ewc_lwf_plus``-- lwf_plus plus the ewc penalty.
* ``proposed``    -- lwf_plus's preservation head kept frozen at its
                     stage-1 values, plus a feature-reconstruction loss
                     through a frozen inverse head, which together pin the
                     feature space modeled in stage 1.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_mod
from . import data as data_mod
from . import engine
from .checkpoint import PseudoLogitStore, StageCheckpoint
from .engine import ShapeError, SGDMomentum, Tape, Tensor, ValidationError
from .metrics import EvalResult, roc_auc

_SHUFFLE_KEY = 0x51af
_FISHER_KEY = 0x269d


class MethodKind(enum.Enum):
    FT = "ft"
    EWC = "ewc"
    LWF = "lwf"
    LWF_PLUS = "lwf_plus"
    EWC_LWF = "ewc_lwf"
    EWC_LWF_PLUS = "ewc_lwf_plus"
    PROPOSED = "proposed"

    @classmethod
    def from_string(cls, s):
        try:
            return cls(s.strip().lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValidationError(f"unknown method '{s}' (expected one of: {names})") from None

    @property
    def uses_ewc(self):
        return self in (MethodKind.EWC, MethodKind.EWC_LWF, MethodKind.EWC_LWF_PLUS)

    @property
    def uses_distillation(self):
        return self in (MethodKind.LWF, MethodKind.LWF_PLUS, MethodKind.EWC_LWF,
                        MethodKind.EWC_LWF_PLUS, MethodKind.PROPOSED)

    @property
    def multi_head(self):
        """One preservation head per past stage."""
        return self in (MethodKind.LWF, MethodKind.EWC_LWF)

    @property
    def single_head(self):
        return self in (MethodKind.LWF_PLUS, MethodKind.EWC_LWF_PLUS, MethodKind.PROPOSED)

    @property
    def uses_inverse(self):
        return self is MethodKind.PROPOSED


@dataclass(frozen=True)
class LossWeights:
    lambda_lwf_base: float = 0.1   # per-head weight is this / (K - 1)
    lambda_lwf_plus: float = 0.1
    lambda_ewc: float = 0.1
    lambda_rec: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("lambda_lwf_base", "lambda_lwf_plus", "lambda_ewc", "lambda_rec"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")


@dataclass(frozen=True)
class Schedule:
    """Step-decay learning rate: lr0 * factor^floor((epoch-1)/period)."""

    lr0: float
    decay_factor: float = 0.1
    decay_period: int = 40
    epochs: int = 120
    momentum: float = 0.9
    weight_decay: float = 0.0001

    def __post_init__(self):
        if self.lr0 <= 0 or self.epochs < 1 or self.decay_period < 1:
            raise ValidationError(f"bad schedule {self}")

    def lr_at(self, epoch):
        return self.lr0 * self.decay_factor ** ((epoch - 1) // self.decay_period)


def lwf_weight(stage_count, base=0.1):
    """Per-old-head distillation weight base/(K-1) for K learning stages."""
    if stage_count < 2:
        raise ValidationError("no preservation heads exist before stage 2")
    return base / (stage_count - 1)


def distillation_term(current_logits, stored_logits, temperature=1.0):
    """Cross-entropy between current outputs and softened stored logits."""
    stored = np.asarray(stored_logits.data if isinstance(stored_logits, Tensor)
                        else stored_logits)
    if stored.shape != current_logits.data.shape:
        raise ShapeError(
            f"stored logits {stored.shape} vs current {current_logits.data.shape}")
    target = engine.softmax(stored.astype(current_logits.data.dtype), temperature=temperature)
    return engine.softmax_cross_entropy(current_logits, Tensor(target), temperature=temperature)


def ewc_penalty(params, anchor, fisher, lambda_ewc):
    """(lambda/2) * sum_j F_j (theta_j - theta*_j)^2 over anchored groups."""
    if set(anchor) != set(fisher):
        raise ShapeError(f"anchor groups {sorted(anchor)} != fisher groups {sorted(fisher)}")
    total = None
    for name in params.groups:
        if name not in anchor:
            continue
        group = params.group(name)
        if len(group) != len(anchor[name]) or len(group) != len(fisher[name]):
            raise ShapeError(f"group '{name}': anchor/fisher arity mismatch")
        for t, a, f in zip(group, anchor[name], fisher[name]):
            diff = engine.sub(t, Tensor(np.asarray(a, dtype=t.data.dtype)))
            term = engine.sum_all(engine.mul(engine.mul(diff, diff),
                                             Tensor(np.asarray(f, dtype=t.data.dtype))))
            total = term if total is None else engine.add(total, term)
    if total is None:
        raise ValidationError("anchor covers no parameter group")
    return engine.scale(total, lambda_ewc / 2.0)


def compose_loss(method, stage, parts, weights):
    """Combine loss parts exactly as the method prescribes at this stage.

    `parts` may carry: "task" (required), "distill" ({head name: term}),
    "ewc", "rec".  Terms that the method does not use at this stage are
    rejected, as are missing ones.
    """
    if "task" not in parts:
        raise ValidationError("task loss missing")
    need_distill = method.uses_distillation and stage >= 2
    need_ewc = method.uses_ewc and stage >= 2
    need_rec = method.uses_inverse
    distill = parts.get("distill") or {}

    if need_distill:
        expected = stage - 1 if method.multi_head else 1
        if len(distill) != expected:
            raise ValidationError(
                f"{method.value} at stage {stage} needs {expected} distillation term(s), got {len(distill)}")
    elif distill:
        raise ValidationError(f"{method.value} at stage {stage} takes no distillation terms")
    if need_ewc != ("ewc" in parts):
        raise ValidationError(f"{method.value} at stage {stage}: ewc term "
                              + ("missing" if need_ewc else "not allowed"))
    if need_rec != ("rec" in parts):
        raise ValidationError(f"{method.value} at stage {stage}: reconstruction term "
                              + ("missing" if need_rec else "not allowed"))
    unknown = set(parts) - {"task", "distill", "ewc", "rec"}
    if unknown:
        raise ValidationError(f"unknown loss parts {sorted(unknown)}")

    total = parts["task"]
    if need_distill:
        w = (lwf_weight(stage, weights.lambda_lwf_base) if method.multi_head
             else weights.lambda_lwf_plus)
        for name in _ordered_heads(distill):
            total = engine.add(total, engine.scale(distill[name], w))
    if need_ewc:
        total = engine.add(total, parts["ewc"])
    if need_rec:
        total = engine.add(total, engine.scale(parts["rec"], weights.lambda_rec))
    return total


def _head_index(name):
    return int(name.rsplit("_", 1)[1])


def _ordered_heads(names):
    return sorted(names, key=_head_index)


def stage_transition(net, method, stage, prev, seed):
    """Parameters to start this stage from, plus the preservation head names.

    Stage 1 draws everything fresh (the inverse head only for the method
    that trains one).  Later stages clone the previous checkpoint and apply
    the method's carry-over rule; the frozen set travels inside the
    returned ParamSet.
    """
    if stage == 1:
        if prev is not None:
            raise ValidationError("stage 1 cannot have a previous checkpoint")
        return net.build_params(seed, include_inverse=method.uses_inverse), []
    if prev is None:
        raise ValidationError(f"stage {stage} requires the previous checkpoint")
    params = prev.params.clone()
    old_heads = _ordered_heads(n for n in params.groups if n.startswith("old_head_"))

    def add_copied_head(name):
        fresh = net.init_head(name, seed, classes=net.heads["new_head"].classes)
        params.add_group(name, fresh)
        params.copy_values_from(name, prev.params.group("new_head"))
        old_heads.append(name)

    if method.multi_head:
        add_copied_head(f"old_head_{stage - 1}")
    elif method.single_head and stage == 2:
        add_copied_head("old_head_1")
        if method.uses_inverse:
            params.freeze("old_head_1")
            params.freeze("inverse")
    return params, old_heads


def pseudo_head_map(method, stage):
    """current preservation head -> head of the *previous* model that feeds it."""
    if stage < 2 or not method.uses_distillation:
        return {}
    if method.multi_head:
        mapping = {f"old_head_{i}": f"old_head_{i}" for i in range(1, stage - 1)}
        mapping[f"old_head_{stage - 1}"] = "new_head"
        return mapping
    return {"old_head_1": "new_head" if stage == 2 else "old_head_1"}


def forward_logits(net, params, images, head, eval_batch=256):
    """Pooled logits of one head over a stack of images, without recording."""
    outs = []
    for i in range(0, len(images), eval_batch):
        z = net.backbone_forward(Tensor(images[i:i + eval_batch]), params)
        _, logits = net.head_logits(z, params.group(head))
        outs.append(logits.data)
    return np.concatenate(outs, axis=0)


def evaluate_error(net, params, images, labels, head="new_head", eval_batch=256):
    logits = forward_logits(net, params, images, head, eval_batch)
    preds = np.argmax(logits, axis=-1)
    return float(np.mean(preds != np.asarray(labels)))


def precompute_pseudo_logits(net, prev_params, dataset, ids, head_map, stage,
                             checkpoint_hash="", eval_batch=256):
    """Record the previous model's outputs on the un-augmented current chunk.

    Runs before any update of the current stage; `head_map` names, for each
    preservation head of the *current* model, the previous model's head
    whose outputs it must match.
    """
    if not head_map:
        raise ValidationError("no preservation heads requested")
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ValidationError("empty chunk")
    for prev_head in head_map.values():
        if prev_head not in prev_params.groups:
            raise ValidationError(f"previous model has no head '{prev_head}'")
    rows = dataset.rows(ids)
    images = dataset.images[rows]
    logits = {int(e): {} for e in ids}
    for cur_head, prev_head in sorted(head_map.items()):
        out = forward_logits(net, prev_params, images, prev_head, eval_batch)
        for e, vec in zip(ids, out):
            logits[int(e)][cur_head] = vec.astype(np.float32)
    return PseudoLogitStore(stage=stage, checkpoint_hash=checkpoint_hash, logits=logits)


def estimate_fisher_diag(net, params, dataset, ids, seed, head="new_head"):
    """Empirical diagonal Fisher over the shared trunk and main head.

    Per example: sample a label from the model's own softmax, take the
    squared gradient of its log-probability, then average.  Sampling is
    keyed by example id and accumulation runs in id order, so the estimate
    cannot depend on how the chunk happened to be ordered.
    """
    ids = np.sort(np.asarray(ids))
    if ids.size == 0:
        raise ValidationError("empty chunk")
    covered = ("shared", head)
    fisher = {name: [np.zeros(t.data.shape, dtype=np.float64) for t in params.group(name)]
              for name in covered}
    for eid in ids:
        row = int(dataset.rows([eid])[0])
        x = Tensor(dataset.images[row])
        with Tape() as tape:
            z = net.backbone_forward(x, params)
            _, logits = net.head_logits(z, params.group(head))
            probs = engine.softmax(logits.data)
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(entropy=int(seed), spawn_key=(_FISHER_KEY, int(eid)))))
            label = int(np.searchsorted(np.cumsum(probs), rng.random()))
            label = min(label, len(probs) - 1)
            loss = engine.softmax_cross_entropy(logits, label)
        params.zero_grad()
        engine.backward(tape, loss)
        for name in covered:
            for acc, t in zip(fisher[name], params.group(name)):
                acc += t.grad.astype(np.float64) ** 2
    params.zero_grad()
    n = float(len(ids))
    return {name: [np.ascontiguousarray(a / n, dtype=np.float32) for a in arrays]
            for name, arrays in fisher.items()}


def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def train_stage(net, method, stage, params, old_heads, dataset, chunk_ids, val_ids,
                schedule, weights, seed, batch_size=64, eval_batch=256, aug_pad=0,
                pseudo=None, prev_fisher=None, prev_anchor=None, dual_head=False):
    """One stage of mini-batch SGD; returns the best-validation checkpoint.

    Epoch-end validation uses the main head only; the parameters returned
    are those of the best epoch (earliest wins ties).  Methods that anchor
    the next stage get a Fisher estimate and a parameter anchor computed
    from the selected model on this stage's chunk.
    """
    chunk_ids = np.asarray(chunk_ids)
    if chunk_ids.size == 0:
        raise ValidationError("empty training chunk")
    need_distill = method.uses_distillation and stage >= 2
    need_ewc = method.uses_ewc and stage >= 2
    if need_distill and pseudo is None:
        raise ValidationError(f"{method.value} at stage {stage} needs precomputed pseudo logits")
    if need_ewc and (prev_fisher is None or prev_anchor is None):
        raise ValidationError(f"{method.value} at stage {stage} needs fisher and anchor")

    task_labels = dataset.fine_labels if dual_head else dataset.labels
    rows_of = dataset.rows(chunk_ids)
    chunk_images = dataset.images[rows_of]
    chunk_task = task_labels[rows_of]
    chunk_coarse = dataset.labels[rows_of] if dual_head else None
    stored = ({h: pseudo.batch(chunk_ids, h).astype(np.float32) for h in old_heads}
              if need_distill else {})
    pos = {int(e): i for i, e in enumerate(chunk_ids)}

    val_rows = dataset.rows(val_ids)
    val_images = dataset.images[val_rows]
    val_labels = task_labels[val_rows]

    opt = SGDMomentum(params, lr=schedule.lr0, momentum=schedule.momentum,
                      weight_decay=schedule.weight_decay)
    best_err, best_params = None, None

    for epoch in range(1, schedule.epochs + 1):
        opt.lr = schedule.lr_at(epoch)
        shuffle_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=int(seed), spawn_key=(_SHUFFLE_KEY, stage, epoch))))
        order = shuffle_rng.permutation(chunk_ids)
        offsets = (data_mod.epoch_crop_offsets(seed, (stage << 16) | epoch,
                                               int(dataset.ids.max()), aug_pad)
                   if aug_pad else None)
        for batch_ids in _batches(order, batch_size):
            idx = np.fromiter((pos[int(e)] for e in batch_ids), dtype=np.int64)
            images = chunk_images[idx]
            if aug_pad:
                images = data_mod.augment_batch(images, batch_ids, aug_pad, offsets)
            with Tape() as tape:
                z = net.backbone_forward(Tensor(images), params)
                _, logits = net.head_logits(z, params.group("new_head"))
                task = engine.softmax_cross_entropy(logits, chunk_task[idx])
                if dual_head:
                    _, aux_logits = net.head_logits(z, params.group("aux_head"))
                    task = engine.add(task, engine.softmax_cross_entropy(
                        aux_logits, chunk_coarse[idx]))
                parts = {"task": task}
                if need_distill:
                    terms = {}
                    for h in old_heads:
                        _, lo = net.head_logits(z, params.group(h))
                        terms[h] = distillation_term(lo, stored[h][idx], weights.temperature)
                    parts["distill"] = terms
                if need_ewc:
                    parts["ewc"] = ewc_penalty(params, prev_anchor, prev_fisher,
                                               weights.lambda_ewc)
                if method.uses_inverse:
                    rec_head = "new_head" if stage == 1 else "old_head_1"
                    parts["rec"] = net.reconstruction_loss(
                        z, params.group(rec_head), params.group("inverse"))
                total = compose_loss(method, stage, parts, weights)
            engine.backward(tape, total)
            opt.step()
            params.zero_grad()

        val_err = evaluate_error(net, params, val_images, val_labels,
                                 eval_batch=eval_batch)
        if best_err is None or val_err < best_err:
            best_err, best_params = val_err, params.clone()

    fisher = anchor = None
    if method.uses_ewc:
        fisher = estimate_fisher_diag(net, best_params, dataset, chunk_ids, seed)
        anchor = {name: [t.data.copy() for t in best_params.group(name)]
                  for name in ("shared", "new_head")}
    return StageCheckpoint(stage=stage, params=best_params, val_error=best_err,
                           seed=seed, fisher=fisher, anchor=anchor)


class StageFailure(RuntimeError):
    """A stage of a sequential run failed; carries the stage index."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


def run_sequence(config, seed, out_dir=None):
    """Train stages 1..S for one method and one seed; return an EvalResult.

    When `out_dir` is given, every stage writes its checkpoint (and, where
    distillation applies, the pseudo-logit table recorded before training)
    into it.  Evaluation: per-stage test error, final-model retention on
    the stage-1 chunk, and for two-head configurations the positive-class
    AUC of the measurement head on the test set.
    """
    train_ds = config.build_train_dataset()
    test_ds = config.build_test_dataset()
    net = config.build_network()
    method = config.method
    dual = config.dual_head
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    pool_ids, val_ids = data_mod.train_val_split(train_ds, config.data.val_count, seed)
    split = data_mod.multi_center_split(train_ds, config.stages, seed, pool_ids=pool_ids)

    task_labels = train_ds.fine_labels if dual else train_ds.labels
    test_labels = test_ds.fine_labels if dual else test_ds.labels

    prev = None
    prev_path = None
    stage_errors = []
    for stage in range(1, config.stages + 1):
        try:
            params, old_heads = stage_transition(net, method, stage, prev, seed)
            chunk = split.chunks[stage - 1]
            pseudo = None
            if method.uses_distillation and stage >= 2:
                ref = ckpt_mod.checkpoint_hash(prev_path) if prev_path else ""
                pseudo = precompute_pseudo_logits(
                    net, prev.params, train_ds, chunk, pseudo_head_map(method, stage),
                    stage=stage, checkpoint_hash=ref, eval_batch=config.eval_batch)
                if out_dir is not None:
                    ckpt_mod.save_pseudo_logits(
                        os.path.join(out_dir, f"stage{stage}_pseudo.csv"), pseudo)
            ckpt = train_stage(
                net, method, stage, params, old_heads, train_ds, chunk, val_ids,
                config.schedule, config.weights, seed,
                batch_size=config.batch_size, eval_batch=config.eval_batch,
                aug_pad=config.augment_pad, pseudo=pseudo,
                prev_fisher=prev.fisher if prev else None,
                prev_anchor=prev.anchor if prev else None, dual_head=dual)
            ckpt.config_hash = config.config_hash()
            stage_errors.append(evaluate_error(
                net, ckpt.params, test_ds.images, test_labels, eval_batch=config.eval_batch))
            if out_dir is not None:
                prev_path = os.path.join(out_dir, f"stage{stage}.ckpt")
                ckpt_mod.save_checkpoint(prev_path, ckpt)
            prev = ckpt
        except (ValidationError, ShapeError, engine.TapeError) as exc:
            raise StageFailure(stage, exc) from exc

    first_chunk_rows = train_ds.rows(split.chunks[0])
    retention = 1.0 - evaluate_error(
        net, prev.params, train_ds.images[first_chunk_rows], task_labels[first_chunk_rows],
        eval_batch=config.eval_batch)

    auc = roc = None
    if dual:
        positive = config.data.positive_class
        aux_logits = forward_logits(net, prev.params, test_ds.images, "aux_head",
                                    config.eval_batch)
        scores = engine.softmax(aux_logits)[:, positive]
        auc, roc = roc_auc(scores, (test_ds.labels == positive).astype(np.int64))

    return EvalResult(stage_errors=stage_errors, retention=retention, seed=seed,
                      auc=auc, roc_points=roc)


def auc_scores(net, params, images, positive, eval_batch=256):
    """Positive-class softmax scores of the measurement head (for ensembling)."""
    logits = forward_logits(net, params, images, "aux_head", eval_batch)
    return engine.softmax(logits)[:, positive]
