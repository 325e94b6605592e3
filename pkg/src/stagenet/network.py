"""Compact residual conv net with 1x1-conv classifier heads.

The backbone is an initial 3x3 conv followed by three stacks of residual
blocks; stacks two and three downsample by stride 2 with a 1x1 projection
shortcut.  No normalization layers.  Heads are 1x1 convolutions applied to
the pre-pooling feature map, so class scores exist both as a spatial logit
map and (after global average pooling) as a vector — the two views are
functionally equivalent and the map view is what the optional inverse head
consumes to reconstruct the feature map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from zlib import crc32

import numpy as np

from . import engine
from .engine import ParamSet, ShapeError, Tensor, ValidationError


@dataclass(frozen=True)
class BackboneSpec:
    """Input geometry plus the three-stack residual layout."""

    input_hw: tuple  # (H, W, C)
    widths: tuple = (8, 16, 32)
    blocks_per_stage: int = 1

    def __post_init__(self):
        h, w, c = self.input_hw
        if h < 4 or w < 4 or c < 1:
            raise ValidationError(f"input shape {self.input_hw} too small for two downsamples")
        if len(self.widths) != 3 or any(int(x) < 1 for x in self.widths):
            raise ValidationError(f"widths must be 3 positive integers, got {self.widths}")
        if list(self.widths) != sorted(self.widths):
            raise ValidationError(f"stage widths must be non-decreasing, got {self.widths}")
        if self.blocks_per_stage < 1:
            raise ValidationError("blocks_per_stage must be >= 1")

    @property
    def feature_shape(self):
        h, w, _ = self.input_hw
        for _ in range(2):  # two stride-2 stages
            h = (h - 1) // 2 + 1
            w = (w - 1) // 2 + 1
        return (h, w, self.widths[2])


@dataclass(frozen=True)
class HeadSpec:
    classes: int
    name: str = ""  # empty -> positional default at build time

    def __post_init__(self):
        if self.classes < 2:
            raise ValidationError(f"head needs >= 2 classes, got {self.classes}")


@dataclass(frozen=True)
class InverseSpec:
    """3x3 conv stack mapping a logit map back to feature-map channels.

    Interior layers are linear; a single relu follows the last conv.  The
    final width must equal the backbone's feature channel count.
    """

    widths: tuple

    def __post_init__(self):
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ValidationError(f"inverse widths must be positive, got {self.widths}")


def _group_seed(run_seed, group, index):
    # crc32 keys the stream by group *name*, so adding or dropping one group
    # (e.g. the inverse head) never shifts any other group's draws
    return np.random.SeedSequence(entropy=run_seed, spawn_key=(crc32(group.encode()), index))


def _conv_tensors(k, cin, cout, run_seed, group, index):
    W = engine.he_init((k, k, cin, cout), fan_in=k * k * cin, seed=_group_seed(run_seed, group, index))
    b = engine.zeros((cout,))
    return W, b


class Network:
    """Architecture object: owns the layer layout, not the parameters.

    Parameters live in ``ParamSet`` instances produced by ``build_params``
    (or per-group helpers), so stage lifecycles can clone and swap them
    freely while every clone is interpreted through the same layout.
    """

    def __init__(self, backbone, heads, inverse=None):
        self.backbone = backbone
        self.heads = {}
        for i, spec in enumerate(heads):
            name = spec.name or ("new_head" if i == 0 else f"old_head_{i}")
            if name in self.heads:
                raise ValidationError(f"duplicate head name '{name}'")
            self.heads[name] = spec
        self.inverse = inverse
        if inverse is not None:
            cfeat = self.backbone.feature_shape[2]
            if inverse.widths[-1] != cfeat:
                raise ShapeError(
                    f"inverse head must end at {cfeat} channels, got {inverse.widths[-1]}")
        # (cin, cout, stride, has_projection) per block, in forward order
        self._blocks = []
        cin = backbone.widths[0]
        for stage_idx, width in enumerate(backbone.widths):
            for block_idx in range(backbone.blocks_per_stage):
                stride = 2 if stage_idx > 0 and block_idx == 0 else 1
                project = stride != 1 or cin != width
                self._blocks.append((cin, width, stride, project))
                cin = width

    # -- parameter construction -------------------------------------------

    def build_params(self, seed, include_inverse=True):
        params = ParamSet()
        params.add_group("shared", self._init_shared(seed))
        for name in self.heads:
            params.add_group(name, self.init_head(name, seed))
        if self.inverse is not None and include_inverse:
            params.add_group("inverse", self.init_inverse(seed))
        return params

    def _init_shared(self, seed):
        tensors = []
        idx = 0

        def conv(k, cin, cout):
            nonlocal idx
            W, b = _conv_tensors(k, cin, cout, seed, "shared", idx)
            idx += 1
            tensors.extend([W, b])

        conv(3, self.backbone.input_hw[2], self.backbone.widths[0])
        for cin, cout, stride, project in self._blocks:
            conv(3, cin, cout)
            conv(3, cout, cout)
            if project:
                conv(1, cin, cout)
        return tensors

    def init_head(self, name, seed, classes=None):
        """Fresh head tensors [kernel, bias] for group `name`."""
        if classes is None:
            if name not in self.heads:
                raise ValidationError(f"unknown head '{name}' and no class count given")
            classes = self.heads[name].classes
        cfeat = self.backbone.feature_shape[2]
        W, b = _conv_tensors(1, cfeat, classes, seed, name, 0)
        return [W, b]

    def init_inverse(self, seed):
        if self.inverse is None:
            raise ValidationError("network built without an inverse head")
        tensors = []
        cin = self._main_head_classes()
        for i, width in enumerate(self.inverse.widths):
            W, b = _conv_tensors(3, cin, width, seed, "inverse", i)
            tensors.extend([W, b])
            cin = width
        return tensors

    def _main_head_classes(self):
        first = next(iter(self.heads.values()))
        return first.classes

    # -- forward passes -----------------------------------------------------

    def backbone_forward(self, x, params):
        """Input map(s) -> pre-pooling feature map z."""
        shape = x.data.shape[-3:]
        if tuple(shape) != tuple(self.backbone.input_hw):
            raise ShapeError(f"input shape {shape} != configured {self.backbone.input_hw}")
        ts = params.group("shared")
        i = 0

        def next_conv():
            nonlocal i
            W, b = ts[i], ts[i + 1]
            i += 2
            return W, b

        W, b = next_conv()
        h = engine.relu(engine.bias_add(engine.conv2d(x, W, stride=1, pad=1), b))
        for cin, cout, stride, project in self._blocks:
            W1, b1 = next_conv()
            W2, b2 = next_conv()
            y = engine.relu(engine.bias_add(engine.conv2d(h, W1, stride=stride, pad=1), b1))
            y = engine.bias_add(engine.conv2d(y, W2, stride=1, pad=1), b2)
            if project:
                Wp, bp = next_conv()
                shortcut = engine.bias_add(engine.conv2d(h, Wp, stride=stride, pad=0), bp)
            else:
                shortcut = h
            h = engine.relu(engine.residual_add(y, shortcut))
        assert i == len(ts), "shared group length does not match the layout"
        return h

    def head_logits(self, z3d, head_tensors):
        """(spatial logit map, pooled logit vector) for one head."""
        W, b = head_tensors
        logit_map = engine.bias_add(engine.conv2d(z3d, W, stride=1, pad=0), b)
        return logit_map, engine.global_avgpool(logit_map)

    def dense_head_logits(self, z3d, head_tensors):
        """Pool-then-project route with weights matched to the 1x1 head.

        Computes dense(avgpool(z)) from the same kernel/bias; equal to the
        pooled half of `head_logits` because pooling is linear.
        """
        W, b = head_tensors
        dense_W = Tensor(W.data[0, 0].T.copy(), requires_grad=W.requires_grad)
        pooled = engine.global_avgpool(z3d)
        return engine.dense(pooled, dense_W, b)

    def inverse_forward(self, logit_map, inverse_tensors):
        """Logit map -> reconstructed feature map (linear stack + one relu)."""
        expect_h, expect_w, cfeat = self.backbone.feature_shape
        if logit_map.data.shape[-3:-1] != (expect_h, expect_w):
            raise ShapeError(
                f"logit map spatial shape {logit_map.data.shape[-3:-1]} != feature map ({expect_h}, {expect_w})")
        h = logit_map
        for i in range(0, len(inverse_tensors), 2):
            W, b = inverse_tensors[i], inverse_tensors[i + 1]
            h = engine.bias_add(engine.conv2d(h, W, stride=1, pad=1), b)
        out = engine.relu(h)
        if out.data.shape[-1] != cfeat:
            raise ShapeError(f"reconstruction channels {out.data.shape[-1]} != {cfeat}")
        return out

    def reconstruction_loss(self, z3d, head_tensors, inverse_tensors):
        """Mean squared distance between z and its round trip through head+inverse."""
        logit_map, _ = self.head_logits(z3d, head_tensors)
        z_hat = self.inverse_forward(logit_map, inverse_tensors)
        return engine.l2_reconstruction(z3d, z_hat)


def build_network(backbone, heads, inverse=None, seed=0, include_inverse=True):
    """Construct the architecture and one seeded ParamSet."""
    net = Network(backbone, heads, inverse)
    return net, net.build_params(seed, include_inverse=include_inverse)


def parameter_count(params):
    return sum(t.data.size for t in params.tensors())
