"""
Multi-stage cascade region proposal network.

A toy convolutional pyramid feeds T stage heads. Stage tau samples the
features with an adaptive convolution whose taps are placed by the stage's
input anchors, regresses those anchors, and hands the regressed anchors to
stage tau+1. Stage-1 head features are bridged (1x1 projection, added before
the activation) into every later stage. The last stage also scores anchors;
its regressed anchors, pooled across levels and filtered by NMS, are the
proposals.

Regressed anchors are constants for the next stage: no gradient flows
through offsets or box decoding between stages.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from assignment import (
    ANCHOR_BASED,
    ANCHOR_FREE,
    AssignmentConfig,
    AssignmentResult,
    BalancedSampler,
    TargetStats,
    assign,
    denormalize_prediction,
    unmatched_gts,
)
from box_geometry import (
    AnchorLevel,
    ProposalSet,
    anchor_offsets,
    as_box_array,
    build_anchor_level,
    clip_boxes,
    decode_backward,
    decode_boxes,
    nms_indices,
)
from errors import ConfigError, ShapeError
from losses import LossWeights, bce_with_logits, iou_loss_boxes, sigmoid, smooth_l1_loss, total_loss
from tensor_core import (
    ConvParams,
    adaptive_conv,
    adaptive_conv_backward,
    conv2d,
    conv2d_backward,
    init_conv_params,
    relu,
    relu_backward,
)

logger = logging.getLogger(__name__)

ALIGNMENTS = ("full", "center", "shape", "none")
METRIC_PLANS = ("afab", "af", "ab")

# proposals narrower or shorter than this (pixels) after clipping are dropped
MIN_PROPOSAL_SIZE = 1e-3


@dataclass(frozen=True)
class LevelSpec:
    stride: int
    base_size: int


@dataclass(frozen=True)
class BackboneSpec:
    """Plain conv3x3(stride=downsample) + relu blocks"""

    channels: Tuple[int, ...] = (16, 32, 32)
    downsample: Tuple[int, ...] = (2, 2, 2)
    in_channels: int = 3

    def __post_init__(self):
        if len(self.channels) != len(self.downsample) or not self.channels:
            raise ConfigError("channels and downsample must be non-empty and equally long", "backbone")
        if any(c < 1 for c in self.channels) or any(d < 1 for d in self.downsample) or self.in_channels < 1:
            raise ConfigError("channel widths and downsampling factors must be positive", "backbone")

    def block_strides(self) -> List[int]:
        strides, total = [], 1
        for factor in self.downsample:
            total *= factor
            strides.append(total)
        return strides


@dataclass(frozen=True)
class Schedule:
    """Step schedule: base_lr scaled by batch/reference_batch, times factor at each decay point"""

    base_lr: float = 0.02
    reference_batch: int = 16
    decay_points: Tuple[float, ...] = (2 / 3, 11 / 12)
    factor: float = 0.1

    def lr_at(self, epoch: int, epochs: int, batch_size: int) -> float:
        lr = self.base_lr * batch_size / self.reference_batch
        for point in self.decay_points:
            if epoch >= int(round(point * epochs)):
                lr *= self.factor
        return lr


def metric_plan(plan: str, num_stages: int) -> Tuple[AssignmentConfig, ...]:
    """
    Per-stage assignment configs.

    afab: anchor-free at stage 1, anchor-based afterwards (IoU 0.7, then 0.75, ...)
    af:   anchor-free everywhere, regions shrinking with the stage index
    ab:   anchor-based everywhere, stage 1 relaxed to IoU 0.5
    """
    if plan not in METRIC_PLANS:
        raise ConfigError(f"unknown metric plan '{plan}', expected one of {METRIC_PLANS}", "metric")
    configs = []
    for stage in range(1, num_stages + 1):
        if plan == "af" or (plan == "afab" and stage == 1):
            configs.append(AssignmentConfig(sigma_ctr=0.2 / stage, sigma_ign=0.5 / stage, stage_metric=ANCHOR_FREE))
        elif plan == "ab" and stage == 1:
            configs.append(AssignmentConfig(iou_pos=0.5, iou_neg=0.3, stage_metric=ANCHOR_BASED))
        else:
            iou_pos = min(0.7 + 0.05 * (stage - 2), 0.9)
            configs.append(AssignmentConfig(iou_pos=round(iou_pos, 4), iou_neg=0.3, stage_metric=ANCHOR_BASED))
    return tuple(configs)


@dataclass(frozen=True)
class PipelineConfig:
    num_stages: int = 2
    levels: Tuple[LevelSpec, ...] = (LevelSpec(4, 16), LevelSpec(8, 32))
    backbone: BackboneSpec = BackboneSpec()
    head_channels: int = 64
    kernel_size: int = 3
    metric: str = "afab"
    stage_assign: Tuple[AssignmentConfig, ...] = ()
    alpha: Tuple[float, ...] = ()
    lam: float = 10.0
    alignment: str = "full"
    use_stats: bool = True
    use_iou_loss: bool = True
    nms_threshold: float = 0.8
    nms_pre: int = 1000
    max_proposals: int = 1000
    samples_per_image: int = 256
    seed: int = 7
    schedule: Schedule = Schedule()
    epochs: int = 20
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.num_stages < 1:
            raise ConfigError(f"must be >= 1, got {self.num_stages}", "num_stages")
        if not self.levels:
            raise ConfigError("at least one pyramid level is required", "levels")
        strides = [lvl.stride for lvl in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ConfigError(f"strides must be strictly increasing, got {strides}", "levels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}", "kernel_size")
        if self.alignment not in ALIGNMENTS:
            raise ConfigError(f"unknown alignment '{self.alignment}', expected one of {ALIGNMENTS}", "alignment")
        if not 0.0 < self.nms_threshold < 1.0:
            raise ConfigError(f"must be in (0, 1), got {self.nms_threshold}", "nms_threshold")
        if self.max_proposals < 1 or self.nms_pre < 1:
            raise ConfigError("proposal caps must be >= 1", "max_proposals")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1", "batch_size")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"must be in [0, 1], got {self.flip_prob}", "flip_prob")

        if not self.stage_assign:
            object.__setattr__(self, "stage_assign", metric_plan(self.metric, self.num_stages))
        if not self.alpha:
            object.__setattr__(self, "alpha", (1.0,) * self.num_stages)
        if len(self.stage_assign) != self.num_stages:
            raise ConfigError(f"{len(self.stage_assign)} assignment configs for {self.num_stages} stages",
                              "stage_assign")
        LossWeights(tuple(self.alpha), self.lam)
        if len(self.alpha) != self.num_stages:
            raise ConfigError(f"{len(self.alpha)} stage weights for {self.num_stages} stages", "alpha")

        blocks = self.level_blocks()
        widths = {self.backbone.channels[b] for b in blocks}
        if len(widths) != 1:
            raise ConfigError(f"all pyramid levels need the same channel width, got {sorted(widths)}", "backbone")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(tuple(self.alpha), self.lam)

    @property
    def max_stride(self) -> int:
        return self.levels[-1].stride

    def level_blocks(self) -> List[int]:
        """Backbone block index producing each pyramid level"""
        block_strides = self.backbone.block_strides()
        blocks = []
        for level in self.levels:
            if level.stride not in block_strides:
                raise ConfigError(f"no backbone block has stride {level.stride} (blocks: {block_strides})", "levels")
            blocks.append(block_strides.index(level.stride))
        return blocks

    @property
    def feature_channels(self) -> int:
        return self.backbone.channels[self.level_blocks()[0]]


@dataclass
class StageHead:
    """Adaptive conv + 1x1 regression, with bridge projection after stage 1 and classifier at stage T"""

    ada: ConvParams
    reg: ConvParams
    bridge: Optional[ConvParams] = None
    cls: Optional[ConvParams] = None


class CascadeModel:
    """Named conv parameters of backbone and stage heads plus per-stage target statistics"""

    def __init__(self, params: Dict[str, ConvParams], stats: Sequence[TargetStats], num_stages: int):
        self.params = dict(params)
        self.stats = list(stats)
        self.num_stages = num_stages
        if len(self.stats) != num_stages:
            raise ConfigError(f"{len(self.stats)} target statistics for {num_stages} stages", "stats")

    @classmethod
    def initialize(cls, cfg: PipelineConfig, seed: int = None) -> "CascadeModel":
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        params = {}
        in_c = cfg.backbone.in_channels
        for i, (width, factor) in enumerate(zip(cfg.backbone.channels, cfg.backbone.downsample)):
            params[f"backbone.{i}"] = init_conv_params(width, in_c, 3, rng, stride=factor)
            in_c = width

        feat_c, head_c, k = cfg.feature_channels, cfg.head_channels, cfg.kernel_size
        for stage in range(1, cfg.num_stages + 1):
            params[f"stage{stage}.ada"] = init_conv_params(head_c, feat_c, k, rng)
            if stage > 1:
                params[f"stage{stage}.bridge"] = init_conv_params(head_c, head_c, 1, rng)
            params[f"stage{stage}.reg"] = init_conv_params(4, head_c, 1, rng)
            if stage == cfg.num_stages:
                params[f"stage{stage}.cls"] = init_conv_params(1, head_c, 1, rng)
        return cls(params, [TargetStats.identity() for _ in range(cfg.num_stages)], cfg.num_stages)

    def backbone(self) -> List[ConvParams]:
        blocks = sorted((n for n in self.params if n.startswith("backbone.")), key=lambda n: int(n.split(".")[1]))
        return [self.params[n] for n in blocks]

    def head(self, stage: int) -> StageHead:
        prefix = f"stage{stage}"
        return StageHead(
            ada=self.params[f"{prefix}.ada"],
            reg=self.params[f"{prefix}.reg"],
            bridge=self.params.get(f"{prefix}.bridge"),
            cls=self.params.get(f"{prefix}.cls"),
        )

    def flat_parameters(self) -> List[np.ndarray]:
        flat = []
        for p in self.params.values():
            flat.extend([p.weights, p.bias])
        return flat

    def with_parameters(self, flat: Sequence[np.ndarray]) -> "CascadeModel":
        if len(flat) != 2 * len(self.params):
            raise ShapeError("parameter count mismatch", 2 * len(self.params), len(flat))
        params = {}
        for i, (name, p) in enumerate(self.params.items()):
            params[name] = replace(p, weights=flat[2 * i], bias=flat[2 * i + 1])
        return CascadeModel(params, self.stats, self.num_stages)

    def with_stats(self, stats: Sequence[TargetStats]) -> "CascadeModel":
        return CascadeModel(self.params, stats, self.num_stages)

    def astype(self, dtype) -> "CascadeModel":
        return self.with_parameters([a.astype(dtype) for a in self.flat_parameters()])

    def tensors(self) -> Dict[str, np.ndarray]:
        """Flat name -> array view used by checkpoints"""
        out = {}
        for name, p in self.params.items():
            out[f"{name}.weight"] = p.weights
            out[f"{name}.bias"] = p.bias
        for stage, stats in enumerate(self.stats, start=1):
            out[f"stats.stage{stage}.mean"] = stats.mean
            out[f"stats.stage{stage}.std"] = stats.std
        return out

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], cfg: PipelineConfig) -> "CascadeModel":
        template = cls.initialize(cfg)
        params = {}
        for name, p in template.params.items():
            for suffix, current in (("weight", p.weights), ("bias", p.bias)):
                key = f"{name}.{suffix}"
                if key not in tensors:
                    raise ConfigError(f"checkpoint lacks tensor '{key}'", "checkpoint")
                if tensors[key].shape != current.shape:
                    raise ShapeError(f"checkpoint tensor '{key}' has the wrong shape", current.shape, tensors[key].shape)
            params[name] = replace(p, weights=tensors[f"{name}.weight"].astype(np.float32),
                                   bias=tensors[f"{name}.bias"].astype(np.float32))
        stats = []
        for stage in range(1, cfg.num_stages + 1):
            mean = tensors.get(f"stats.stage{stage}.mean")
            std = tensors.get(f"stats.stage{stage}.std")
            stats.append(TargetStats(mean, std) if mean is not None and std is not None else TargetStats.identity())
        return cls(params, stats, cfg.num_stages)


@dataclass
class StageOutput:
    anchors: AnchorLevel
    offsets: np.ndarray
    hidden: np.ndarray
    normalized: np.ndarray
    deltas: np.ndarray
    refined: np.ndarray
    logits: Optional[np.ndarray] = None

    @property
    def bridged_out(self) -> np.ndarray:
        return self.hidden


@dataclass
class CascadeOutput:
    levels: List[AnchorLevel]
    features: List[np.ndarray]
    block_inputs: List[np.ndarray]
    block_outputs: List[np.ndarray]
    stages: List[List[StageOutput]] = field(default_factory=list)
    scores: List[np.ndarray] = field(default_factory=list)
    proposals: Optional[ProposalSet] = None

    def stage_input_anchors(self, stage: int) -> np.ndarray:
        """Pooled (all levels) input anchors of a 1-based stage"""
        return np.concatenate([o.anchors.anchors for o in self.stages[stage - 1]])

    def stage_refined(self, stage: int) -> np.ndarray:
        return np.concatenate([o.refined for o in self.stages[stage - 1]])

    @property
    def final_scores(self) -> np.ndarray:
        return np.concatenate(self.scores)


def _as_batch(image: np.ndarray) -> np.ndarray:
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeError("the pipeline processes one image at a time", "(1, c, h, w)", image.shape)
    return image


def _per_location(y: np.ndarray) -> np.ndarray:
    """(1, C, h, w) -> (h*w, C) float64, row-major locations"""
    return y[0].reshape(y.shape[1], -1).T.astype(np.float64)


def _to_map(values: np.ndarray, h: int, w: int, dtype) -> np.ndarray:
    """(h*w, C) -> (1, C, h, w)"""
    return values.T.reshape(1, values.shape[1], h, w).astype(dtype)


def _backbone_forward(image: np.ndarray, model: CascadeModel, cfg: PipelineConfig):
    inputs, outputs = [], []
    x = image
    for params in model.backbone():
        inputs.append(x)
        x = relu(conv2d(x, params))
        outputs.append(x)
    features = [outputs[b] for b in cfg.level_blocks()]
    return features, inputs, outputs


def _check_image(image: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    image = _as_batch(image)
    h, w = image.shape[2:]
    if h % cfg.max_stride or w % cfg.max_stride:
        raise ConfigError(f"image {w}x{h} is not divisible by the largest stride {cfg.max_stride}", "image_size")
    if image.shape[1] != cfg.backbone.in_channels:
        raise ShapeError("image channels do not match the backbone", cfg.backbone.in_channels, image.shape[1])
    return image


def extract_features(image: np.ndarray, model: CascadeModel, cfg: PipelineConfig) -> List[np.ndarray]:
    """One feature map per pyramid level, spatial size image/stride"""
    return _backbone_forward(_check_image(image, cfg), model, cfg)[0]


def offset_source(inputs: np.ndarray, initial: np.ndarray, alignment: str) -> np.ndarray:
    """Anchors that place the adaptive-conv taps under each alignment variant"""
    if alignment == "full":
        return inputs
    if alignment == "none":
        return initial
    if alignment == "center":
        return np.concatenate([inputs[:, :2], initial[:, 2:]], axis=1)
    return np.concatenate([initial[:, :2], inputs[:, 2:]], axis=1)


def run_stage(feat: np.ndarray, bridged: Optional[np.ndarray], anchors: AnchorLevel, head: StageHead,
              stats: TargetStats, offset_anchors: np.ndarray = None) -> StageOutput:
    """
    One cascade stage on one level.

    Offsets come from `offset_anchors` (default: the input anchors themselves).
    Predicted deltas are normalized, so they are denormalized with `stats`
    before decoding the regressed anchors.
    """
    if feat.ndim != 4 or feat.shape[0] != 1 or feat.shape[2:] != anchors.grid_dims:
        raise ShapeError("feature map does not match the anchor grid", (1, "c") + anchors.grid_dims, feat.shape)
    source = anchors.anchors if offset_anchors is None else offset_anchors
    offsets = anchor_offsets(source, head.ada.kernel_size, anchors.stride, head.ada.dilation, anchors.grid_dims)

    pre = adaptive_conv(feat, head.ada, offsets)
    if bridged is not None:
        if head.bridge is None:
            raise ConfigError("stage head has no bridge projection for bridged features", "bridge")
        pre = pre + conv2d(bridged, head.bridge)
    hidden = relu(pre)

    normalized = _per_location(conv2d(hidden, head.reg))
    deltas = denormalize_prediction(normalized, stats)
    refined = decode_boxes(anchors.anchors, deltas)
    logits = _per_location(conv2d(hidden, head.cls))[:, 0] if head.cls is not None else None
    return StageOutput(anchors, offsets, hidden, normalized, deltas, refined, logits)


def extract_proposals(boxes_per_level: Sequence[np.ndarray], scores_per_level: Sequence[np.ndarray],
                      cfg: PipelineConfig, image_w: int, image_h: int, scene_id: int = -1) -> ProposalSet:
    """Top nms_pre per level, pooled, clipped, NMS'd, capped at max_proposals"""
    pooled_boxes, pooled_scores = [], []
    for boxes, scores in zip(boxes_per_level, scores_per_level):
        order = np.argsort(-scores, kind="stable")[:cfg.nms_pre]
        pooled_boxes.append(boxes[order])
        pooled_scores.append(scores[order])
    boxes = clip_boxes(np.concatenate(pooled_boxes), image_w, image_h)
    scores = np.concatenate(pooled_scores)

    valid = (boxes[:, 2] > MIN_PROPOSAL_SIZE) & (boxes[:, 3] > MIN_PROPOSAL_SIZE)
    valid &= np.all(np.isfinite(boxes), axis=1) & np.isfinite(scores)
    boxes, scores = boxes[valid], scores[valid]
    keep = nms_indices(boxes, scores, cfg.nms_threshold)[:cfg.max_proposals]
    return ProposalSet(boxes[keep], scores[keep], scene_id)


def forward_cascade(image: np.ndarray, cfg: PipelineConfig, model: CascadeModel,
                    anchor_override: Sequence[Sequence[np.ndarray]] = None, scene_id: int = -1) -> CascadeOutput:
    """
    Run all stages on one image.

    `anchor_override[stage-1][level]` replaces the input anchors of stages >= 2;
    gradient checks use it to hold the cascade geometry fixed.
    """
    image = _check_image(image, cfg)
    features, block_inputs, block_outputs = _backbone_forward(image, model, cfg)
    h, w = image.shape[2:]

    levels = [build_anchor_level(w, h, spec.stride, spec.base_size) for spec in cfg.levels]
    out = CascadeOutput(levels, features, block_inputs, block_outputs)

    inputs = list(levels)
    bridged = [None] * len(levels)
    for stage in range(1, cfg.num_stages + 1):
        head = model.head(stage)
        stats = model.stats[stage - 1]
        outputs = []
        for i, level in enumerate(levels):
            current = inputs[i]
            if anchor_override is not None and stage > 1:
                current = replace(level, anchors=np.asarray(anchor_override[stage - 1][i], dtype=np.float64))
            source = offset_source(current.anchors, level.anchors, cfg.alignment)
            outputs.append(run_stage(features[i], bridged[i], current, head, stats, offset_anchors=source))
        out.stages.append(outputs)
        if stage == 1:
            bridged = [o.bridged_out for o in outputs]
        inputs = [replace(level, anchors=o.refined) for level, o in zip(levels, outputs)]

    final = out.stages[-1]
    out.scores = [sigmoid(o.logits) for o in final]
    out.proposals = extract_proposals([o.refined for o in final], out.scores, cfg, w, h, scene_id)
    return out


@dataclass
class StepLoss:
    total: float
    reg: List[float]
    cls: float
    num_positive: List[int]


def uses_iou_loss(cfg: PipelineConfig, stage: int) -> bool:
    """IoU loss supervises the final stage of a multi-stage cascade; smooth-L1 elsewhere"""
    return cfg.use_iou_loss and cfg.num_stages > 1 and stage == cfg.num_stages


def _split(pooled: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    return np.split(pooled, np.cumsum(sizes)[:-1])


def _accumulate(grads: Dict[str, List[np.ndarray]], name: str, grad_w: np.ndarray, grad_b: np.ndarray):
    grads[name][0] += grad_w
    grads[name][1] += grad_b


def compute_loss_and_grads(image: np.ndarray, gts, cfg: PipelineConfig, model: CascadeModel,
                           rng: np.random.Generator, anchor_override=None):
    """
    Forward, per-stage assignment, multi-task loss and analytic gradients for one image.

    Returns (StepLoss, grads name -> [grad_w, grad_b], CascadeOutput, assignments).
    """
    out = forward_cascade(image, cfg, model, anchor_override)
    gts = as_box_array(gts)
    weights = cfg.loss_weights
    sizes = [len(level) for level in out.levels]

    reg_losses, num_pos, assignments, grad_norm = [], [], [], []
    for stage in range(1, cfg.num_stages + 1):
        anchors = out.stage_input_anchors(stage)
        stats = model.stats[stage - 1]
        result = assign(anchors, gts, cfg.stage_assign[stage - 1], stats)
        assignments.append(result)
        missed = unmatched_gts(result, len(gts))
        if len(missed):
            logger.debug("stage %d: gts %s have no positive anchor", stage, missed.tolist())

        normalized = np.concatenate([o.normalized for o in out.stages[stage - 1]])
        grad = np.zeros_like(normalized)
        pos = result.positive_indices
        loss = 0.0
        if len(pos):
            if uses_iou_loss(cfg, stage):
                deltas = denormalize_prediction(normalized[pos], stats)
                boxes = decode_boxes(anchors[pos], deltas)
                losses, grad_boxes = iou_loss_boxes(boxes, gts[result.matched_gt[pos]])
                loss = float(losses.mean())
                grad[pos] = decode_backward(anchors[pos], deltas, grad_boxes) * stats.std / len(pos)
            else:
                loss_sum, grad_pos = smooth_l1_loss(normalized[pos], result.targets[pos])
                loss = loss_sum / len(pos)
                grad[pos] = grad_pos / len(pos)
        reg_losses.append(loss)
        num_pos.append(len(pos))
        grad_norm.append(grad * weights.lam * weights.alpha[stage - 1])

    logits = np.concatenate([o.logits for o in out.stages[-1]])
    grad_logits = np.zeros_like(logits)
    pos_idx, neg_idx = BalancedSampler(cfg.samples_per_image)(assignments[-1].labels, rng)
    sampled = np.concatenate([pos_idx, neg_idx])
    cls_loss = 0.0
    if len(sampled):
        labels = np.concatenate([np.ones(len(pos_idx)), np.zeros(len(neg_idx))])
        losses, grad_sampled = bce_with_logits(logits[sampled], labels)
        cls_loss = float(losses.mean())
        grad_logits[sampled] = grad_sampled / len(sampled)

    step = StepLoss(total_loss(reg_losses, cls_loss, weights), reg_losses, cls_loss, num_pos)
    grads = _backward(out, model, cfg, [_split(g, sizes) for g in grad_norm], _split(grad_logits, sizes))
    return step, grads, out, assignments


def _backward(out: CascadeOutput, model: CascadeModel, cfg: PipelineConfig,
              grad_norm: List[List[np.ndarray]], grad_logits: List[np.ndarray]) -> Dict[str, List[np.ndarray]]:
    grads = {name: [np.zeros_like(p.weights), np.zeros_like(p.bias)] for name, p in model.params.items()}
    feature_grads = [np.zeros_like(f) for f in out.features]
    bridge_grads: List[Optional[np.ndarray]] = [None] * len(out.levels)

    # later stages first: they feed gradient back into the bridged stage-1 features
    for stage in range(cfg.num_stages, 0, -1):
        head = model.head(stage)
        prefix = f"stage{stage}"
        for i, o in enumerate(out.stages[stage - 1]):
            h, w = o.hidden.shape[2:]
            dtype = o.hidden.dtype

            grad_reg = _to_map(grad_norm[stage - 1][i], h, w, dtype)
            grad_hidden, gw, gb = conv2d_backward(grad_reg, o.hidden, head.reg)
            _accumulate(grads, f"{prefix}.reg", gw, gb)

            if head.cls is not None:
                grad_cls = _to_map(grad_logits[i][:, None], h, w, dtype)
                gh, gw, gb = conv2d_backward(grad_cls, o.hidden, head.cls)
                grad_hidden = grad_hidden + gh
                _accumulate(grads, f"{prefix}.cls", gw, gb)

            if stage == 1 and bridge_grads[i] is not None:
                grad_hidden = grad_hidden + bridge_grads[i]

            grad_pre = relu_backward(grad_hidden, o.hidden)
            grad_feat, gw, gb = adaptive_conv_backward(grad_pre, out.features[i], head.ada, o.offsets)
            _accumulate(grads, f"{prefix}.ada", gw, gb)
            feature_grads[i] = feature_grads[i] + grad_feat

            if stage > 1:
                grad_bridged, gw, gb = conv2d_backward(grad_pre, out.stages[0][i].hidden, head.bridge)
                _accumulate(grads, f"{prefix}.bridge", gw, gb)
                bridge_grads[i] = grad_bridged if bridge_grads[i] is None else bridge_grads[i] + grad_bridged

    backbone = model.backbone()
    grad_outputs = [np.zeros_like(a) for a in out.block_outputs]
    for i, block in enumerate(cfg.level_blocks()):
        grad_outputs[block] = grad_outputs[block] + feature_grads[i]
    for block in range(len(backbone) - 1, -1, -1):
        grad_z = relu_backward(grad_outputs[block], out.block_outputs[block])
        grad_in, gw, gb = conv2d_backward(grad_z, out.block_inputs[block], backbone[block])
        _accumulate(grads, f"backbone.{block}", gw, gb)
        if block > 0:
            grad_outputs[block - 1] = grad_outputs[block - 1] + grad_in
    return grads


def flatten_grads(grads: Dict[str, List[np.ndarray]], model: CascadeModel) -> List[np.ndarray]:
    """Gradients in the order of model.flat_parameters()"""
    flat = []
    for name in model.params:
        flat.extend(grads[name])
    return flat


def predict(scenes: Sequence, model: CascadeModel, cfg: PipelineConfig, threads: int = 1) -> List[ProposalSet]:
    """Proposals for every scene, in scene order"""

    def run(scene) -> ProposalSet:
        return forward_cascade(scene.image, cfg, model, scene_id=scene.scene_id).proposals

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, scenes))
    return [run(scene) for scene in scenes]


def refinement_records(scenes: Sequence, model: CascadeModel, cfg: PipelineConfig):
    """(refined boxes per stage, gts, stage-1 matched gt) per scene, for stage_mean_iou"""
    for scene in scenes:
        out = forward_cascade(scene.image, cfg, model, scene_id=scene.scene_id)
        gts = as_box_array(scene.gts)
        first: AssignmentResult = assign(out.stage_input_anchors(1), gts, cfg.stage_assign[0])
        stage_boxes = [out.stage_refined(stage) for stage in range(1, cfg.num_stages + 1)]
        yield stage_boxes, gts, np.where(first.labels == 1, first.matched_gt, -1)
