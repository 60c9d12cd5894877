"""Training procedures and deployment topologies.

Three trainings: the recognition model (angular-margin loss on
identities), the PAD model (per-block classifier heads, cross entropy,
backbone finetuned from the recognition weights), and the unified model
(same PAD losses plus MSE distillation of the class embedding against
the frozen recognition teacher).

Two deployments: the sequential cascade (PAD model gates, recognition
model matches) and the unified single pass (one backbone yields both the
PAD score, from a mid-network head, and the match embedding).
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import vit
from .autodiff import Tensor
from .heads import (ArcFaceParams, arcface_logits, cosine_matrix, cosine_similarity,
                    cross_entropy, init_arcface, init_pad_heads, mse_distill,
                    pad_head_forward, pad_score)
from .metrics import (ATTACK, BONA_FIDE, MetricReport, ScoreRecord, compute_report,
                      pad_rates, threshold_at_bpcer)
from .optim import OptimState, ScheduleConfig, adamw_step, init_optim_state, poly_lr
from .synth import DatasetSplit, Sample
from .vit import ModelConfig, backbone_subset, init_backbone_params, param_count

SEQUENTIAL = "sequential"
UNIFIED = "unified"

ACCEPT = "accept"
REJECT_SPOOF = "reject-spoof"
REJECT_NONMATCH = "reject-nonmatch"


@dataclass
class TrainConfig:
    """Hyperparameters shared by the three training procedures."""

    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 1e-4
    min_lr: float = 1e-5
    lr_power: float = 3.0
    weight_decay: float = 2e-5
    arcface_margin: float = 0.5
    arcface_scale: float = 64.0
    arcface_margin_warmup: float = 0.0   # fraction of steps to ramp the margin from 0
    distill_weight: float = 1.0
    identity_ce_weight: float = 0.0   # optional extra identity CE on the unified student
    seed: int = 0
    deterministic: bool = True
    debug_checks: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.distill_weight < 0:
            raise ValueError(f"distill_weight must be >= 0, got {self.distill_weight}")

    def schedule_for(self, steps_per_epoch: int) -> ScheduleConfig:
        total = max(1, self.epochs * steps_per_epoch)
        return ScheduleConfig(base_lr=self.base_lr, min_lr=self.min_lr,
                              power=self.lr_power, total_steps=total)


def _stack(samples: list[Sample], idx) -> np.ndarray:
    return np.stack([samples[i].image for i in idx])


def _debug_ctx(cfg: TrainConfig):
    return ad.finite_checks(True) if cfg.debug_checks else contextlib.nullcontext()


def _zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def _grads_of(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in params.items() if t.grad is not None}


def train_frm(split: DatasetSplit, model_config: ModelConfig, cfg: TrainConfig):
    """Train the recognition backbone with the angular-margin identity loss.

    Returns (params, per-epoch mean loss trace). The class-weight matrix is
    sized by the actual number of training identities and stored under
    "arcface.weight"; identities are mapped to classes in sorted order.
    """
    samples = split.train
    ids = sorted({s.identity_id for s in samples})
    if len(ids) < 2:
        raise ValueError(f"recognition training needs >= 2 identities, got {len(ids)}")
    id_to_class = {ident: k for k, ident in enumerate(ids)}
    labels_all = np.array([id_to_class[s.identity_id] for s in samples], dtype=np.int64)
    mc = replace(model_config, num_identities=len(ids))

    rng = np.random.default_rng(cfg.seed)
    params = init_backbone_params(mc, rng)
    arc = init_arcface(mc, rng, margin=cfg.arcface_margin, scale=cfg.arcface_scale)
    params["arcface.weight"] = arc.weight

    def loss_fn(images, idx, progress):
        if cfg.arcface_margin_warmup > 0:
            ramp = min(1.0, progress / cfg.arcface_margin_warmup)
            arc_now = ArcFaceParams(weight=arc.weight, margin=cfg.arcface_margin * ramp,
                                    scale=cfg.arcface_scale)
        else:
            arc_now = arc
        bundle = vit.forward_features(images, params, mc)
        logits = arcface_logits(bundle.cls_embedding, arc_now, labels_all[idx])
        return cross_entropy(logits, labels_all[idx])

    history = _run_training(samples, params, cfg, rng, loss_fn)
    return params, history


def train_pad(split: DatasetSplit, frm_params: dict[str, Tensor],
              model_config: ModelConfig, cfg: TrainConfig):
    """Finetune a PAD model from recognition weights; all heads train jointly.

    The loss is the sum of per-head cross entropies over every block.
    Returns (params, per-epoch loss trace).
    """
    return _train_multitask(split, frm_params, model_config, cfg, teacher=None)


def train_unified(split: DatasetSplit, teacher_params: dict[str, Tensor],
                  model_config: ModelConfig, cfg: TrainConfig):
    """Train the unified student: PAD cross entropies plus distillation.

    The student backbone starts from the teacher's weights; the teacher
    stays frozen and supervises the class embedding through an MSE term
    weighted by ``cfg.distill_weight``.
    """
    if teacher_params is None:
        raise ValueError("unified training requires a teacher recognition model")
    return _train_multitask(split, teacher_params, model_config, cfg, teacher=teacher_params)


def _train_multitask(split: DatasetSplit, backbone_src: dict[str, Tensor],
                     model_config: ModelConfig, cfg: TrainConfig,
                     teacher: dict[str, Tensor] | None):
    samples = split.train
    live = np.array([s.liveness == "attack" for s in samples], dtype=np.int64)
    if live.all() or not live.any():
        raise ValueError("PAD training needs both bona fide and attack samples")
    mc = model_config
    rng = np.random.default_rng(cfg.seed)
    params = {k: Tensor(v.data.copy(), requires_grad=True)
              for k, v in backbone_subset(backbone_src).items()}
    params.update(init_pad_heads(mc, rng))

    distill = teacher is not None and cfg.distill_weight > 0
    extra_ce = teacher is not None and cfg.identity_ce_weight > 0
    if extra_ce:
        if "arcface.weight" not in teacher:
            raise ValueError("identity CE requires the teacher's class-weight matrix")
        ids = sorted({s.identity_id for s in samples})
        id_to_class = {ident: k for k, ident in enumerate(ids)}
        id_labels = np.array([id_to_class[s.identity_id] for s in samples], dtype=np.int64)
        arc = ArcFaceParams(weight=Tensor(teacher["arcface.weight"].data),
                            margin=cfg.arcface_margin, scale=cfg.arcface_scale)

    def loss_fn(images, idx, progress):
        bundle = vit.forward_features(images, params, mc)
        labels = live[idx]
        loss = None
        for layer in range(1, mc.depth + 1):
            term = cross_entropy(pad_head_forward(bundle.layer_tokens[layer - 1],
                                                  params, layer, depth=mc.depth), labels)
            loss = term if loss is None else ad.add(loss, term)
        if distill:
            with ad.no_grad():
                t_bundle = vit.forward_features(images, teacher, mc)
            mse = mse_distill(bundle.cls_embedding, t_bundle.cls_embedding)
            loss = ad.add(loss, ad.mul(mse, Tensor(np.asarray(cfg.distill_weight,
                                                              dtype=np.float32))))
        if extra_ce:
            ce = cross_entropy(arcface_logits(bundle.cls_embedding, arc, id_labels[idx]),
                               id_labels[idx])
            loss = ad.add(loss, ad.mul(ce, Tensor(np.asarray(cfg.identity_ce_weight,
                                                             dtype=np.float32))))
        return loss

    history = _run_training(samples, params, cfg, rng, loss_fn)
    return params, history


def _run_training(samples: list[Sample], params: dict[str, Tensor], cfg: TrainConfig,
                  rng: np.random.Generator, loss_fn) -> list[float]:
    """Shared loop: shuffled minibatches, poly LR, AdamW, per-epoch mean loss."""
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    schedule = cfg.schedule_for(steps_per_epoch)
    total_steps = schedule.total_steps
    state = init_optim_state(params)
    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            images = _stack(samples, idx)
            with _debug_ctx(cfg):
                loss = loss_fn(images, idx, step / total_steps)
                ad.backward(loss)
            lr = poly_lr(step, schedule)
            adamw_step(params, _grads_of(params), state, lr=lr,
                       weight_decay=cfg.weight_decay, check_finite=cfg.debug_checks)
            _zero_grads(params)
            epoch_losses.append(loss.item())
            step += 1
        history.append(float(np.mean(epoch_losses)))
    return history


# -- inference helpers --


def default_pad_layer(depth: int) -> int:
    """Mid-network head used at inference: ceil(depth / 2), 1-based."""
    return math.ceil(depth / 2)


def embed_images(params: dict[str, Tensor], mc: ModelConfig, images) -> np.ndarray:
    """Class embeddings without graph recording; (d,) or (B, d)."""
    with ad.no_grad():
        return vit.forward_features(images, params, mc).cls_embedding.data


def pad_probabilities(params: dict[str, Tensor], mc: ModelConfig, images, layer: int):
    """Attack probabilities from the head at `layer`; float or (B,)."""
    with ad.no_grad():
        bundle = vit.forward_features(images, params, mc)
        return pad_score(pad_head_forward(bundle.layer_tokens[layer - 1], params,
                                          layer, depth=mc.depth))


def forward_scores(params: dict[str, Tensor], mc: ModelConfig, images, layer: int):
    """(embedding, attack probability) from a single backbone pass."""
    with ad.no_grad():
        bundle = vit.forward_features(images, params, mc)
        prob = pad_score(pad_head_forward(bundle.layer_tokens[layer - 1], params,
                                          layer, depth=mc.depth))
        return bundle.cls_embedding.data, prob


# -- deployment --


@dataclass
class Thresholds:
    pad: float
    match: float


@dataclass
class Decision:
    outcome: str                    # accept | reject-spoof | reject-nonmatch
    pad_score: float
    match_score: float | None       # None when the PAD gate short-circuits


@dataclass
class TrainedSystem:
    """A deployable joint system: either two backbones or one."""

    topology: str
    model_config: ModelConfig
    frm_params: dict[str, Tensor] | None = None
    pad_params: dict[str, Tensor] | None = None
    unified_params: dict[str, Tensor] | None = None
    pad_inference_layer: int = 0
    thresholds: Thresholds | None = None

    def __post_init__(self):
        if self.topology not in (SEQUENTIAL, UNIFIED):
            raise ValueError(f"unknown topology '{self.topology}'")
        if self.pad_inference_layer == 0:
            self.pad_inference_layer = default_pad_layer(self.model_config.depth)
        if not 1 <= self.pad_inference_layer <= self.model_config.depth:
            raise ValueError(f"pad_inference_layer {self.pad_inference_layer} outside "
                             f"[1, {self.model_config.depth}]")
        if self.topology == SEQUENTIAL and (self.frm_params is None or self.pad_params is None):
            raise ValueError("sequential topology requires frm_params and pad_params")
        if self.topology == UNIFIED and self.unified_params is None:
            raise ValueError("unified topology requires unified_params")


def _decision(match_score, pad, thresholds: Thresholds) -> Decision:
    if match_score is None:
        return Decision(REJECT_SPOOF, pad_score=pad, match_score=None)
    outcome = ACCEPT if match_score >= thresholds.match else REJECT_NONMATCH
    return Decision(outcome, pad_score=pad, match_score=match_score)


def _resolve_thresholds(system: TrainedSystem, thresholds) -> Thresholds:
    thr = thresholds if thresholds is not None else system.thresholds
    if thr is None:
        raise ValueError("no thresholds set; evaluate or pass thresholds explicitly")
    return thr


def sequential_decide(probe_image, reference_embedding, system: TrainedSystem,
                      thresholds: Thresholds | None = None) -> Decision:
    """Cascade rule: PAD model gates; only PAD-passing probes reach the matcher.

    A PAD rejection performs zero matcher forwards.
    """
    if system.topology != SEQUENTIAL:
        raise ValueError(f"sequential_decide on '{system.topology}' system")
    thr = _resolve_thresholds(system, thresholds)
    pad = float(pad_probabilities(system.pad_params, system.model_config, probe_image,
                                  system.pad_inference_layer))
    if pad >= thr.pad:
        return _decision(None, pad, thr)
    emb = embed_images(system.frm_params, system.model_config, probe_image)
    match = cosine_similarity(emb, reference_embedding)
    return _decision(float(np.float32(match)), pad, thr)


def unified_decide(probe_image, reference_embedding, system: TrainedSystem,
                   thresholds: Thresholds | None = None) -> Decision:
    """Single-pass rule: one backbone forward yields both scores."""
    if system.topology != UNIFIED:
        raise ValueError(f"unified_decide on '{system.topology}' system")
    thr = _resolve_thresholds(system, thresholds)
    emb, pad = forward_scores(system.unified_params, system.model_config, probe_image,
                              system.pad_inference_layer)
    pad = float(pad)
    if pad >= thr.pad:
        return _decision(None, pad, thr)
    match = cosine_similarity(emb, reference_embedding)
    return _decision(float(np.float32(match)), pad, thr)


# -- evaluation --


def _batched(n: int, batch: int):
    for start in range(0, n, batch):
        yield np.arange(start, min(start + batch, n))


def _system_scores(system: TrainedSystem, samples: list[Sample], batch_size: int):
    """Embeddings and pad probabilities for every sample, in sample order."""
    mc = system.model_config
    layer = system.pad_inference_layer
    embs, pads = [], []
    for idx in _batched(len(samples), batch_size):
        images = _stack(samples, idx)
        if system.topology == UNIFIED:
            e, p = forward_scores(system.unified_params, mc, images, layer)
        else:
            e = embed_images(system.frm_params, mc, images)
            p = pad_probabilities(system.pad_params, mc, images, layer)
        embs.append(e)
        pads.append(np.atleast_1d(p))
    return np.concatenate(embs), np.concatenate(pads)


def evaluate_joint(test_samples, system: TrainedSystem, pad_target_bpcer: float = 2.0,
                   match_target_fmr: float = 1.0, batch_size: int = 64):
    """Enroll-first-bona-fide protocol over a test split.

    The first bona fide impression of each identity is enrolled; every
    remaining sample probes every reference, producing genuine pairs,
    zero-effort impostor pairs, same-finger PA presentations, and
    cross-finger PA impostors. Returns (MetricReport, records) and stores
    the calibrated thresholds on the system.
    """
    samples = list(test_samples.test if isinstance(test_samples, DatasetSplit) else test_samples)
    samples.sort(key=lambda s: (s.identity_id, s.impression_index))
    first_bona: dict[int, Sample] = {}
    for s in samples:
        if s.liveness == "bona_fide" and s.identity_id not in first_bona:
            first_bona[s.identity_id] = s
    missing = {s.identity_id for s in samples} - set(first_bona)
    if missing:
        raise ValueError(f"identities without a bona fide impression to enroll: {sorted(missing)}")
    references = [first_bona[i] for i in sorted(first_bona)]
    enrolled = {id(s) for s in references}
    probes = [s for s in samples if id(s) not in enrolled]
    if not probes:
        raise ValueError("no probe samples left after enrollment")

    probe_emb, probe_pad = _system_scores(system, probes, batch_size)
    ref_emb, _ = _system_scores(system, references, batch_size)
    match = cosine_matrix(probe_emb, ref_emb)

    records = []
    for i, probe in enumerate(probes):
        for j, ref in enumerate(references):
            records.append(ScoreRecord(
                probe_id=probe.key,
                reference_id=ref.key,
                is_genuine_pair=probe.identity_id == ref.identity_id,
                probe_liveness=probe.liveness,
                pai_species=probe.pai_species,
                match_score=float(match[i, j]),
                pad_score=float(probe_pad[i]),
            ))
    report = compute_report(records, pad_target_bpcer=pad_target_bpcer,
                            match_target_fmr=match_target_fmr)
    system.thresholds = Thresholds(pad=report.pad_threshold, match=report.match_threshold)
    return report, records


# -- ablation --


@dataclass
class AblationRow:
    layer: int
    apcer_avg: float
    threshold: float


@dataclass
class AblationResult:
    rows: list[AblationRow]
    best_layer: int                 # argmin APCER, ties to the earlier layer
    target_bpcer: float


def ablate_layers(params: dict[str, Tensor], mc: ModelConfig, samples,
                  target_bpcer: float = 2.0, batch_size: int = 64) -> AblationResult:
    """APCER @ BPCER target for the PAD head of every layer.

    Every sample in `samples` is treated as one presentation; thresholds
    are selected per layer from that layer's own score distribution.
    """
    sample_list = list(samples.test if isinstance(samples, DatasetSplit) else samples)
    per_layer = [[] for _ in range(mc.depth)]
    with ad.no_grad():
        for idx in _batched(len(sample_list), batch_size):
            images = _stack(sample_list, idx)
            bundle = vit.forward_features(images, params, mc)
            for layer in range(1, mc.depth + 1):
                probs = pad_score(pad_head_forward(bundle.layer_tokens[layer - 1], params,
                                                   layer, depth=mc.depth))
                per_layer[layer - 1].append(np.atleast_1d(probs))
    rows = []
    for layer in range(1, mc.depth + 1):
        probs = np.concatenate(per_layer[layer - 1])
        records = [ScoreRecord(probe_id=s.key, reference_id=s.key, is_genuine_pair=True,
                               probe_liveness=s.liveness, pai_species=s.pai_species,
                               match_score=0.0, pad_score=float(p))
                   for s, p in zip(sample_list, probs)]
        thr = threshold_at_bpcer(records, target_bpcer)
        _, apcer_avg, _, _ = pad_rates(records, thr)
        rows.append(AblationRow(layer=layer, apcer_avg=apcer_avg, threshold=thr))
    best = min(rows, key=lambda r: (r.apcer_avg, r.layer)).layer
    return AblationResult(rows=rows, best_layer=best, target_bpcer=target_bpcer)


# -- parameter / latency benchmark --


def pad_head_param_count(mc: ModelConfig) -> int:
    d, h = mc.embed_dim, mc.head_hidden
    return d * h + h + h * 2 + 2


@dataclass
class BenchmarkReport:
    topology: str
    param_total: int
    param_components: dict[str, int]
    latency_ms: float
    runs: int
    environment: str


def build_untrained_system(topology: str, mc: ModelConfig, seed: int = 0,
                           pad_inference_layer: int = 0) -> TrainedSystem:
    """Randomly initialized system, for counting and timing without training."""
    rng = np.random.default_rng(seed)
    if topology == SEQUENTIAL:
        frm = init_backbone_params(mc, rng)
        pad = init_backbone_params(mc, rng)
        pad.update(init_pad_heads(mc, rng))
        return TrainedSystem(SEQUENTIAL, mc, frm_params=frm, pad_params=pad,
                             pad_inference_layer=pad_inference_layer)
    uni = init_backbone_params(mc, rng)
    uni.update(init_pad_heads(mc, rng))
    return TrainedSystem(UNIFIED, mc, unified_params=uni,
                         pad_inference_layer=pad_inference_layer)


def benchmark(system: TrainedSystem, runs: int = 100, warmup: int = 10,
              seed: int = 0) -> BenchmarkReport:
    """Deployment parameter totals and median single-probe latency.

    Sequential latency is one PAD forward plus one recognition forward;
    unified latency is a single forward plus the head. Only the head at
    the inference layer counts toward deployment parameters.
    """
    import platform

    mc = system.model_config
    backbone = param_count(mc)
    head = pad_head_param_count(mc)
    if system.topology == SEQUENTIAL:
        components = {"frm_backbone": backbone, "pad_backbone": backbone,
                      "pad_head": head}
    else:
        components = {"backbone": backbone, "pad_head": head}
    total = sum(components.values())

    rng = np.random.default_rng(seed)
    probe = rng.random((mc.channels, mc.image_size, mc.image_size), dtype=np.float32)
    layer = system.pad_inference_layer

    def one_pass():
        if system.topology == SEQUENTIAL:
            pad_probabilities(system.pad_params, mc, probe, layer)
            embed_images(system.frm_params, mc, probe)
        else:
            forward_scores(system.unified_params, mc, probe, layer)

    for _ in range(warmup):
        one_pass()
    times = np.empty(runs)
    for i in range(runs):
        start = time.perf_counter()
        one_pass()
        times[i] = time.perf_counter() - start
    env = f"CPU ({platform.machine()}, python {platform.python_version()}, numpy {np.__version__})"
    return BenchmarkReport(topology=system.topology, param_total=total,
                           param_components=components,
                           latency_ms=float(np.median(times) * 1e3), runs=runs,
                           environment=env)
