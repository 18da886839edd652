"""Training, evaluation, OOD evaluation and report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import ood as ood_lib
from .config import ExperimentConfig, dump_config
from .data import (
    AttributeVocab,
    Example,
    LabelScheme,
    MappedRecords,
    SplitPlan,
    UtteranceRecord,
    build_batches,
    get_scheme,
    load_manifest,
    make_holdout_splits,
    make_kfold_splits,
    map_labels,
    resolve_audio,
)
from .errors import ConfigError, DataError, NumericalError
from .features import (
    AugmentSpec,
    FBankFeatures,
    compute_fbanks,
    load_waveform,
    read_fbank_file,
    write_fbank_file,
)
from .losses import AMSoftmaxParams, MSACWeights, am_softmax_loss, msac_total_loss, preset_weights
from .metrics import EvalReport, ReliabilityReport, eval_report, reliability
from .model import EmotionLogits, SERNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- features


def extract_features(record: UtteranceRecord, config: ExperimentConfig, manifest_path=None) -> np.ndarray:
    fp = config.features
    wav = load_waveform(resolve_audio(record, manifest_path), fp.sample_rate)
    fb = compute_fbanks(wav, fp.num_mel_bins, fp.fft_size, fp.frame_length_ms, fp.frame_shift_ms)
    return fb.values.astype(np.float32)


class FeatureStore:
    """Computes features once per utterance, optionally caching them on disk."""

    def __init__(self, config: ExperimentConfig, manifest_path=None, cache_dir=None):
        self.config = config
        self.manifest_path = manifest_path
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._memory: dict[str, np.ndarray] = {}

    def get(self, record: UtteranceRecord) -> np.ndarray:
        if record.utterance_id in self._memory:
            return self._memory[record.utterance_id]
        values = None
        cached = self.cache_dir / f"{record.utterance_id}.fbk" if self.cache_dir else None
        if cached is not None and cached.exists():
            values = read_fbank_file(cached).values
            if values.shape[1] != self.config.features.num_mel_bins:
                values = None
        if values is None:
            values = extract_features(record, self.config, self.manifest_path)
            if cached is not None:
                cached.parent.mkdir(parents=True, exist_ok=True)
                write_fbank_file(cached, FBankFeatures(values))
        self._memory[record.utterance_id] = values
        return values


def make_examples(records, targets, store: FeatureStore, vocab: AttributeVocab | None = None) -> list[Example]:
    out = []
    for rec, target in zip(records, targets):
        labels = {"emotion": int(target)}
        if vocab is not None:
            for name in vocab.values:
                labels[name] = vocab.index(name, rec)
        out.append(Example(rec.utterance_id, store.get(rec), labels))
    return out


# ---------------------------------------------------------------- bundles


@dataclass
class CheckpointBundle:
    net: SERNet
    meta: dict
    path: Path | None = None

    @property
    def class_names(self) -> list:
        return self.meta.get("class_names", [])

    @property
    def epoch(self) -> int:
        return self.meta.get("epoch", 0)

    @property
    def best_metric(self):
        return self.meta.get("best_metric")

    def save(self, path) -> None:
        save_checkpoint(path, self.net, **self.meta)
        self.path = Path(path)

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        net, meta = load_checkpoint(path)
        return cls(net, meta, Path(path))


def parameter_digest(net: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- evaluation


def _length_groups(features: Sequence[np.ndarray]):
    groups: dict[int, list[int]] = {}
    for i, f in enumerate(features):
        groups.setdefault(f.shape[0], []).append(i)
    return groups


@torch.no_grad()
def forward_frozen(net: SERNet, features: Sequence[np.ndarray], heads=("emotion",)):
    """Eval-mode forward, batching equal-length utterances. Returns (cosines, embeddings)."""
    net.eval()
    n = len(features)
    cos = {h: None for h in heads}
    emb = None
    for length, idx in sorted(_length_groups(features).items()):
        x = torch.from_numpy(np.stack([features[i] for i in idx]).astype(np.float32)).unsqueeze(1)
        out = net(x, heads=heads)
        if emb is None:
            emb = np.zeros((n, out.embedding.shape[1]), dtype=np.float32)
        emb[idx] = out.embedding.numpy()
        for h in heads:
            c = out.cosines[h].numpy()
            if cos[h] is None:
                cos[h] = np.zeros((n, c.shape[1]), dtype=np.float32)
            cos[h][idx] = c
    return cos, emb


def predict(net: SERNet, features: Sequence[np.ndarray]) -> np.ndarray:
    cos, _ = forward_frozen(net, features)
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(cos["emotion"], axis=1)


def evaluate(bundle: CheckpointBundle, examples: Sequence[Example], scheme: LabelScheme | None = None) -> EvalReport:
    if not examples:
        raise DataError("cannot evaluate an empty split")
    k = bundle.net.config.attribute_heads["emotion"]
    names = bundle.class_names or [str(i) for i in range(k)]
    if scheme is not None and scheme.num_classes != k:
        raise ConfigError(f"checkpoint has {k} emotion classes, scheme {scheme.name} has {scheme.num_classes}")
    preds = predict(bundle.net, [ex.features for ex in examples])
    labels = np.array([ex.labels["emotion"] for ex in examples])
    return eval_report(preds, labels, k, names)


def aggregate_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Unweighted mean of WAR/UAR/recalls across folds; confusion counts summed."""
    if len(reports) == 1:
        return reports[0]
    recall = np.vstack([r.per_class_recall for r in reports])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_recall = np.nanmean(recall, axis=0)
    return EvalReport(
        war=float(np.mean([r.war for r in reports])),
        uar=float(np.mean([r.uar for r in reports])),
        confusion=np.sum([r.confusion for r in reports], axis=0),
        per_class_recall=mean_recall,
        class_names=reports[0].class_names,
    )


# ---------------------------------------------------------------- training


def msac_weights(config: ExperimentConfig) -> MSACWeights:
    if config.msac.preset:
        w = preset_weights(config.msac.preset)
        alpha = {**w.alpha, **config.msac.alpha}
    else:
        alpha = dict(config.msac.alpha)
    return MSACWeights(alpha, dict(config.msac.roles))


def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class TrainResult:
    bundle: CheckpointBundle
    history: list = field(default_factory=list)


def train(
    config: ExperimentConfig,
    train_examples: Sequence[Example],
    valid_examples: Sequence[Example] = (),
    class_names: Sequence[str] = (),
    vocab: AttributeVocab | None = None,
    checkpoint_path: str | Path | None = None,
    extra_meta: dict | None = None,
) -> TrainResult:
    """Optimise the weighted multi-attribute loss; keep the best validation-UAR state.

    Without validation examples the final epoch is kept.
    """
    if not train_examples:
        raise DataError("training split is empty")
    seed_everything(config.seed, config.deterministic)
    weights = msac_weights(config)
    aux = [name for name, a in weights.alpha.items() if a > 0]
    for name in aux:
        if name not in train_examples[0].labels:
            raise ConfigError(f"auxiliary attribute {name!r} has no labels in the training examples")
    num_classes = len(class_names) or 1 + max(ex.labels["emotion"] for ex in train_examples)
    heads = {"emotion": num_classes}
    for name in aux:
        heads[name] = vocab.num_classes(name) if vocab else 1 + max(ex.labels[name] for ex in train_examples)
    mconf = config.model_config(heads)
    mconf.agnostic_attributes = [n for n in heads if n != "emotion" and weights.roles.get(n) == "agnostic"]
    net = SERNet(mconf)
    params = AMSoftmaxParams(config.loss.s, config.loss.m)
    opt = torch.optim.AdamW(net.parameters(), lr=config.optim.lr, weight_decay=config.optim.weight_decay)
    fp = config.features
    augment = (
        AugmentSpec(fp.freq_mask_width, fp.time_mask_width, fp.num_freq_masks, fp.num_time_masks)
        if fp.augment
        else None
    )
    meta = {
        "class_names": list(class_names) or [str(i) for i in range(num_classes)],
        "vocab": vocab.to_dict() if vocab else {},
        "config": config.to_dict(),
        "loss": {"s": params.s, "m": params.m},
        **(extra_meta or {}),
    }

    def validation_uar():
        if not valid_examples:
            return None
        bundle = CheckpointBundle(net, meta)
        return evaluate(bundle, valid_examples).uar

    best = None
    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    best_epoch = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        net.train()
        t0 = time.time()
        losses = []
        for batch in build_batches(
            train_examples, config.batch_size, config.seed, "train", epoch, fp.target_frames, augment
        ):
            if len(batch) < 2:
                # batch statistics are undefined for a single sample
                continue
            out = net(batch.features)
            le = am_softmax_loss(out.cosines["emotion"], batch.labels["emotion"], params)
            aux_losses = {n: am_softmax_loss(out.cosines[n], batch.labels[n], params) for n in aux}
            total = msac_total_loss(le, aux_losses, weights)
            if not torch.isfinite(total):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}: emotion={le.item()}, "
                    + ", ".join(f"{k}={v.item()}" for k, v in aux_losses.items())
                )
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            losses.append(total.item())
        val = validation_uar()
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if val is not None:
            val_war = evaluate(CheckpointBundle(net, meta), valid_examples).war
            row.update(valid_war=val_war, valid_uar=val)
        history.append(row)
        log.info("epoch %d %s (%.1fs)", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"}, time.time() - t0)
        # ties go to the later, longer-trained epoch
        if val is None or best is None or val >= best:
            best = val
            best_epoch = epoch
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
    net.load_state_dict(best_state)
    net.eval()
    if config.epochs == 0:
        best = validation_uar()
    meta.update(epoch=best_epoch, best_metric=best, metric_name="valid_uar")
    bundle = CheckpointBundle(net, meta)
    if checkpoint_path is not None:
        bundle.save(checkpoint_path)
    return TrainResult(bundle, history)


# ---------------------------------------------------------------- OOD


def ood_evaluate(
    bundle: CheckpointBundle,
    fit_examples: Sequence[Example],
    id_examples: Sequence[Example],
    ood_examples: Sequence[Example],
    detectors: Sequence[ood_lib.DetectorKind],
    scores_dir: str | Path | None = None,
) -> list[ReliabilityReport]:
    """One (FPR95, AUROC) per detector; ReACT/Mahalanobis are fitted on ``fit_examples``."""
    if not id_examples or not ood_examples:
        raise DataError("OOD evaluation needs non-empty ID and OOD sets")
    scale = bundle.meta.get("loss", {}).get("s", 30.0)
    model = EmotionLogits(bundle.net, scale).eval()
    fit_feats = [ex.features for ex in fit_examples]
    fit_emb = fit_labels = None
    reports = []
    for kind in detectors:
        if kind.needs_fit:
            if not fit_examples:
                raise DataError(f"{kind.kind} needs ID training data to fit")
            if fit_emb is None:
                _, fit_emb = forward_frozen(bundle.net, fit_feats)
                fit_labels = np.array([ex.labels["emotion"] for ex in fit_examples])
            fitted = ood_lib.fit_detector(
                kind, fit_emb, fit_labels, bundle.net.config.attribute_heads["emotion"]
            )
        else:
            fitted = ood_lib.fit_detector(kind)
        scores = ood_lib.evaluate_detector(
            model,
            fitted,
            [ex.features for ex in id_examples],
            [ex.features for ex in ood_examples],
            [ex.utterance_id for ex in id_examples],
            [ex.utterance_id for ex in ood_examples],
        )
        if scores_dir is not None:
            Path(scores_dir).mkdir(parents=True, exist_ok=True)
            ood_lib.write_scores_csv(Path(scores_dir) / f"scores_{kind.kind}.csv", scores)
        reports.append(reliability(kind.kind, scores.id_scores, scores.ood_scores))
    return reports


# ---------------------------------------------------------------- reports


def unique_run_dir(root: str | Path) -> Path:
    """``root/<timestamp>``; never reuses an existing directory."""
    root = Path(root)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    candidate = root / stamp
    n = 1
    while True:
        try:
            candidate.mkdir(parents=True, exist_ok=False)
            return candidate
        except FileExistsError:
            candidate = root / f"{stamp}-{n}"
            n += 1


def confusion_grid(report: EvalReport) -> str:
    """Counts and row-normalised recall; the diagonal of the latter is per-class recall."""
    names = report.class_names or [str(i) for i in range(len(report.confusion))]
    width = max(8, *(len(n) + 1 for n in names))
    cm = report.confusion
    rows = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros(cm.shape, dtype=float), where=rows > 0)
    lines = ["counts (rows = true, cols = predicted)"]
    header = " " * width + "".join(n.rjust(width) for n in names)
    lines.append(header)
    for name, row in zip(names, cm):
        lines.append(name.ljust(width) + "".join(str(int(v)).rjust(width) for v in row))
    lines += ["", "row-normalised (diagonal = recall)", header]
    for name, row in zip(names, norm):
        lines.append(name.ljust(width) + "".join(f"{v:.4f}".rjust(width) for v in row))
    return "\n".join(lines) + "\n"


def normalized_confusion(report: EvalReport) -> np.ndarray:
    cm = report.confusion.astype(float)
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def emit_report(
    reports: Sequence[EvalReport],
    out_dir: str | Path,
    config: ExperimentConfig | None = None,
    reliability_reports: Sequence[ReliabilityReport] = (),
    image: bool = False,
) -> Path:
    """Write a fresh ``out_dir/<timestamp>/`` with metrics, per-fold rows and confusion grid."""
    if not reports:
        raise DataError("no evaluation reports to emit")
    try:
        run = unique_run_dir(out_dir)
    except OSError as exc:
        raise DataError(f"cannot create report directory under {out_dir}: {exc}") from exc
    overall = aggregate_reports(reports)
    _write_csv(run / "metrics.csv", [{"fold": "mean", **overall.as_row()}])
    _write_csv(run / "per_fold.csv", [{"fold": i, **r.as_row()} for i, r in enumerate(reports)])
    (run / "confusion.txt").write_text(confusion_grid(overall))
    if reliability_reports:
        _write_csv(
            run / "reliability.csv",
            [{"detector": r.detector, "fpr95": r.fpr95, "auroc": r.auroc} for r in reliability_reports],
        )
    if config is not None:
        dump_config(config, run / "config_snapshot.yaml")
    if image:
        _confusion_image(overall, run / "confusion.png")
    return run


def _confusion_image(report: EvalReport, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path)
        return
    norm = normalized_confusion(report)
    names = report.class_names or [str(i) for i in range(len(norm))]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 1.2 * len(names) + 1.5))
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report_to_dict(r: EvalReport) -> dict:
    return {
        "war": r.war,
        "uar": r.uar,
        "confusion": r.confusion.tolist(),
        "per_class_recall": [None if np.isnan(v) else float(v) for v in r.per_class_recall],
        "class_names": list(r.class_names),
    }


def report_from_dict(d: dict) -> EvalReport:
    return EvalReport(
        war=d["war"],
        uar=d["uar"],
        confusion=np.array(d["confusion"], dtype=np.int64),
        per_class_recall=np.array([np.nan if v is None else v for v in d["per_class_recall"]]),
        class_names=d.get("class_names", []),
    )


# ---------------------------------------------------------------- experiment plumbing


@dataclass
class Experiment:
    """Everything resolved from a config: records, labels, split plan, features."""

    config: ExperimentConfig
    manifest_path: Path
    scheme: LabelScheme
    mapped: MappedRecords
    plan: SplitPlan
    store: FeatureStore

    @classmethod
    def from_config(cls, config: ExperimentConfig, plan: SplitPlan | None = None) -> "Experiment":
        if not config.data.manifest:
            raise ConfigError("data.manifest is not set")
        manifest = Path(config.data.manifest)
        records = load_manifest(manifest)
        if not records:
            raise DataError(f"manifest {manifest} is empty")
        scheme = get_scheme(config.data.scheme)
        mapped = map_labels(records, scheme)
        if plan is None:
            plan = build_plan(config, mapped.kept)
        store = FeatureStore(config, manifest, config.data.feature_dir)
        return cls(config, manifest, scheme, mapped, plan, store)

    def fold_indices(self) -> list[int]:
        folds = self.config.data.folds
        idx = list(range(len(self.plan.folds))) if folds is None else [int(f) for f in folds]
        for i in idx:
            if not 0 <= i < len(self.plan.folds):
                raise ConfigError(f"fold {i} out of range for a {len(self.plan.folds)}-fold plan")
        return idx

    def split_records(self, fold: int, part: str):
        speakers = getattr(self.plan.folds[fold], part)
        keep = set(speakers)
        recs, targets = [], []
        for r, t in zip(self.mapped.kept, self.mapped.targets):
            if r.speaker_key in keep:
                recs.append(r)
                targets.append(t)
        return recs, targets

    def aux_attributes(self) -> list[str]:
        return [n for n, a in msac_weights(self.config).alpha.items() if a > 0]

    def examples(self, fold: int, part: str, vocab: AttributeVocab | None = None) -> list[Example]:
        recs, targets = self.split_records(fold, part)
        return make_examples(recs, targets, self.store, vocab)

    def ood_examples(self, fold: int) -> list[Example]:
        """OOD-pool utterances of the fold's test speakers; the whole pool if they have none."""
        test = self.plan.folds[fold].test
        pool = [r for r in self.mapped.ood if r.speaker_key in test] or list(self.mapped.ood)
        return make_examples(pool, [-1] * len(pool), self.store)


def build_plan(config: ExperimentConfig, records) -> SplitPlan:
    kind = config.data.split
    if kind == "kfold":
        return make_kfold_splits(records, config.data.k, config.data.split_seed)
    if kind == "holdout":
        return make_holdout_splits(records, config.seed if config.data.split_seed is None else config.data.split_seed)
    if kind == "plan":
        if not config.data.plan_file:
            raise ConfigError("data.split = plan requires data.plan_file")
        return SplitPlan.load(config.data.plan_file)
    raise ConfigError(f"unknown split kind {kind!r}")


def train_fold(exp: Experiment, fold: int, checkpoint_path=None) -> TrainResult:
    train_recs, _ = exp.split_records(fold, "train")
    vocab = AttributeVocab.build(train_recs, exp.aux_attributes())
    train_ex = exp.examples(fold, "train", vocab)
    valid_ex = exp.examples(fold, "valid")
    return train(
        exp.config,
        train_ex,
        valid_ex,
        exp.scheme.class_names,
        vocab,
        checkpoint_path,
        extra_meta={"fold": fold, "scheme": exp.scheme.name},
    )


def detector_kinds(config: ExperimentConfig) -> list[ood_lib.DetectorKind]:
    return [ood_lib.DetectorKind(d.kind, d.temperature, d.eps, d.percentile) for d in config.detectors]


def save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2))
