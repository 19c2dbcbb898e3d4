"""Staged training, evaluation, ablations and the alignment-curve comparison."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autograd import Tape
from .losses import PAIRS, ConfigError, clamp_temperature, combine_terms, contrastive_terms
from .metrics import (MetricReport, epe, joint_errors, mean_positive_cosine, pa_mpjpe_per_sample, pck,
                      retrieval_top1)
from .models import AdamState, ModelConfig, TriModalModel, adam_step, make_batch
from .numkit import Rng
from .synthdata import ArrayDataset, DataSpec, make_dataset, to_arrays

log = logging.getLogger(__name__)

GROUPS = TriModalModel.GROUPS
ENCODER_INPUTS = {1: ("2d", "3d"), 2: ("img", "2d", "3d"), 3: ("img", "2d", "3d")}


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class MissingPretrainingWarning(UserWarning):
    pass


@dataclass
class StageConfig:
    stage: int
    batch_size: int
    tau0: float
    tau_range: tuple[float, float]
    alpha: float = 1.0
    lr: float = 1e-4
    iterations: int = 8000
    active_pairs: tuple[str, ...] = PAIRS
    use_triplet: bool = True
    frozen: tuple[str, ...] = ()
    decoder_losses: bool = False
    update_temperature: bool = True
    eval_interval: int = 500
    seed: int = 0
    symmetric: bool = True
    reject_collisions: bool = False
    clip_norm: float | None = None

    def __post_init__(self):
        self.tau_range = (float(self.tau_range[0]), float(self.tau_range[1]))
        self.active_pairs = tuple(self.active_pairs)
        self.frozen = tuple(self.frozen)
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2, got {self.batch_size}")
        if self.tau_range[0] > self.tau_range[1] or self.tau_range[0] <= 0:
            raise ConfigError(f"invalid temperature range {self.tau_range}")
        if not self.tau_range[0] <= self.tau0 <= self.tau_range[1]:
            raise ConfigError(f"tau0={self.tau0} outside {self.tau_range}")
        if not self.active_pairs:
            raise ConfigError("at least one modality pair must be active")
        bad = [p for p in self.active_pairs if p not in PAIRS]
        if bad:
            raise ConfigError(f"unknown modality pairs {bad}; expected a subset of {PAIRS}")
        bad = [g for g in self.frozen if g not in GROUPS]
        if bad:
            raise ConfigError(f"unknown module groups {bad}; expected a subset of {GROUPS}")
        if self.iterations < 0 or self.eval_interval < 1:
            raise ConfigError("iterations must be >= 0 and eval_interval >= 1")
        needed = {m for p in self.active_pairs for m in p.split("-")}
        if self.use_triplet:
            needed |= {"img", "2d", "3d"}
        if self.stage == 1 and "img" in needed:
            raise ConfigError("stage 1 aligns only the pose encoders; image pairs and the triplet term need stage 2 or 3")

    @classmethod
    def default(cls, stage: int, **overrides) -> "StageConfig":
        """Per-stage defaults: stage 1 aligns 2D-3D; stage 2 aligns the image
        encoder to frozen pose encoders; stage 3 trains everything with decoders."""
        presets = {
            1: dict(batch_size=256, tau0=1 / 14, tau_range=(1 / 100, 1e4), active_pairs=("2d-3d",),
                    use_triplet=False),
            2: dict(batch_size=64, tau0=1 / 5, tau_range=(1 / 10, 1e4), active_pairs=("img-2d", "img-3d"),
                    use_triplet=True, frozen=("enc_2d", "enc_3d")),
            3: dict(batch_size=64, tau0=1 / 5, tau_range=(1 / 5, 1e4), active_pairs=PAIRS, use_triplet=True,
                    decoder_losses=True),
        }
        if stage not in presets:
            raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
        kw = dict(presets[stage])
        kw.update(overrides)
        return cls(stage=stage, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tau_range"] = list(self.tau_range)
        d["active_pairs"] = list(self.active_pairs)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown stage config keys: {unknown}")
        if "stage" not in d:
            raise ConfigError("stage config needs a 'stage' entry")
        rest = {k: v for k, v in d.items() if k != "stage"}
        return cls.default(int(d["stage"]), **rest)


# --------------------------------------------------------------------------
# run log
# --------------------------------------------------------------------------

LOSS_COLUMNS = tuple(f"pair_{p}" for p in PAIRS) + ("triplet", "loss_2d", "loss_3d")
LOG_COLUMNS = (("iteration", "loss_total") + LOSS_COLUMNS + ("tau",)
               + tuple(f"cos_{p}" for p in PAIRS) + tuple(f"top1_{p}" for p in PAIRS))


@dataclass
class RunLog:
    """One row per evaluation point; inactive loss terms are logged as 0."""

    rows: list[dict] = field(default_factory=list)
    alpha: float = 1.0

    def append(self, row: dict) -> None:
        missing = [c for c in LOG_COLUMNS if c not in row]
        if missing:
            raise ValueError(f"log row is missing {missing}")
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("log iterations must increase strictly")
        self.rows.append({c: row[c] for c in LOG_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    @property
    def last(self) -> dict:
        return self.rows[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([int(r["iteration"])] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str, alpha: float = 1.0) -> "RunLog":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != LOG_COLUMNS:
            raise ValueError(f"unexpected run log header {header}")
        out = cls(alpha=alpha)
        for line in reader:
            row = {c: float(v) for c, v in zip(header, line)}
            row["iteration"] = int(row["iteration"])
            out.append(row)
        return out


# --------------------------------------------------------------------------
# embeddings and diagnostics
# --------------------------------------------------------------------------


def embed_dataset(model: TriModalModel, ds: ArrayDataset, modalities=("img", "2d", "3d"),
                  chunk: int = 256) -> dict[str, np.ndarray]:
    """Off-tape embeddings of every sample, keyed by modality."""
    out = {m: [] for m in modalities}
    for s in range(0, len(ds), chunk):
        batch = make_batch(ds, np.arange(s, min(s + chunk, len(ds))))
        eb = model.encode(batch, modalities)
        for m in modalities:
            out[m].append(eb.get(m).data)
    return {m: np.concatenate(v) for m, v in out.items()}


def alignment_diagnostics(emb: dict[str, np.ndarray], block: int = 64) -> dict[str, float]:
    """Mean positive cosine and blockwise top-1 retrieval for every modality pair present.

    Retrieval is scored inside consecutive blocks of ``block`` samples so that
    chance level is ``1 / block`` regardless of the probe size.
    """
    out = {}
    for p in PAIRS:
        a, b = p.split("-")
        if a not in emb or b not in emb:
            continue
        xa, xb = emb[a], emb[b]
        out[f"cos_{p}"] = mean_positive_cosine(xa, xb)
        scores, weights = [], []
        for s in range(0, len(xa), block):
            if len(xa[s:s + block]) >= 2:
                scores.append(retrieval_top1(xa[s:s + block], xb[s:s + block]))
                weights.append(len(xa[s:s + block]))
        out[f"top1_{p}"] = float(np.average(scores, weights=weights)) if scores else 0.0
    return out


# --------------------------------------------------------------------------
# one stage
# --------------------------------------------------------------------------


@dataclass
class StageResult:
    model: TriModalModel
    log: RunLog
    checkpoint: Path | None


def batch_order(n: int, batch_size: int, iterations: int, rng: Rng):
    """Index batches drawn epoch by epoch from fresh permutations (without replacement inside an epoch)."""
    if batch_size > n:
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
    per_epoch = n // batch_size
    epoch = 0
    produced = 0
    while produced < iterations:
        perm = rng.child("epoch", epoch).permutation(n)
        for k in range(per_epoch):
            if produced >= iterations:
                return
            yield perm[k * batch_size:(k + 1) * batch_size]
            produced += 1
        epoch += 1


def stage_loss_terms(model: TriModalModel, config: StageConfig, batch, rng: Rng) -> dict:
    """All loss terms for one batch; decoder terms only when the stage enables them."""
    eb = model.encode(batch, ENCODER_INPUTS[config.stage])
    terms = contrastive_terms(eb, model.temperature, config.alpha, rng.child("triplet"), config.active_pairs,
                              config.use_triplet, config.symmetric, config.reject_collisions)
    if config.decoder_losses:
        from .autograd import ops
        l3 = [model.decoder_loss_3d(eb.get(m), m, batch, rng.child("dec3d", m)) for m in ("img", "2d", "3d")]
        l2 = [model.decoder_loss_2d(eb.get(m), m, batch, rng.child("dec2d", m)) for m in ("img", "2d")]
        terms["loss_3d"] = ops.scale(ops.add(ops.add(l3[0], l3[1]), l3[2]), 1.0 / 3.0)
        terms["loss_2d"] = ops.scale(ops.add(l2[0], l2[1]), 0.5)
    return terms


def run_stage(config: StageConfig, model: TriModalModel, train: ArrayDataset, probe: ArrayDataset | None = None,
              checkpoint_path=None, rng: Rng | None = None) -> StageResult:
    """Train ``model`` for one stage and return it with its log (and checkpoint path)."""
    if len(train) == 0:
        raise ConfigError("training set is empty")
    done = getattr(model, "history", [])
    if config.stage > 1 and (config.stage - 1) not in done:
        msg = f"stage {config.stage} starts without a stage-{config.stage - 1} checkpoint (no-pretraining ablation)"
        warnings.warn(msg, MissingPretrainingWarning, stacklevel=2)
        log.warning(msg)
    rng = rng or Rng(config.seed).child("stage", config.stage)
    probe = probe if probe is not None else train.subset(np.arange(min(512, len(train))))

    model.unfreeze_all()
    model.freeze(config.frozen)
    model.temperature.reset(config.tau0, config.tau_range)
    if not config.update_temperature:
        model.temperature.param.trainable = False
    params = model.parameters()
    state = AdamState(lr=config.lr, clip_norm=config.clip_norm)
    run_log = RunLog(alpha=config.alpha)
    probe_mods = ENCODER_INPUTS[config.stage]

    order = batch_order(len(train), config.batch_size, config.iterations + 1, rng.child("order"))
    for it, index in enumerate(order):
        batch = make_batch(train, index)
        step_rng = rng.child("step", it)
        final = it == config.iterations
        with Tape() as tape:
            terms = stage_loss_terms(model, config, batch, step_rng)
            total = combine_terms(terms, config.alpha)  # decoder terms enter with weight 1
            value = float(total.data)
            if not math.isfinite(value):
                raise TrainingAborted(it, f"non-finite loss ({value}) in stage {config.stage}")
            if it % config.eval_interval == 0 or final:
                row = {c: 0.0 for c in LOSS_COLUMNS}
                row.update({k: float(v.data) for k, v in terms.items()})
                row.update(iteration=it, loss_total=value, tau=model.temperature.tau)
                diag = alignment_diagnostics(embed_dataset(model, probe, probe_mods))
                row.update({c: diag.get(c, 0.0) for c in LOG_COLUMNS if c.startswith(("cos_", "top1_"))})
                run_log.append(row)
                log.info("stage %d it %d loss %.4f tau %.4f", config.stage, it, value, model.temperature.tau)
            if final:
                break
            grads = tape.backward(total, params)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingAborted(it, f"non-finite gradient for {name}")
        adam_step(params, grads, state)
        clamp_temperature(model.temperature)

    model.history = list(done) + [config.stage]
    model.unfreeze_all()
    path = None
    if checkpoint_path is not None:
        path = model.save(checkpoint_path, {"history": model.history, "stage_config": config.to_dict()})
    return StageResult(model, run_log, path)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class Predictions:
    lift_3d: np.ndarray
    image_3d: np.ndarray
    image_2d: np.ndarray


def evaluate(model: TriModalModel, ds: ArrayDataset, chunk: int = 256, rng: Rng | None = None,
             return_predictions: bool = False):
    """Metric report for the lifting (2D -> 3D), image -> 3D and image -> 2D branches,
    the three alignment diagnostics and the mean-pose baseline."""
    rng = rng or Rng(0).child("evaluate")
    emb = embed_dataset(model, ds, chunk=chunk)
    lift, img3, img2 = [], [], []
    for s in range(0, len(ds), chunk):
        idx = np.arange(s, min(s + chunk, len(ds)))
        batch = make_batch(ds, idx)
        lift.append(model.predict_3d(emb["2d"][idx], "2d", batch, rng.child("lift", s)))
        img3.append(model.predict_3d(emb["img"][idx], "img", batch, rng.child("img3d", s)))
        img2.append(model.predict_2d(emb["img"][idx], "img", batch, rng.child("img2d", s)))
    preds = Predictions(np.concatenate(lift), np.concatenate(img3), np.concatenate(img2))
    gt3, gt2 = ds.pose3d, ds.pose2d_norm
    mean_pose = np.broadcast_to(model.mean_pose.value, gt3.shape)
    values = {
        "lift_mpjpe": float(joint_errors(preds.lift_3d, gt3).mean()),
        "lift_pa_mpjpe": float(pa_mpjpe_per_sample(preds.lift_3d, gt3).mean()),
        "image_mpjpe": float(joint_errors(preds.image_3d, gt3).mean()),
        "image_pa_mpjpe": float(pa_mpjpe_per_sample(preds.image_3d, gt3).mean()),
        "image_2d_pck": pck(preds.image_2d * ds.bbox[:, None, 2:], gt2 * ds.bbox[:, None, 2:], 0.05, bbox=ds.bbox),
        "image_2d_epe": epe(preds.image_2d, gt2, bbox=ds.bbox),
        "mean_pose_mpjpe": float(joint_errors(mean_pose, gt3).mean()),
    }
    values.update(alignment_diagnostics(emb))
    report = MetricReport(values, len(ds), ds.fingerprint())
    return (report, preds) if return_predictions else report


# --------------------------------------------------------------------------
# full schedule
# --------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    """Everything one run depends on; a pure function of this and nothing else."""

    seed: int = 0
    n_train: int = 50000
    n_test: int = 5000
    data_seed: int = 0
    probe_size: int = 512
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict = field(default_factory=lambda: {s: StageConfig.default(s) for s in (1, 2, 3)})
    output_dir: str | None = None
    data_spec: DataSpec = field(default_factory=DataSpec)

    def stage(self, s: int) -> StageConfig | None:
        return self.stages.get(s)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "n_train": self.n_train, "n_test": self.n_test, "data_seed": self.data_seed,
            "probe_size": self.probe_size, "model": self.model.to_dict(), "output_dir": self.output_dir,
            "stages": {str(s): (c.to_dict() if c is not None else None) for s, c in sorted(self.stages.items())},
        }

    def with_stage_overrides(self, **overrides) -> "PipelineConfig":
        stages = {s: (replace(c, **overrides) if c is not None else None) for s, c in self.stages.items()}
        return replace(self, stages=stages)


def make_splits(cfg: PipelineConfig) -> tuple[ArrayDataset, ArrayDataset]:
    """Disjoint train/test sets from one data seed (test ids continue after train)."""
    spec = cfg.data_spec
    root = Rng(cfg.data_seed)
    train = to_arrays(make_dataset(cfg.n_train, root.child("train"), spec), spec)
    test = to_arrays(make_dataset(cfg.n_test, root.child("test"), spec, start_id=cfg.n_train), spec)
    return train, test


@dataclass
class PipelineResult:
    model: TriModalModel
    logs: dict[int, RunLog]
    report: MetricReport
    checkpoints: dict[int, Path]


def build_model(cfg: PipelineConfig, train: ArrayDataset, stage: int = 1) -> TriModalModel:
    first = cfg.stage(stage) or StageConfig.default(stage)
    model = TriModalModel(cfg.model, seed=cfg.seed, tau0=first.tau0, tau_range=first.tau_range)
    model.calibrate(train)
    return model


def run_pipeline(cfg: PipelineConfig, train: ArrayDataset | None = None, test: ArrayDataset | None = None,
                 model: TriModalModel | None = None, stages=(1, 2, 3)) -> PipelineResult:
    """Run the enabled stages in order, then evaluate on the test split."""
    if train is None or test is None:
        train, test = make_splits(cfg)
    active = [s for s in stages if cfg.stage(s) is not None]
    if model is None:
        model = build_model(cfg, train, active[0] if active else 1)
    probe = test.subset(np.arange(min(cfg.probe_size, len(test))))
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    logs, ckpts = {}, {}
    for s in active:
        sc = replace(cfg.stage(s), seed=cfg.seed)
        path = out_dir / f"stage{s}.npz" if out_dir else None
        res = run_stage(sc, model, train, probe, path)
        logs[s] = res.log
        if res.checkpoint is not None:
            ckpts[s] = res.checkpoint
            res.log.write_csv(out_dir / f"stage{s}_log.csv")
    report = evaluate(model, test)
    if out_dir:
        (out_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")
        (out_dir / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    return PipelineResult(model, logs, report, ckpts)


# --------------------------------------------------------------------------
# ablations and the alignment-curve comparison
# --------------------------------------------------------------------------

ABLATION_TOGGLES = ("use_triplet", "use_modality_token", "pretrain")


def ablation_configs(base: PipelineConfig, toggles: dict[str, list]) -> list[tuple[dict, PipelineConfig]]:
    """Cartesian product of toggle values; every row keeps the base seeds."""
    bad = [k for k in toggles if k not in ABLATION_TOGGLES]
    if bad:
        raise ConfigError(f"unknown ablation toggles {bad}; expected a subset of {ABLATION_TOGGLES}")
    keys = list(toggles)
    rows = []
    for values in itertools.product(*(toggles[k] for k in keys)):
        label = dict(zip(keys, values))
        cfg = base
        if "use_triplet" in label:
            stages = {s: (replace(c, use_triplet=bool(label["use_triplet"])) if c is not None and s > 1 else c)
                      for s, c in cfg.stages.items()}
            cfg = replace(cfg, stages=stages)
        if "use_modality_token" in label:
            cfg = replace(cfg, model=replace(cfg.model, use_modality_token=bool(label["use_modality_token"])))
        if "pretrain" in label and not label["pretrain"]:
            cfg = replace(cfg, stages={s: (c if s == 3 else None) for s, c in cfg.stages.items()})
        rows.append((label, cfg))
    return rows


def ablation_matrix(configs: list[tuple[dict, PipelineConfig]], train: ArrayDataset,
                    test: ArrayDataset) -> list[tuple[dict, MetricReport]]:
    """One evaluation row per configuration, all on the same data."""
    out = []
    for label, cfg in configs:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MissingPretrainingWarning)
            res = run_pipeline(replace(cfg, output_dir=None), train, test)
        out.append((label, res.report))
    return out


def alignment_stage_config(use_triplet: bool, seed: int = 0, **overrides) -> StageConfig:
    """Joint alignment of all three encoders from scratch, decoders off: the
    pair-only and pair+triplet runs differ only in ``use_triplet``/``alpha``."""
    kw = dict(decoder_losses=False, use_triplet=use_triplet, alpha=1.0 if use_triplet else 0.0, seed=seed)
    kw.update(overrides)
    return StageConfig.default(3, **kw)


def alignment_comparison(train: ArrayDataset, probe: ArrayDataset, seeds=(0, 1, 2),
                         model_config: ModelConfig | None = None, **overrides) -> dict[int, dict[str, RunLog]]:
    """Pair-only vs pair+triplet alignment curves with shared seeds and data order."""
    model_config = model_config or ModelConfig(pose_encoder="mlp")
    out = {}
    for seed in seeds:
        out[seed] = {}
        for name, flag in (("pair_only", False), ("with_triplet", True)):
            sc = alignment_stage_config(flag, seed=seed, **overrides)
            model = TriModalModel(model_config, seed=seed, tau0=sc.tau0, tau_range=sc.tau_range)
            model.calibrate(train)
            model.history = [1, 2]  # a deliberate from-scratch run, not a missing checkpoint
            out[seed][name] = run_stage(sc, model, train, probe).log
    return out
