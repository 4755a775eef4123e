"""Experiment orchestration: config, scenario drivers, run directory and exports.

A run directory holds the config snapshot, checkpoints, per-sample arrays,
metrics as JSON and CSV, and ``run.json`` with the manifest of every file
written. Metrics files never contain timings, so identical configs produce
byte-identical metrics.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from vitdeceive.attacks.mga import MGAConfig, TargetOracle, mga_attack
from vitdeceive.attacks.whitebox import AdversarialExample, AttackConfig, advit_whitebox_batch, plain_pgd_batch
from vitdeceive.data import DatasetSpec, generate_dataset, split
from vitdeceive.defenses import DefenseConfig, adversarial_train
from vitdeceive.detector import DetectorConfig, build_channels, train_detector
from vitdeceive.interpret.chefer import CheferInterpreter
from vitdeceive.interpret.maps import AttributionMap
from vitdeceive.interpret.iared import IaredInterpreter, IaredParams, PolicyTrainConfig, kept_accuracy, train_policy
from vitdeceive.metrics import MetricsReport, rows_from_results
from vitdeceive.model import (
    PredictionRecord,
    ToyViT,
    ToyViTConfig,
    TrainConfig,
    accuracy,
    load_model,
    predict_batch,
    save_model,
    train_toy,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCENARIOS = ("whitebox", "blackbox_transfer", "blackbox_mga", "defended", "detector")
INTERPRETERS = ("iared", "chefer")


class ConfigError(ValueError):
    pass


class EmptyEvalSetError(RuntimeError):
    pass


@dataclass
class ModelSpec:
    config: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: {"epochs": 30, "lr": 1e-3})
    checkpoint: Optional[str] = None

    def toy_config(self) -> ToyViTConfig:
        return ToyViTConfig(**self.config)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)


@dataclass
class ExperimentConfig:
    scenario: str
    seed: int
    output_dir: str = "runs/default"
    dataset: dict = field(default_factory=lambda: {"per_class": 300})
    holdout: float = 0.2
    surrogate: ModelSpec = field(default_factory=lambda: ModelSpec({"depth": 2}, {"epochs": 30, "lr": 1e-3, "seed": 2}))
    target: Optional[ModelSpec] = None
    interpreter: str = "iared"
    chefer_eps: float = 1e-9
    policy: dict = field(default_factory=lambda: {"epochs": 10, "lr": 3e-3})
    attack: dict = field(default_factory=dict)
    mga: dict = field(default_factory=dict)
    query_budget: Optional[int] = None
    defenses: list = field(default_factory=list)
    detector: dict = field(default_factory=dict)
    detector_seeds: list = field(default_factory=lambda: [0, 1, 2])
    detector_samples: int = 400
    eval_size: int = 50
    confidence_floor: float = 0.7
    workers: int = 1
    export_samples: int = 4
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.surrogate, dict):
            self.surrogate = ModelSpec(**self.surrogate)
        if isinstance(self.target, dict):
            self.target = ModelSpec(**self.target)
        self.validate()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {self.schema_version}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.interpreter not in INTERPRETERS:
            raise ConfigError(f"unknown interpreter {self.interpreter!r}")
        if self.scenario in ("blackbox_transfer", "blackbox_mga", "defended") and self.target is None:
            raise ConfigError(f"scenario {self.scenario!r} needs a target model")
        if self.scenario == "defended" and not self.defenses:
            raise ConfigError("scenario 'defended' needs at least one defense")
        if self.eval_size < 1:
            raise ConfigError("eval_size must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            AttackConfig(**self.attack)
            MGAConfig(**self.mga)
            DetectorConfig(**self.detector)
            PolicyTrainConfig(**self.policy)
            DatasetSpec(**self.dataset)
            for d in self.defenses:
                DefenseConfig(**d)
            self.surrogate.toy_config()
            if self.target is not None:
                self.target.toy_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)


def sample_seed(run_seed: int, index: int) -> int:
    """Per-sample seed derived from the run seed and the sample index only."""
    return int(np.random.SeedSequence([int(run_seed), int(index)]).generate_state(1)[0])


def select_eval_set(models, images: torch.Tensor, labels: torch.Tensor, floor: float = 0.7, limit: Optional[int] = None):
    """Samples every model classifies correctly with confidence at least ``floor``.

    ``models`` is one model or a sequence of models. Returns ``(images,
    labels, indices)``; raises :class:`EmptyEvalSetError` when nothing
    qualifies.
    """
    models = [models] if isinstance(models, ToyViT) else list(models)
    keep = torch.ones(labels.shape[0], dtype=torch.bool)
    for m in models:
        pred, probs = predict_batch(m, images)
        keep &= (pred == labels) & (probs.max(-1).values >= floor)
    idx = torch.nonzero(keep).flatten()
    if limit is not None:
        idx = idx[:limit]
    if idx.numel() == 0:
        raise EmptyEvalSetError(f"no sample is classified correctly with confidence >= {floor}")
    return images[idx], labels[idx], idx


@dataclass
class RunRecord:
    config: dict
    metrics: dict
    wall_clock: float
    manifest: dict
    run_dir: str
    failures: int = 0
    info: dict = field(default_factory=dict)


class RunWriter:
    """Single writer for a run directory; records every file in the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest: dict[str, str] = {}

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, rel: str) -> None:
        self.manifest[rel] = hashlib.sha256(self.path(rel).read_bytes()).hexdigest()

    def text(self, rel: str, content: str) -> None:
        self.path(rel).write_text(content)
        self.record(rel)

    def json(self, rel: str, payload) -> None:
        self.text(rel, json.dumps(payload, indent=2, sort_keys=True) + "\n")


class Context:
    """Data, models and interpreters for one run, trained or loaded on demand."""

    def __init__(self, config: ExperimentConfig, writer: RunWriter):
        self.config, self.writer = config, writer
        x, y = generate_dataset(DatasetSpec(**config.dataset))
        (self.x_train, self.y_train), (self.x_test, self.y_test) = split(x, y, config.holdout, config.dataset.get("seed", 0))
        self._models: dict[str, ToyViT] = {}
        self._policies: dict[str, IaredParams] = {}
        self.info: dict = {}

    def model(self, role: str) -> ToyViT:
        if role in self._models:
            return self._models[role]
        spec: ModelSpec = getattr(self.config, role)
        if spec.checkpoint:
            model = load_model(spec.checkpoint)
        else:
            model = train_toy(self.x_train, self.y_train, spec.toy_config(), spec.train_config())
        save_model(model, self.writer.path(f"checkpoints/{role}.npz"))
        self.writer.record(f"checkpoints/{role}.npz")
        self.info[f"{role}_accuracy"] = round(accuracy(model, self.x_test, self.y_test), 6)
        self._models[role] = model
        return model

    def policy(self, role: str) -> IaredParams:
        if role not in self._policies:
            model = self.model(role)
            params = train_policy(model, self.x_train, self.y_train, PolicyTrainConfig(**self.config.policy))
            params.save(self.writer.path(f"checkpoints/{role}_policy.npz"))
            self.writer.record(f"checkpoints/{role}_policy.npz")
            acc, kept = kept_accuracy(model, params, self.x_test, self.y_test)
            self.info[f"{role}_policy"] = {"kept_accuracy": round(acc, 6), "kept_fraction": round(kept, 6)}
            self._policies[role] = params
        return self._policies[role]

    def interpreter(self, role: str, name: Optional[str] = None):
        name = name or self.config.interpreter
        if name == "chefer":
            return CheferInterpreter(self.config.chefer_eps)
        return IaredInterpreter(self.policy(role))


def _batched(fn, x, y, size: int = 50):
    out = []
    for i in range(0, x.shape[0], size):
        out.extend(fn(x[i : i + size], y[i : i + size]))
    return out


def _write_report(writer: RunWriter, stem: str, results, interpreter: str) -> MetricsReport:
    report = MetricsReport.from_rows(rows_from_results(results, interpreter))
    writer.text(f"{stem}.json", report.to_json() + "\n")
    writer.text(f"{stem}.csv", report.to_csv())
    return report


def _write_samples(writer: RunWriter, results, stem: str = "samples") -> None:
    if not results:
        return
    arrays = {
        "x": np.stack([r.x for r in results]),
        "x_adv": np.stack([r.x_adv for r in results]),
        "benign_map": np.stack([r.benign_map.pixel_map for r in results]),
        "adv_map": np.stack([r.adv_map.pixel_map for r in results]),
        "success": np.array([r.success for r in results]),
    }
    rel = f"{stem}.npz"
    with open(writer.path(rel), "wb") as fh:
        np.savez(fh, **arrays)
    writer.record(rel)


def _run_whitebox(ctx: Context, writer: RunWriter) -> tuple[dict, int]:
    cfg = ctx.config
    model = ctx.model("surrogate")
    interp = ctx.interpreter("surrogate")
    x, y, idx = select_eval_set(model, ctx.x_test, ctx.y_test, cfg.confidence_floor, cfg.eval_size)
    attack = AttackConfig(**cfg.attack)
    adv = _batched(lambda a, b: advit_whitebox_batch(model, interp, a, b, attack), x, y)
    control = _batched(lambda a, b: plain_pgd_batch(model, interp, a, b, attack), x, y)
    rep = _write_report(writer, "metrics", adv, interp.name)
    ctl = _write_report(writer, "control_metrics", control, interp.name)
    _write_samples(writer, adv)
    export_maps(writer.root, range(min(cfg.export_samples, len(adv))), writer)
    return {"attack": rep.summary(), "control": ctl.summary(), "eval_indices": idx.tolist()}, 0


def _mga_batch(ctx: Context, x, y, oracle_factory, judge) -> tuple[list[AdversarialExample], int]:
    cfg = ctx.config
    surrogate = ctx.model("surrogate")
    interp = ctx.interpreter("surrogate")
    attack = AttackConfig(**cfg.attack)

    def one(i: int):
        seed = sample_seed(cfg.seed, i)
        oracle = oracle_factory(seed)
        mga = MGAConfig(**{**cfg.mga, "seed": seed})
        try:
            return mga_attack(surrogate, interp, oracle, x[i], int(y[i]), mga, attack, judge=judge)
        except Exception as exc:  # noqa: BLE001 - per-sample failures are tallied, not fatal
            logger.warning("sample %d failed: %s", i, exc)
            return exc

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            outs = list(pool.map(one, range(x.shape[0])))
    else:
        outs = [one(i) for i in range(x.shape[0])]
    results = [o for o in outs if isinstance(o, AdversarialExample)]
    return results, len(outs) - len(results)


def _judge(ctx: Context):
    return ctx.model("target"), ctx.interpreter("target")


def _run_transfer(ctx: Context, writer: RunWriter) -> tuple[dict, int]:
    cfg = ctx.config
    surrogate, target = ctx.model("surrogate"), ctx.model("target")
    interp = ctx.interpreter("surrogate")
    j_model, j_interp = _judge(ctx)
    x, y, idx = select_eval_set([surrogate, target], ctx.x_test, ctx.y_test, cfg.confidence_floor, cfg.eval_size)
    attack = AttackConfig(**cfg.attack)
    seeds = _batched(lambda a, b: advit_whitebox_batch(surrogate, interp, a, b, attack), x, y)
    results = []
    hw = tuple(x.shape[-2:])
    for i, r in enumerate(seeds):
        xa = torch.from_numpy(r.x_adv)[None]
        with torch.no_grad():
            logits = target(xa)[0]
            benign_logits = target(x[i : i + 1])[0]
        pa, pb = logits.argmax(-1, keepdim=True), benign_logits.argmax(-1, keepdim=True)
        results.append(
            AdversarialExample(
                x=r.x,
                x_adv=r.x_adv,
                benign=PredictionRecord.from_logits(benign_logits),
                adversarial=PredictionRecord.from_logits(logits),
                benign_map=AttributionMap.from_tokens(j_interp.token_scores(j_model, x[i : i + 1], pb)[0], hw, j_interp.name),
                adv_map=AttributionMap.from_tokens(j_interp.token_scores(j_model, xa, pa)[0], hw, j_interp.name),
                success=bool(int(pa) != int(y[i])),
                queries=1,
            )
        )
    rep = _write_report(writer, "metrics", results, j_interp.name)
    _write_samples(writer, results)
    export_maps(writer.root, range(min(cfg.export_samples, len(results))), writer)
    return {"attack": rep.summary(), "eval_indices": idx.tolist()}, 0


def _run_mga(ctx: Context, writer: RunWriter) -> tuple[dict, int]:
    cfg = ctx.config
    surrogate, target = ctx.model("surrogate"), ctx.model("target")
    x, y, idx = select_eval_set([surrogate, target], ctx.x_test, ctx.y_test, cfg.confidence_floor, cfg.eval_size)
    judge = _judge(ctx)
    results, failures = _mga_batch(ctx, x, y, lambda s: TargetOracle(target, budget=cfg.query_budget, seed=s), judge)
    rep = _write_report(writer, "metrics", results, judge[1].name)
    _write_samples(writer, results)
    export_maps(writer.root, range(min(cfg.export_samples, len(results))), writer)
    budget_failures = sum(1 for r in results if "budget" in r.note)
    return {"attack": rep.summary(), "budget_failures": budget_failures, "eval_indices": idx.tolist()}, failures


def _defended_filter(model, transforms, x, y, cfg: ExperimentConfig):
    """Keep samples the defended pipeline still classifies correctly and confidently.

    Returns the kept samples (at most ``eval_size``) and the fraction of
    candidates that passed.
    """
    if not transforms:
        return x[: cfg.eval_size], y[: cfg.eval_size], 1.0
    keep = []
    for i in range(x.shape[0]):
        probs = TargetOracle(model, transforms, seed=sample_seed(cfg.seed, 10_000 + i)).evaluate(x[i].numpy())
        keep.append(int(np.argmax(probs)) == int(y[i]) and float(probs.max()) >= cfg.confidence_floor)
    keep_t = torch.tensor(keep, dtype=torch.bool)
    idx = torch.nonzero(keep_t).flatten()[: cfg.eval_size]
    if idx.numel() == 0:
        raise EmptyEvalSetError("the defended model classifies no candidate correctly")
    return x[idx], y[idx], float(keep_t.float().mean())


def _run_defended(ctx: Context, writer: RunWriter) -> tuple[dict, int]:
    cfg = ctx.config
    surrogate, target = ctx.model("surrogate"), ctx.model("target")
    out, failures = {}, 0
    for d in cfg.defenses:
        defense = DefenseConfig(**d)
        if defense.kind == "adversarial_training":
            spec = cfg.target
            model = adversarial_train(
                spec.toy_config(), ctx.x_train, ctx.y_train, spec.train_config(), AttackConfig(**cfg.attack), defense.mix,
                warmup=defense.warmup,
            )
            transforms = []
        else:
            model, transforms = target, [defense.transform()]
        x, y, _ = select_eval_set([surrogate, model], ctx.x_test, ctx.y_test, cfg.confidence_floor)
        x, y, defended_acc = _defended_filter(model, transforms, x, y, cfg)
        results, fails = _mga_batch(
            ctx, x, y, lambda s, m=model, t=transforms: TargetOracle(m, t, budget=cfg.query_budget, seed=s), (surrogate, ctx.interpreter("surrogate"))
        )
        failures += fails
        rep = _write_report(writer, f"metrics_{defense.kind}", results, cfg.interpreter)
        out[defense.kind] = {
            "attack": rep.summary(),
            "clean_accuracy": round(accuracy(model, ctx.x_test, ctx.y_test), 6),
            "defended_eval_accuracy": round(defended_acc, 6),
        }
    return out, failures


def _run_detector(ctx: Context, writer: RunWriter) -> tuple[dict, int]:
    cfg = ctx.config
    model = ctx.model("surrogate")
    pair = (CheferInterpreter(cfg.chefer_eps), ctx.interpreter("surrogate", "iared"))
    x_all = torch.cat([ctx.x_train, ctx.x_test])
    y_all = torch.cat([ctx.y_train, ctx.y_test])
    x, y, _ = select_eval_set(model, x_all, y_all, cfg.confidence_floor)
    n = cfg.detector_samples
    if x.shape[0] < 2 * n:
        raise EmptyEvalSetError(f"need {2 * n} confident samples for the detector, have {x.shape[0]}")
    benign = x[:n]
    attack = AttackConfig(**cfg.attack)
    adv, provenance = [], []
    for k, i in enumerate(range(n, 2 * n, 50)):
        guide = pair[k % 2]
        for r in advit_whitebox_batch(model, guide, x[i : i + 50], y[i : i + 50], attack):
            if r.success:
                adv.append(torch.from_numpy(r.x_adv))
                provenance.append(guide.name)
    adv = torch.stack(adv)
    dcfg = DetectorConfig(**cfg.detector)
    out: dict = {"benign": int(benign.shape[0]), "adversarial": int(adv.shape[0]),
                 "provenance": {name: provenance.count(name) for name in sorted(set(provenance))}}
    for mode in (2, 3):
        b = build_channels(model, benign, pair, mode)
        a = build_channels(model, adv, pair, mode)
        accs = []
        for s in cfg.detector_seeds:
            det = train_detector(b, a, dcfg, int(s))
            accs.append(round(det.val_accuracy, 6))
            det.save(writer.path(f"checkpoints/detector_mode{mode}_seed{s}.npz"))
            writer.record(f"checkpoints/detector_mode{mode}_seed{s}.npz")
        out[f"mode{mode}"] = accs
        if mode == 2:
            ctrl = train_detector(b, a, dcfg, int(cfg.detector_seeds[0]), shuffle_labels=True)
            out["shuffled_control"] = round(ctrl.val_accuracy, 6)
    writer.json("detector.json", out)
    return out, 0


DRIVERS = {
    "whitebox": _run_whitebox,
    "blackbox_transfer": _run_transfer,
    "blackbox_mga": _run_mga,
    "defended": _run_defended,
    "detector": _run_detector,
}


def run_experiment(config: ExperimentConfig) -> RunRecord:
    """Execute one scenario end to end and write its run directory."""
    config.validate()
    torch.manual_seed(config.seed)
    start = time.perf_counter()
    writer = RunWriter(config.output_dir)
    writer.text("config.json", config.to_json() + "\n")
    ctx = Context(config, writer)
    metrics, failures = DRIVERS[config.scenario](ctx, writer)
    metrics = {"scenario": config.scenario, "models": ctx.info, "failures": failures, **metrics}
    writer.json("summary.json", metrics)
    elapsed = time.perf_counter() - start
    record = RunRecord(config.to_dict(), metrics, elapsed, dict(writer.manifest), str(writer.root), failures, ctx.info)
    run_json = {"config": record.config, "wall_clock": elapsed, "failures": failures, "manifest": record.manifest}
    (writer.root / "run.json").write_text(json.dumps(run_json, indent=2, sort_keys=True) + "\n")
    record.manifest["run.json"] = "self"
    return record


class MissingSampleError(KeyError):
    pass


def _png(path: Path, array: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(array).save(path)


def export_maps(run_dir, sample_ids, writer: Optional[RunWriter] = None) -> list[Path]:
    """Write benign/adversarial images and their 8-bit maps for each sample id.

    Four PNG files per sample under ``maps/``; map pixels are
    ``round(255 * normalized value)``.
    """
    root = Path(run_dir)
    src = root / "samples.npz"
    if not src.exists():
        raise FileNotFoundError(f"{src} not found; run the experiment first")
    data = np.load(src)
    n = data["x"].shape[0]
    written = []
    for sid in sample_ids:
        sid = int(sid)
        if not 0 <= sid < n:
            raise MissingSampleError(f"sample {sid} not in run (have {n})")
        files = {
            f"maps/sample{sid:03d}_benign.png": _to_rgb8(data["x"][sid]),
            f"maps/sample{sid:03d}_adv.png": _to_rgb8(data["x_adv"][sid]),
            f"maps/sample{sid:03d}_benign_map.png": _map8(data["benign_map"][sid]),
            f"maps/sample{sid:03d}_adv_map.png": _map8(data["adv_map"][sid]),
        }
        for rel, arr in files.items():
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            _png(path, arr)
            if writer is not None:
                writer.record(rel)
            written.append(path)
    return written


def _to_rgb8(chw: np.ndarray) -> np.ndarray:
    img = np.rint(255.0 * np.clip(chw, 0.0, 1.0)).astype(np.uint8)
    img = np.transpose(img, (1, 2, 0))
    return img[..., 0] if img.shape[-1] == 1 else img


def _map8(m: np.ndarray) -> np.ndarray:
    return np.rint(255.0 * np.clip(m, 0.0, 1.0)).astype(np.uint8)
