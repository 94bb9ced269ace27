"""Experiment stages, the IFA pipeline, the uncertainty and spectral studies,
and report emission."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import attacks, packets, spectral
from .config import ConfigError, ExperimentConfig
from .data import Dataset, SyntheticSpec, load_cifar10_bin, load_mnist_idx, make_synthetic, train_test_subsets
from .models import (
    Model, ModelSpec, PairSet, TrainConfig, evaluate_accuracy, load_checkpoint, params_hash,
    save_checkpoint, train,
)

log = logging.getLogger(__name__)

REPORT_FORMAT = "robustlab-report"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


class InvariantViolation(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"invariant violated in stage {stage!r}: {message}")


# report ---------------------------------------------------------------------

@dataclass
class MetricsReport:
    kind: str
    config_hash: str
    seed: int
    config: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    timestamps: dict = field(default_factory=dict)

    def table(self, name: str, columns: list[str]) -> list:
        t = self.tables.setdefault(name, {"columns": list(columns), "rows": []})
        return t["rows"]

    def add_series(self, name: str, x: str, y: str, points) -> None:
        self.series[name] = {"x": x, "y": y, "points": [[a, b] for a, b in points]}

    def to_dict(self) -> dict:
        d = _clean(asdict(self))
        d["format"] = REPORT_FORMAT
        return d

    def comparable(self) -> dict:
        """Everything except wall-clock fields."""
        d = self.to_dict()
        d.pop("timestamps")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("format") != REPORT_FORMAT:
            raise ConfigError("not a report file")
        d = dict(d)
        d.pop("format")
        return cls(**d)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _csv_cell(v):
    return "" if v is None else v


def emit_report(report: MetricsReport, out_dir, formats=("json", "csv", "series")) -> list[Path]:
    """Write ``report.json``, ``tables/<name>.csv`` and ``series/<name>.csv``.

    Output is a pure function of the report, so re-emission is byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        written.append(p)
    if "csv" in formats:
        for name in sorted(d["tables"]):
            t = d["tables"][name]
            p = out / "tables" / f"{name}.csv"
            p.parent.mkdir(exist_ok=True)
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(t["columns"])
                for row in t["rows"]:
                    w.writerow([_csv_cell(v) for v in row])
            written.append(p)
    if "series" in formats:
        for name in sorted(d["series"]):
            s = d["series"][name]
            p = out / "series" / f"{name}.csv"
            p.parent.mkdir(exist_ok=True)
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([s["x"], s["y"]])
                for a, b in s["points"]:
                    w.writerow([_csv_cell(a), _csv_cell(b)])
            written.append(p)
    return written


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """Shared state for one invocation: config, output dir and report."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = prepare_output(cfg.out)
        self.report = MetricsReport(cfg.kind, cfg.hash(), cfg.seed, cfg.to_dict())
        self.report.provenance["checkpoints"] = {}

    @contextlib.contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        self.report.timestamps[name] = {"started": _now()}
        log.info("stage %s", name)
        try:
            yield
        except (ConfigError, InvariantViolation, StageError):
            self._dump_partial()
            raise
        except Exception as exc:
            self._dump_partial()
            raise StageError(name, exc) from exc
        finally:
            self.report.timestamps[name]["seconds"] = round(time.perf_counter() - t0, 3)

    def _dump_partial(self):
        try:
            (self.out / "report.partial.json").write_text(
                json.dumps(self.report.to_dict(), indent=2, sort_keys=True) + "\n")
        except OSError:
            pass

    def violation(self, stage: str, message: str) -> None:
        self.report.violations.append({"stage": stage, "message": message})

    def check_violations(self) -> None:
        if self.report.violations:
            v = self.report.violations[0]
            raise InvariantViolation(v["stage"], v["message"])

    def save_model(self, model: Model, name: str, meta: dict) -> str:
        meta = dict(meta, config_hash=self.report.config_hash)
        digest = save_checkpoint(self.out / "checkpoints" / name, model, meta)
        self.report.provenance["checkpoints"][name] = digest
        return digest

    def finish(self, formats=("json", "csv", "series")) -> MetricsReport:
        emit_report(self.report, self.out, formats)
        return self.report


def prepare_output(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable ({exc})") from None
    return out


# building blocks --------------------------------------------------------------

def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    return h.hexdigest()


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "synthetic":
        spec = SyntheticSpec(d.kind, d.dimension, d.per_class, d.noise, cfg.seed, d.classes, d.separation)
        train_set = make_synthetic(spec)
        spec.seed = cfg.seed + 1
        test_set = make_synthetic(spec)
        return train_set, test_set
    full = load_mnist_idx(d.images, d.labels) if d.source == "mnist-idx" else load_cifar10_bin(d.path)
    return train_test_subsets(full, d.n_train, d.n_test, cfg.seed)


def model_spec(cfg: ExperimentConfig) -> ModelSpec:
    m = cfg.model
    return ModelSpec(m.kind, list(m.widths), tuple(m.input_shape), m.activation, m.classes, m.hidden, m.depth)


def generator_spec(cfg: ExperimentConfig, input_shape) -> ModelSpec:
    g = cfg.generator
    return ModelSpec("unet-generator", list(g.widths), tuple(input_shape), g.activation, depth=g.depth)


def train_config(settings, seed: int, loss: str = "cross-entropy") -> TrainConfig:
    return TrainConfig(settings.epochs, settings.batch_size, settings.learning_rate, settings.optimizer,
                       settings.beta1, settings.beta2, settings.adam_eps, seed, loss)


def attack_spec(cfg: ExperimentConfig, value_range=(0.0, 1.0)) -> attacks.AttackSpec:
    a = cfg.attack
    return attacks.AttackSpec(a.epsilon, a.alpha, a.steps, "attack", a.target, a.target_class,
                              a.clip_perturbation, a.clamp_to_valid_range, value_range)


@dataclass
class Checkpoint:
    epoch: int
    model: Model
    test_accuracy: float
    digest: str


def train_with_checkpoints(run: Run, train_set: Dataset, test_set: Dataset, epochs: list[int],
                           prefix: str = "classifier") -> list[Checkpoint]:
    """Train one classifier to ``max(epochs)`` epochs, keeping a frozen copy
    (and a checkpoint file) at every requested epoch; epoch 0 is the
    initialization."""
    cfg = run.cfg
    wanted = sorted(set(epochs))
    model = Model.create(model_spec(cfg), cfg.seed)
    saved: list[Checkpoint] = []
    rows = run.report.table(f"{prefix}_history", ["epoch", "loss", "train_accuracy", "test_accuracy"])

    def keep(epoch: int, m: Model):
        if epoch in wanted:
            frozen = m.copy()
            ta = evaluate_accuracy(frozen, test_set)
            digest = run.save_model(frozen, f"{prefix}_e{epoch}", {"epoch": epoch, "test_accuracy": ta})
            saved.append(Checkpoint(epoch, frozen, ta, digest))

    keep(0, model)
    settings = train_config(cfg.train, cfg.seed)
    settings.epochs = max(wanted)
    _, history = train(model, train_set, settings, on_epoch_end=keep)
    by_epoch = {c.epoch: c.test_accuracy for c in saved}
    for h in history:
        rows.append([h.epoch, h.loss, h.accuracy, by_epoch.get(h.epoch)])
    return saved


def final_classifier(run: Run, train_set: Dataset, test_set: Dataset) -> Checkpoint:
    """The classifier named by ``cfg.checkpoint``, or a freshly trained one."""
    cfg = run.cfg
    if cfg.checkpoint:
        model, meta = load_checkpoint(cfg.checkpoint)
        digest = params_hash(model.params)
        run.report.provenance["checkpoints"]["input"] = digest
        return Checkpoint(int(meta.get("epoch", -1)), model, evaluate_accuracy(model, test_set), digest)
    return train_with_checkpoints(run, train_set, test_set, [cfg.train.epochs])[-1]


def _linf(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b).reshape(len(a), -1).max(axis=1) if len(a) else np.zeros(0)


def _data_stage(run: Run) -> tuple[Dataset, Dataset]:
    with run.stage("data"):
        train_set, test_set = load_data(run.cfg)
        run.report.provenance["train_data"] = dataset_hash(train_set)
        run.report.provenance["test_data"] = dataset_hash(test_set)
        run.report.stages["data"] = {"source": run.cfg.data.source, "train_size": len(train_set),
                                     "test_size": len(test_set)}
    return train_set, test_set


# stages -----------------------------------------------------------------------

def run_train(cfg: ExperimentConfig) -> MetricsReport:
    run = Run(cfg)
    train_set, test_set = _data_stage(run)
    with run.stage("train"):
        ck = train_with_checkpoints(run, train_set, test_set, [cfg.train.epochs])[-1]
        run.report.stages["train"] = {"epochs": ck.epoch, "TA": ck.test_accuracy, "checkpoint": ck.digest}
    return run.finish()


def _attack_eval(run: Run, stage: str, ck: Checkpoint, test_set: Dataset) -> dict:
    cfg = run.cfg
    spec = attack_spec(cfg, test_set.value_range)
    x_adv = attacks.pgd(ck.model, test_set.inputs, test_set.labels, spec)
    dev = _linf(x_adv, test_set.inputs)
    ra = attacks.accuracy_on(ck.model, x_adv, test_set.labels)
    violations = int((dev > spec.epsilon).sum()) if spec.clip_perturbation else 0
    if violations:
        run.violation(stage, f"{violations} samples exceed the l-inf budget {spec.epsilon}")
    zero = attacks.pgd(ck.model, test_set.inputs, test_set.labels,
                       attacks.AttackSpec(0.0, spec.alpha, spec.steps, value_range=spec.value_range))
    zero_exact = bool(np.array_equal(zero, test_set.inputs))
    if not zero_exact:
        run.violation(stage, "epsilon = 0 does not reproduce the inputs")
    return {"epoch": ck.epoch, "TA": ck.test_accuracy, "RA": ra, "epsilon": spec.epsilon,
            "alpha": spec.alpha, "steps": spec.steps, "max_linf": float(dev.max()) if len(dev) else 0.0,
            "budget_violations": violations, "zero_budget_exact": zero_exact,
            "attacked_samples": len(test_set)}


def run_attack(cfg: ExperimentConfig) -> MetricsReport:
    run = Run(cfg)
    train_set, test_set = _data_stage(run)
    with run.stage("classifier"):
        ck = final_classifier(run, train_set, test_set)
    with run.stage("attack"):
        res = _attack_eval(run, "attack", ck, test_set)
        run.report.stages["attack"] = res
        run.report.table("attack", ["epoch", "epsilon", "alpha", "steps", "TA", "RA", "max_linf",
                                    "budget_violations"]).append(
            [res[k] for k in ("epoch", "epsilon", "alpha", "steps", "TA", "RA", "max_linf",
                              "budget_violations")])
    run.finish()
    run.check_violations()
    return run.report


class _SignLog:
    """Keeps each increment ``D_n`` as int8 signs (exact when clamping is off)."""

    def __init__(self):
        self.signs: list[np.ndarray] = []

    def append(self, d: np.ndarray) -> None:
        self.signs.append(np.sign(d).astype(np.int8))


def _augment_split(run: Run, ck: Checkpoint, ds: Dataset, split: str) -> dict:
    """Opposite-FGSM trajectory of ``ds`` in fixed batches of
    ``conjugate.batch_size``; accuracies are summed over batches, which is
    exact because every sample is processed independently."""
    cfg = run.cfg
    c = cfg.conjugate
    spec = attack_spec(cfg, ds.value_range)
    spec.clamp_to_valid_range = c.ra_clamp
    eval_steps = [n for n in range(c.steps + 1) if n % c.eval_every == 0 or n == c.steps]
    ta_hits = dict.fromkeys(eval_steps, 0)
    ra_hits = dict.fromkeys(eval_steps, 0)
    telescoping, exact, step_bound = True, 0, 0.0
    for i in range(0, len(ds), c.batch_size):
        part = ds.take(np.arange(i, min(i + c.batch_size, len(ds))))

        def on_step(n: int, x: np.ndarray, part=part):
            if n in ta_hits:
                ta_hits[n] += round(attacks.accuracy_on(ck.model, x, part.labels) * len(part))
                ra_hits[n] += round(attacks.robust_accuracy(ck.model, part, spec, inputs=x) * len(part))

        signs = _SignLog()
        _, cb = attacks.opposite_fgsm_iterate(ck.model, part.inputs, part.labels, c.epsilon, c.steps,
                                              clamp=c.clamp, value_range=ds.value_range,
                                              keep_trajectory=False, on_step=on_step, increments=signs)
        if not c.clamp:
            total = np.zeros_like(cb.delta)
            for sgn in signs.signs:
                total = total + c.epsilon * sgn
            telescoping &= bool(np.array_equal(total, cb.delta))
            exact += int(((cb.x_n - cb.x0) == cb.delta).sum())
        if cb.step_linf.size:
            step_bound = max(step_bound, float(cb.step_linf.max()))
    n = max(len(ds), 1)
    points = [(k, ta_hits[k] / n, ra_hits[k] / n) for k in eval_steps]
    rows = run.report.table("augment", ["split", "step", "TA", "RA"])
    for k, ta, ra in points:
        rows.append([split, k, ta, ra])
    result = {"TA_start": points[0][1], "RA_start": points[0][2], "TA_end": points[-1][1],
              "RA_end": points[-1][2], "samples": len(ds), "max_step_linf": step_bound}
    if not c.clamp:
        result["telescoping_exact"] = telescoping
        if not telescoping:
            run.violation("augment", f"{split}: Delta_N differs from the sum of increments")
        result["x_n_minus_x0_exact_fraction"] = exact / max(ds.inputs.size, 1)
    if step_bound > c.epsilon:
        run.violation("augment", f"{split}: a step exceeds epsilon")
    run.report.add_series(f"augment_{split}_TA", "step", "TA", [(k, ta) for k, ta, _ in points])
    run.report.add_series(f"augment_{split}_RA", "step", "RA", [(k, ra) for k, _, ra in points])
    return result


def run_augment(cfg: ExperimentConfig) -> MetricsReport:
    """Accuracy and robust accuracy along the opposite-FGSM trajectory, on the
    training split (where the labels are known) and, for comparison, on the
    test split."""
    run = Run(cfg)
    train_set, test_set = _data_stage(run)
    with run.stage("classifier"):
        ck = final_classifier(run, train_set, test_set)
    with run.stage("augment"):
        run.report.stages["augment"] = {
            "epsilon": cfg.conjugate.epsilon, "steps": cfg.conjugate.steps, "epoch": ck.epoch,
            "ra_protocol": "PGD from X_n, cumulative perturbation clipped, "
                           + ("clamped to valid range" if cfg.conjugate.ra_clamp else "no range clamp"),
            "train": _augment_split(run, ck, train_set, "train"),
            "test": _augment_split(run, ck, test_set, "test"),
        }
    run.finish()
    run.check_violations()
    return run.report


def _conjugates(run: Run, ck: Checkpoint, train_set: Dataset, name: str) -> attacks.ConjugateBatch:
    c = run.cfg.conjugate
    cb = attacks.build_conjugate_dataset(ck.model, train_set, c.epsilon, c.steps, c.batch_size, c.clamp)
    cb.model_hash = ck.digest
    bound = c.steps * c.epsilon
    worst = float(_linf(cb.delta, np.zeros_like(cb.delta)).max()) if len(cb) else 0.0
    if worst > bound * (1 + 1e-12):
        run.violation("gen-conjugates", f"|Delta_N| = {worst} exceeds N*eps = {bound}")
    attacks.save_conjugates(run.out / "conjugates" / name, cb, {"epoch": ck.epoch})
    return cb


def run_gen_conjugates(cfg: ExperimentConfig) -> MetricsReport:
    run = Run(cfg)
    train_set, test_set = _data_stage(run)
    with run.stage("classifier"):
        ck = final_classifier(run, train_set, test_set)
    with run.stage("gen-conjugates"):
        cb = _conjugates(run, ck, train_set, "conj")
        run.report.stages["gen-conjugates"] = {
            "count": len(cb), "epsilon": cb.epsilon, "steps": cb.steps, "classifier": ck.digest,
            "max_abs_delta": float(np.abs(cb.delta).max()) if len(cb) else 0.0,
            "TA_x0": attacks.accuracy_on(ck.model, cb.x0, cb.labels),
            "TA_xn": attacks.accuracy_on(ck.model, cb.x_n, cb.labels)}
    run.finish()
    run.check_violations()
    return run.report


def conjugate_scale(cfg: ExperimentConfig) -> float:
    """Generator targets are ``Delta_N / scale`` so they lie in [-1, 1]."""
    c = cfg.conjugate
    return c.epsilon * max(c.steps, 1) if c.epsilon > 0 else 1.0


def _train_generator(run: Run, cb: attacks.ConjugateBatch, tag: str) -> tuple[Model, list]:
    cfg = run.cfg
    scale = conjugate_scale(cfg)
    gen = Model.create(generator_spec(cfg, cb.x0.shape[1:]), cfg.seed + 1)
    settings = train_config(cfg.generator.train, cfg.seed + 1, loss="l1")
    _, history = train(gen, PairSet(cb.x0, cb.delta / scale), settings)
    rows = run.report.table("generator_history", ["checkpoint", "epoch", "l1_loss"])
    for h in history:
        rows.append([tag, h.epoch, h.loss])
    run.report.add_series(f"generator_loss_{tag}", "epoch", "l1_loss", [(h.epoch, h.loss) for h in history])
    run.save_model(gen, f"generator_{tag}", {"scale": scale, "classifier": cb.model_hash})
    return gen, history


def run_train_generator(cfg: ExperimentConfig) -> MetricsReport:
    run = Run(cfg)
    train_set, test_set = _data_stage(run)
    with run.stage("classifier"):
        ck = final_classifier(run, train_set, test_set)
    with run.stage("gen-conjugates"):
        if cfg.conjugates:
            cb = attacks.load_conjugates(cfg.conjugates)
            run.report.provenance["conjugates"] = cfg.conjugates
        else:
            cb = _conjugates(run, ck, train_set, "conj")
    with run.stage("train-generator"):
        gen, history = _train_generator(run, cb, f"e{ck.epoch}")
        scale = conjugate_scale(cfg)
        run.report.stages["train-generator"] = {
            "final_l1": history[-1].loss if history else None, "scale": scale,
            "ACL_TA": attacks.composed_accuracy(gen, ck.model, test_set, scale)}
    return run.finish()


def run_ifa_pipeline(cfg: ExperimentConfig) -> MetricsReport:
    """Train, attack, build conjugates, fit the generator, evaluate the composed
    classifier; once per classifier checkpoint in ``ifa.checkpoint_epochs``."""
    run = Run(cfg)
    train_set, test_set = _data_stage(run)
    spec = attack_spec(cfg, test_set.value_range)
    scale = conjugate_scale(cfg)
    with run.stage("train"):
        checkpoints = [c for c in train_with_checkpoints(run, train_set, test_set, cfg.ifa.checkpoint_epochs)
                       if c.epoch in cfg.ifa.checkpoint_epochs]
    rows = run.report.table("ifa", ["epoch", "CL_TA", "CL_RA", "ACL_TA", "ACL_RA", "generator_l1",
                                    "classifier_unchanged"])
    results = []
    for ck in checkpoints:
        tag = f"e{ck.epoch}"
        with run.stage(f"attack_{tag}"):
            cl = _attack_eval(run, f"attack_{tag}", ck, test_set)
        with run.stage(f"gen-conjugates_{tag}"):
            cb = _conjugates(run, ck, train_set, f"conj_{tag}")
        with run.stage(f"train-generator_{tag}"):
            before = params_hash(ck.model.params)
            gen, history = _train_generator(run, cb, tag)
            after = params_hash(ck.model.params)
            unchanged = before == after == ck.digest
            if not unchanged:
                run.violation(f"train-generator_{tag}", "classifier weights changed during generator training")
        with run.stage(f"composed_{tag}"):
            acl_ta = attacks.composed_accuracy(gen, ck.model, test_set, scale)
            acl_ra = attacks.robust_accuracy_composed(gen, ck.model, test_set, spec, scale)
        res = {"epoch": ck.epoch, "CL_TA": cl["TA"], "CL_RA": cl["RA"], "ACL_TA": acl_ta, "ACL_RA": acl_ra,
               "generator_loss": [h.loss for h in history], "classifier_unchanged": unchanged,
               "classifier_hash": ck.digest, "max_linf": cl["max_linf"],
               "budget_violations": cl["budget_violations"],
               "conjugate_TA_train": attacks.accuracy_on(ck.model, cb.x_n, cb.labels)}
        results.append(res)
        rows.append([ck.epoch, cl["TA"], cl["RA"], acl_ta, acl_ra,
                     history[-1].loss if history else None, unchanged])
    run.report.stages["ifa"] = {"checkpoints": results, "scale": scale, "epsilon": cfg.conjugate.epsilon,
                                "steps": cfg.conjugate.steps, "attack": asdict(cfg.attack)}
    for key in ("CL_TA", "CL_RA", "ACL_TA", "ACL_RA"):
        run.report.add_series(f"ifa_{key}", "epoch", key, [(r["epoch"], r[key]) for r in results])
    run.finish()
    run.check_violations()
    return run.report


def run_uncertainty_study(cfg: ExperimentConfig) -> MetricsReport:
    """Packets of every class at every checkpoint; per-axis statistics, the
    uncertainty bound and the commutator check."""
    if cfg.data.source != "synthetic" or not 1 <= cfg.data.dimension <= 3:
        raise ConfigError("the uncertainty study needs a synthetic dataset of dimension 1 to 3")
    run = Run(cfg)
    train_set, test_set = _data_stage(run)
    p = cfg.packet
    domain = [tuple(b) for b in train_set.bounds]
    with run.stage("train"):
        checkpoints = [c for c in train_with_checkpoints(run, train_set, test_set, p.checkpoint_epochs)
                       if c.epoch in p.checkpoint_epochs]
    rows = run.report.table("uncertainty", ["epoch", "class", "axis", "mean_x", "mean_p", "sigma_x",
                                            "sigma_p", "product", "tol", "pass"])
    raw_rows = run.report.table("packet_raw", ["epoch", "class", "axis", "product", "boundary_ratio"])
    comm_rows = run.report.table("commutator", ["epoch", "class", "max_residual", "bound", "pass"])
    stats_by = {}
    with run.stage("packets"):
        for ck in checkpoints:
            for label in range(train_set.class_count):
                try:
                    pk = packets.build_packet(ck.model, label, domain, p.nodes, p.window_taper, warn=False)
                    raw = packets.build_packet(ck.model, label, domain, p.nodes, None, warn=False)
                except packets.PacketError as exc:
                    raise packets.PacketError(f"epoch {ck.epoch}, class {label}: {exc}") from exc
                packets.save_packet(run.out / "packets" / f"e{ck.epoch}_c{label}", pk)
                for s in packets.all_stats(pk):
                    stats_by[(ck.epoch, label, s.axis)] = s
                    rows.append([ck.epoch, label, s.axis, s.mean_x, s.mean_p, s.sigma_x, s.sigma_p,
                                 s.product, s.tol, s.passed])
                    if not s.passed:
                        run.violation("packets", f"epoch {ck.epoch} class {label} axis {s.axis}: "
                                                 f"product {s.product:.6f} < 0.5 - {s.tol:g}")
                for s in packets.all_stats(raw):
                    raw_rows.append([ck.epoch, label, s.axis, s.product, raw.boundary_ratio])
                comm = packets.commutator_check(pk)
                comm_rows.append([ck.epoch, label, comm.max_residual, comm.bound, comm.passed])
                if not comm.passed:
                    run.violation("packets", f"epoch {ck.epoch} class {label}: commutator residual "
                                             f"{comm.max_residual:.3g} > {comm.bound:.3g}")
    epochs = [c.epoch for c in checkpoints]
    tradeoff = []
    for a, b in zip(epochs, epochs[1:]):
        hits = [(lab, ax) for (e, lab, ax), s in stats_by.items() if e == a
                and stats_by[(b, lab, ax)].sigma_x < s.sigma_x and stats_by[(b, lab, ax)].sigma_p > s.sigma_p]
        tradeoff.append({"from_epoch": a, "to_epoch": b, "observed": bool(hits),
                         "class_axis": [list(h) for h in sorted(hits)]})
    run.report.add_series("tradeoff_sigma", "sigma_x", "sigma_p",
                          [(s.sigma_x, s.sigma_p) for _, s in sorted(stats_by.items())])
    run.report.stages["uncertainty"] = {
        "domain": [list(d) for d in domain], "nodes": p.nodes, "window_taper": p.window_taper,
        "checkpoint_TA": {str(c.epoch): c.test_accuracy for c in checkpoints},
        "all_pass": all(s.passed for s in stats_by.values()),
        "min_product": min(s.product for s in stats_by.values()),
        "tradeoff_trend": tradeoff}
    run.finish()
    run.check_violations()
    return run.report


def run_spectral_study(cfg: ExperimentConfig) -> MetricsReport:
    """Mean high-frequency ratio of one-step conjugates against test accuracy
    across classifier checkpoints."""
    s = cfg.spectral
    if len(set(s.checkpoint_epochs)) < 2:
        raise ConfigError("spectral study: need >= 2 checkpoints")
    run = Run(cfg)
    train_set, test_set = _data_stage(run)
    h, w = train_set.feature_shape[-2:]
    sc = spectral.default_config(h, w)
    sc = spectral.SpectralConfig(tuple(s.lf_rows or sc.lf_rows), tuple(s.lf_cols or sc.lf_cols), s.grayscale)
    probe = train_set.take(range(min(s.probe_size, len(train_set))))
    with run.stage("train"):
        checkpoints = [c for c in train_with_checkpoints(run, train_set, test_set, s.checkpoint_epochs)
                       if c.epoch in s.checkpoint_epochs]
    with run.stage("spectra"):
        pts = spectral.hf_ratio_vs_accuracy(
            [(c.model, c.test_accuracy, f"e{c.epoch}", c.epoch) for c in checkpoints], probe, s.epsilon, sc)
        rows = run.report.table("spectra", spectral.RATIO_COLUMNS)
        for p_ in pts:
            rows.append(p_.row())
        spectral.write_ratio_csv(run.out / "ratio_report.csv", pts)
        defined = [p_ for p_ in pts if p_.mean_ratio is not None]
        rho = spectral.spearman([p_.test_accuracy for p_ in defined], [p_.mean_ratio for p_ in defined])
        run.report.add_series("hf_ratio_vs_TA", "TA", "mean_hf_ratio",
                              [(p_.test_accuracy, p_.mean_ratio) for p_ in pts])
        run.report.stages["spectra"] = {
            "lf_rows": list(sc.lf_rows), "lf_cols": list(sc.lf_cols), "epsilon": s.epsilon,
            "probe_size": len(probe), "probe_split": "train",
            "spearman": rho, "spearman_defined": rho is not None}
    return run.finish()


STAGES = {
    "train": run_train,
    "attack": run_attack,
    "augment": run_augment,
    "gen-conjugates": run_gen_conjugates,
    "train-generator": run_train_generator,
    "ifa": run_ifa_pipeline,
    "uncertainty": run_uncertainty_study,
    "spectra": run_spectral_study,
}


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    return STAGES[cfg.kind](cfg)
