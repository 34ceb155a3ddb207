"""Experiment specs, config files and the run/sweep/detect/analyze drivers.

Config files are INI with one section per key prefix, so ``attack.kind``
is key ``kind`` in section ``[attack]``. Unknown sections or keys are
rejected. ``data.source`` is the only required key.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

import fedpoison
from fedpoison import kernels
from fedpoison.attacks import AttackKind, AttackStrategy
from fedpoison.checkpoint import atomic_write_text, load_model, save_model
from fedpoison.dataset import (build_client_registry, leave_one_out_split, load_interactions,
                               synthetic_interactions)
from fedpoison.defenses import AggregationRule, DefenseKind
from fedpoison.detection import balance_dataset, featurize, train_detector
from fedpoison.errors import ConfigError
from fedpoison.evaluation import (detector_accuracy_csv, hardness_csv, hardness_profile, pca_csv,
                                  pca_project)
from fedpoison.fedcore import Simulation, SimulationConfig
from fedpoison.gradlog import GradientLogWriter, labelled_dataset
from fedpoison.model import ParamLayout, PredictorKind, UserModelKind

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"
    path: str | None = None
    format: str = "movielens"
    num_users: int = 1000
    num_items: int = 500
    num_clusters: int = 10
    noise: float = 0.3
    zipf: float = 0.3
    min_len: int = 8
    max_len: int = 40
    min_user_interactions: int = 3
    min_item_interactions: int = 1

    def __post_init__(self):
        if self.source not in ("synthetic", "file"):
            raise ConfigError("data.source must be 'synthetic' or 'file'")
        if self.source == "file" and not self.path:
            raise ConfigError("data.path is required when data.source = file")
        if self.format not in ("movielens", "tsv"):
            raise ConfigError("data.format must be 'movielens' or 'tsv'")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError("need 1 <= data.min_len <= data.max_len")
        if not 0 <= self.noise <= 1:
            raise ConfigError("data.noise must be in [0, 1]")


@dataclass(frozen=True)
class DetectorSpec:
    collect_epochs: int | None = 5
    epochs: int = 300
    lr: float = 0.01
    threshold: float = 0.5

    def __post_init__(self):
        if self.collect_epochs is not None and self.collect_epochs < 1:
            raise ConfigError("detector.collect_epochs must be >= 1")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("detector.epochs must be >= 0 and detector.lr positive")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("detector.threshold must be in [0, 1]")


@dataclass(frozen=True)
class SweepAxes:
    attacks: tuple = ()
    defenses: tuple = ()
    byz_ratios: tuple = ()
    pool_fractions: tuple = ()
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "attacks", tuple(AttackKind(a) for a in self.attacks))
        object.__setattr__(self, "defenses", tuple(DefenseKind(d) for d in self.defenses))
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("sweep.seeds must be distinct")
        for r in self.byz_ratios:
            if not 0 <= r < 1:
                raise ConfigError("sweep.byz_ratios must lie in [0, 1)")
        for p in self.pool_fractions:
            if not 0 < p <= 1:
                raise ConfigError("sweep.pool_fractions must lie in (0, 1]")


@dataclass(frozen=True)
class ExperimentSpec:
    config: SimulationConfig = field(default_factory=SimulationConfig)
    data: DataSpec = field(default_factory=DataSpec)
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    sweep: SweepAxes = field(default_factory=SweepAxes)
    report: str = "best"

    def __post_init__(self):
        if self.report not in ("final", "best"):
            raise ConfigError("eval.report must be 'final' or 'best'")

    def with_seed(self, seed):
        return replace(self, config=self.config.with_(seed=int(seed)))


# -- config keys ----------------------------------------------------------------------

def _int(s):
    return int(s)


def _opt(parse):
    def inner(s):
        return None if s.strip().lower() in ("", "none") else parse(s)
    return inner


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(parse):
    def inner(s):
        return tuple(parse(p.strip()) for p in s.split(",") if p.strip())
    return inner


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if hasattr(v, "value"):
        return v.value
    if isinstance(v, float):
        return repr(v)
    return str(v)


# (section, key) -> (target, attribute, parser); targets name an ExperimentSpec part
KEYS = {
    ("run", "epochs"): ("config", "max_epochs", _int),
    ("run", "batch"): ("config", "clients_per_round", _int),
    ("run", "rounds_per_epoch"): ("config", "rounds_per_epoch", _opt(_int)),
    ("run", "lr"): ("config", "lr", float),
    ("run", "d"): ("config", "d", _int),
    ("run", "k_positives"): ("config", "k_positives", _int),
    ("run", "user_model"): ("config", "user_model", UserModelKind),
    ("run", "predictor"): ("config", "predictor", PredictorKind),
    ("run", "byzantine_ratio"): ("config", "byzantine_ratio", float),
    ("run", "seed"): ("config", "seed", _int),
    ("run", "threads"): ("config", "threads", _int),
    ("attack", "kind"): ("attack", "kind", AttackKind),
    ("attack", "pool_fraction"): ("attack", "pool_fraction", float),
    ("attack", "lambda"): ("attack", "lam", float),
    ("attack", "z_override"): ("attack", "z_override", _opt(float)),
    ("attack", "gamma_init"): ("attack", "gamma_init", float),
    ("attack", "gamma_step"): ("attack", "gamma_step", float),
    ("defense", "kind"): ("defense", "kind", DefenseKind),
    ("defense", "tau"): ("defense", "tau", float),
    ("defense", "beta"): ("defense", "beta", _opt(_int)),
    ("defense", "f"): ("defense", "f", _opt(_int)),
    ("defense", "m_select"): ("defense", "m_select", _opt(_int)),
    ("eval", "k"): ("config", "k_eval", _int),
    ("eval", "exclude_seen"): ("config", "exclude_seen", _bool),
    ("eval", "report"): ("spec", "report", str),
    ("detector", "enabled"): ("config", "detector_enabled", _bool),
    ("detector", "features"): ("config", "detector_features", str),
    ("detector", "collect_epochs"): ("detector", "collect_epochs", _opt(_int)),
    ("detector", "epochs"): ("detector", "epochs", _int),
    ("detector", "lr"): ("detector", "lr", float),
    ("detector", "threshold"): ("detector", "threshold", float),
    ("data", "source"): ("data", "source", str),
    ("data", "path"): ("data", "path", _opt(str)),
    ("data", "format"): ("data", "format", str),
    ("data", "num_users"): ("data", "num_users", _int),
    ("data", "num_items"): ("data", "num_items", _int),
    ("data", "num_clusters"): ("data", "num_clusters", _int),
    ("data", "noise"): ("data", "noise", float),
    ("data", "zipf"): ("data", "zipf", float),
    ("data", "min_len"): ("data", "min_len", _int),
    ("data", "max_len"): ("data", "max_len", _int),
    ("data", "min_user_interactions"): ("data", "min_user_interactions", _int),
    ("data", "min_item_interactions"): ("data", "min_item_interactions", _int),
    ("sweep", "attacks"): ("sweep", "attacks", _list(AttackKind)),
    ("sweep", "defenses"): ("sweep", "defenses", _list(DefenseKind)),
    ("sweep", "byz_ratios"): ("sweep", "byz_ratios", _list(float)),
    ("sweep", "pool_fractions"): ("sweep", "pool_fractions", _list(float)),
    ("sweep", "seeds"): ("sweep", "seeds", _list(_int)),
}
REQUIRED = (("data", "source"),)


def parse_config_text(text, source="<config>"):
    """Parse INI text into a validated ``ExperimentSpec``."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for key in REQUIRED:
        if not cp.has_option(*key):
            raise ConfigError(f"{source}: missing required key {key[0]}.{key[1]}")
    parts = {"config": {}, "attack": {}, "defense": {}, "data": {}, "detector": {},
             "sweep": {}, "spec": {}}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if (section, key) not in KEYS:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            target, attr, parse = KEYS[(section, key)]
            try:
                parts[target][attr] = parse(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {raw!r} ({exc})") \
                    from exc
    try:
        cfg = SimulationConfig(attack=AttackStrategy(**parts["attack"]),
                               defense=AggregationRule(**parts["defense"]), **parts["config"])
        return ExperimentSpec(cfg, DataSpec(**parts["data"]), DetectorSpec(**parts["detector"]),
                              SweepAxes(**parts["sweep"]), **parts["spec"])
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def parse_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def format_config(spec):
    """Serialise every key; ``parse_config_text(format_config(s)) == s``."""
    objs = {"config": spec.config, "attack": spec.config.attack, "defense": spec.config.defense,
            "data": spec.data, "detector": spec.detector, "sweep": spec.sweep, "spec": spec}
    sections = {}
    for (section, key), (target, attr, _) in KEYS.items():
        sections.setdefault(section, []).append(f"{key} = {_fmt(getattr(objs[target], attr))}")
    return "".join(f"[{s}]\n" + "\n".join(lines) + "\n\n" for s, lines in sections.items())


def config_hash(spec):
    return hashlib.sha256(format_config(spec).encode("utf-8")).hexdigest()[:16]


def build_id():
    """Content digest of the installed package sources."""
    root = Path(fedpoison.__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.glob("*.py")) + sorted(root.glob("*.pyx")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{fedpoison.__version__}+{h.hexdigest()[:12]}"


# -- runs -----------------------------------------------------------------------------

def load_registry(spec):
    d = spec.data
    seed = spec.config.seed
    if d.source == "synthetic":
        ilog = synthetic_interactions(d.num_users, d.num_items, d.num_clusters, d.min_len,
                                      d.max_len, d.noise, d.zipf, seed=seed)
    else:
        ilog = load_interactions(d.path, d.format, d.min_user_interactions,
                                 d.min_item_interactions)
    return build_client_registry(leave_one_out_split(ilog), spec.config.byzantine_ratio,
                                 spec.config.k_positives, seed, ilog.item_count)


def reported(timeline, report):
    return timeline.final if report == "final" else timeline.best


def metrics_csv(spec, timeline):
    c = spec.config
    lines = ["epoch,hr5,ndcg5,defense,attack,byz_ratio,seed"]
    for m in timeline.epochs:
        lines.append(f"{m.epoch},{m.hr!r},{m.ndcg!r},{c.defense.kind.value},"
                     f"{c.attack.kind.value},{c.byzantine_ratio!r},{c.seed}")
    return "\n".join(lines) + "\n"


def write_manifest(out_dir, spec, seed, started, extra=None):
    manifest = {"config_hash": config_hash(spec), "seed": seed, "build_id": build_id(),
                "backend": kernels.BACKEND, "wall_time": round(time.time() - started, 3)}
    manifest.update(extra or {})
    atomic_write_text(Path(out_dir) / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return manifest


@dataclass
class RunResult:
    spec: ExperimentSpec
    timeline: object
    simulation: Simulation

    @property
    def metrics(self):
        return reported(self.timeline, self.spec.report)


def run_single(spec, detector=None, gradient_log=None, registry=None):
    """Train one configuration; returns the simulation and its timeline."""
    registry = registry if registry is not None else load_registry(spec)
    kw = {}
    if gradient_log is not None:
        kw = dict(feature_sink=gradient_log.feature_sink, gradient_sink=gradient_log.gradient_sink)
    sim = Simulation(spec.config, registry, detector=detector, **kw)
    return RunResult(spec, sim.run(), sim)


def train(spec, out_dir, gradient_log_path=None):
    started = time.time()
    out_dir = Path(out_dir)
    writer = None
    if gradient_log_path is not None:
        registry = load_registry(spec)
        layout = ParamLayout(registry.num_users, registry.num_items, spec.config.d,
                             spec.config.predictor)
        writer = GradientLogWriter(layout)
        res = run_single(spec, gradient_log=writer, registry=registry)
        writer.write(gradient_log_path)
    else:
        res = run_single(spec)
    atomic_write_text(out_dir / "metrics.csv", metrics_csv(spec, res.timeline))
    save_model(out_dir / "model.bin", res.simulation.params)
    m = res.metrics
    write_manifest(out_dir, spec, spec.config.seed, started,
                   {"report": spec.report, "reported_epoch": m.epoch, "hr5": m.hr,
                    "ndcg5": m.ndcg, "outputs": ["metrics.csv", "model.bin"]})
    return res


# -- sweep ----------------------------------------------------------------------------

def sweep_cells(spec):
    s, c = spec.sweep, spec.config
    attacks = s.attacks or (c.attack.kind,)
    defenses = s.defenses or (c.defense.kind,)
    ratios = s.byz_ratios or (c.byzantine_ratio,)
    pools = s.pool_fractions or (c.attack.pool_fraction,)
    cells = []
    for a in attacks:
        for d in defenses:
            for r in ratios:
                for p in pools:
                    cfg = c.with_(attack=replace(c.attack, kind=a, pool_fraction=p),
                                  defense=replace(c.defense, kind=d), byzantine_ratio=r)
                    cells.append(replace(spec, config=cfg))
    return cells


def _cell_name(spec):
    c = spec.config
    return (f"{c.attack.kind.value}-{c.defense.kind.value}-{c.byzantine_ratio:g}"
            f"-pool{c.attack.pool_fraction:g}-seed{c.seed}")


def _run_cell(spec, out_dir):
    res = run_single(spec)
    atomic_write_text(Path(out_dir) / _cell_name(spec) / "metrics.csv",
                      metrics_csv(spec, res.timeline))
    m = res.metrics
    return m.hr, m.ndcg


def _stats(values):
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def sweep(spec, out_dir, jobs=1):
    """Run every grid cell for every seed; returns ``(table_text, failures)``."""
    started = time.time()
    out_dir = Path(out_dir)
    cells = sweep_cells(spec)
    seeds = spec.sweep.seeds
    jobs_list = [(ci, cell.with_seed(s)) for ci, cell in enumerate(cells) for s in seeds]
    results, failures = {}, []
    runs_dir = out_dir / "runs"
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [(ci, js, pool.submit(_run_cell, js, runs_dir)) for ci, js in jobs_list]
            for ci, js, fut in futs:
                try:
                    results[(ci, js.config.seed)] = fut.result()
                except Exception as exc:  # a failing cell must not stop the sweep
                    failures.append({"cell": _cell_name(js), "error": repr(exc)})
    else:
        for ci, js in jobs_list:
            try:
                results[(ci, js.config.seed)] = _run_cell(js, runs_dir)
            except Exception as exc:
                log.error("cell %s failed: %s", _cell_name(js), exc)
                failures.append({"cell": _cell_name(js), "error": repr(exc)})
    with_pool = len(spec.sweep.pool_fractions) > 1
    header = "attack,defense,byz_ratio,hr5_mean,hr5_std,ndcg5_mean,ndcg5_std"
    lines = [header + (",pool_fraction" if with_pool else "")]
    runs = []
    for ci, cell in enumerate(cells):
        got = [results[(ci, s)] for s in seeds if (ci, s) in results]
        for s in seeds:
            if (ci, s) in results:
                runs.append({"cell": _cell_name(cell.with_seed(s)),
                             "config_hash": config_hash(cell.with_seed(s)), "seed": s})
        if not got:
            continue
        hr_m, hr_s = _stats([g[0] for g in got])
        nd_m, nd_s = _stats([g[1] for g in got])
        c = cell.config
        row = (f"{c.attack.kind.value},{c.defense.kind.value},{c.byzantine_ratio!r},"
               f"{hr_m!r},{hr_s!r},{nd_m!r},{nd_s!r}")
        lines.append(row + (f",{c.attack.pool_fraction!r}" if with_pool else ""))
    table = "\n".join(lines) + "\n"
    atomic_write_text(out_dir / "sweep.csv", table)
    write_manifest(out_dir, spec, list(seeds), started,
                   {"report": spec.report, "runs": runs, "failures": failures})
    return table, failures


# -- detection protocol ---------------------------------------------------------------

@dataclass
class DetectionOutcome:
    attack: AttackKind
    accuracy: float
    detector: object
    phase2: RunResult | None


def run_detection_protocol(spec, out_dir=None, phase2=True):
    """Collect labelled features, train the detector, then rerun with filtering."""
    cfg = spec.config
    if cfg.attack.kind is AttackKind.NONE or cfg.byzantine_ratio == 0:
        raise ConfigError("detection protocol needs an attack and a nonzero byzantine_ratio; "
                          "phase 1 would only collect normal updates")
    registry = load_registry(spec)
    layout = ParamLayout(registry.num_users, registry.num_items, cfg.d, cfg.predictor)
    writer = GradientLogWriter(layout, keep_updates=False, epochs=spec.detector.collect_epochs)
    epochs = spec.detector.collect_epochs or cfg.max_epochs
    phase1 = replace(spec, config=cfg.with_(max_epochs=epochs, detector_enabled=False))
    run_single(phase1, gradient_log=writer, registry=registry)
    name = cfg.attack.kind.value
    if out_dir is not None:
        log_path = Path(out_dir) / f"gradients-{name}.bin"
        writer.write(log_path)
        raw = labelled_dataset(log_path)
    else:
        raw = writer.dataset()
    if raw.n_malicious == 0 or raw.n_malicious == len(raw.labels):
        raise ConfigError("phase 1 collected a single class of updates; cannot train detector")
    data = balance_dataset(raw.features, raw.labels, cfg.seed)
    det = train_detector(data, spec.detector.epochs, spec.detector.lr, cfg.seed,
                         threshold=spec.detector.threshold)
    result = None
    if phase2:
        result = run_single(replace(spec, config=cfg.with_(detector_enabled=True)),
                            detector=det, registry=registry)
    if out_dir is not None:
        det.save(Path(out_dir) / f"detector-{name}.bin")
        if result is not None:
            atomic_write_text(Path(out_dir) / f"metrics-{name}.csv",
                              metrics_csv(result.spec, result.timeline))
    return DetectionOutcome(cfg.attack.kind, det.holdout_accuracy, det, result)


def detect(spec, out_dir, attacks=None, phase2=True):
    started = time.time()
    kinds = attacks or (spec.sweep.attacks or (spec.config.attack.kind,))
    outcomes = []
    for kind in kinds:
        s = replace(spec, config=spec.config.with_(attack=replace(spec.config.attack, kind=kind)))
        outcomes.append(run_detection_protocol(s, out_dir, phase2))
    acc = {o.attack.value: o.accuracy for o in outcomes}
    atomic_write_text(Path(out_dir) / "detector_accuracy.csv", detector_accuracy_csv(acc))
    extra = {"accuracy": {k: round(v, 3) for k, v in acc.items()}}
    for o in outcomes:
        if o.phase2 is not None:
            m = o.phase2.metrics
            extra.setdefault("filtered", {})[o.attack.value] = {"hr5": m.hr, "ndcg5": m.ndcg}
    write_manifest(out_dir, spec, spec.config.seed, started, extra)
    return outcomes


# -- analysis -------------------------------------------------------------------------

def analyze(spec, out_dir, model_path=None):
    """Hardness profile and PCA of client features at a trained snapshot."""
    started = time.time()
    registry = load_registry(spec)
    if model_path is None:
        sim = run_single(spec, registry=registry).simulation
    else:
        sim = Simulation(spec.config, registry)
        params = load_model(model_path)
        if params.layout != sim.params.layout:
            raise ConfigError("model checkpoint does not match the configured dataset/model")
        sim.params = params
    epoch = spec.config.max_epochs
    samples = sim.sample_records(epoch=epoch)
    profile = hardness_profile(sim.params, registry, samples, spec.config.user_model)
    ids, D = sim.client_updates(epoch=epoch)
    avg = D.mean(axis=0)
    feats = np.stack([featurize(row, avg, sim.params.layout) for row in D])
    proj = pca_project(feats, seed=spec.config.seed)
    roles = [registry.clients[c].role for c in ids]
    out_dir = Path(out_dir)
    atomic_write_text(out_dir / "hardness.csv", hardness_csv(profile))
    atomic_write_text(out_dir / "pca.csv", pca_csv(ids, roles, proj))
    write_manifest(out_dir, spec, spec.config.seed, started,
                   {"explained_variance": proj.explained_variance.tolist()})
    return profile, proj
