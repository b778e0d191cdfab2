"""Experiment orchestration: configs, staged runs with resume, scores, figures.

A run directory is laid out as

    config.ini            the exact configuration of the run
    manifest.json         stage hashes, wall-clock times, scores, version
    data/                 train/test arrays (.npy)
    checkpoints/          flow.npz (+flow.json), classifier.npz, refiner.npz
    samples/              per-method samples (.csv and .npy), weighted latent,
                          HMC diagnostics
    scores/               scores.csv and an aligned-text table
    figures/              density heat maps (feature and latent space)

Each stage is keyed by a hash of the config sections it depends on, so
re-running with an unchanged config skips completed stages (exact .npy
copies are reloaded; the CSVs are the exchange format). One RNG stream per
stage is derived from the master seed with a fixed spawn index, so changing,
say, refiner settings never perturbs flow training.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetSpec, sample_dataset, sample_test_set, save_points_csv
from .errors import ConfigError
from .flow import FlowModel, FlowTrainConfig, train_flow
from .metrics import (
    Histogram2D,
    ScoreReport,
    b0_diagnostic,
    emd,
    histogram,
    jsd,
    score_uncertainty,
)
from .nncore import assign_params, load_params, save_params
from .refiner import RefinerGan, RefinerTrainConfig, refine_and_generate, train_refiner
from .reweight import (
    Classifier,
    ClassifierTrainConfig,
    WeightedLatentBatch,
    compute_weights,
    pull_back,
    train_classifier,
)
from .sampler import LatentTarget, hmc_run

__all__ = [
    "RunConfig",
    "RunManifest",
    "paper_config",
    "desk_config",
    "load_config",
    "save_config",
    "run_experiment",
    "render_density",
    "compare_report",
    "stage_rng",
]


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class DatasetSection:
    kind: str = "gaussians"
    n_train: int = 480_000
    n_test: int = 2_000_000


@dataclass
class FlowSection:
    blocks: int = 12
    units: int = 48
    epochs: int = 100
    batch_size: int = 2000
    alpha0: float = 1e-3
    gamma: float = 0.999
    weight_decay: float = 1e-5


@dataclass
class ClassifierSection:
    epochs: int = 50
    batch_size: int = 2000
    alpha0: float = 1e-3
    gamma: float = 0.999


@dataclass
class RefinerSection:
    epochs: int = 200
    batch_size: int = 2000
    alpha0: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    gamma: float = 0.999
    disc_updates_per_gen: int = 4
    aux_dim: int = 4


@dataclass
class HmcSection:
    chains: int = 100
    eps: float = 0.004
    steps: int = 50
    burn_in: int = 3000


@dataclass
class ScoringSection:
    n_samples: int = 2_000_000
    bins: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/run"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    flow: FlowSection = field(default_factory=FlowSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    refiner: RefinerSection = field(default_factory=RefinerSection)
    hmc: HmcSection = field(default_factory=HmcSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)


_SECTIONS = ("dataset", "flow", "classifier", "refiner", "hmc", "scoring")


def paper_config(kind: str = "gaussians", seed: int = 0, out_dir: str | None = None) -> RunConfig:
    """Full-size defaults; the rings dataset gets the larger flow."""
    config = RunConfig(seed=seed, out_dir=out_dir or f"runs/paper-{kind}")
    config.dataset.kind = kind
    if kind == "rings":
        config.flow.blocks = 20
        config.flow.units = 60
    return config


def desk_config(kind: str = "gaussians", seed: int = 0, out_dir: str | None = None) -> RunConfig:
    """Reduced preset that finishes on a laptop CPU in minutes."""
    config = paper_config(kind, seed, out_dir or f"runs/desk-{kind}")
    config.dataset.n_train = 48_000
    config.dataset.n_test = 20_000
    config.flow.epochs = 30
    config.classifier.epochs = 20
    config.refiner.epochs = 60
    config.hmc.burn_in = 300
    config.scoring.n_samples = 20_000
    config.scoring.bins = 32
    return config


def save_config(config: RunConfig, path=None) -> str:
    """Serialize to the line-oriented [section] / key = value format."""
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(config.seed), "out_dir": config.out_dir}
    for name in _SECTIONS:
        section = getattr(config, name)
        parser[name] = {
            f.name: repr(getattr(section, f.name)) if isinstance(getattr(section, f.name), float)
            else str(getattr(section, f.name))
            for f in dataclasses.fields(section)
        }
    buf = io.StringIO()
    parser.write(buf)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _coerce(section_obj, parser_section):
    for f in dataclasses.fields(section_obj):
        if f.name not in parser_section:
            continue
        raw = parser_section[f.name]
        if f.type in (int, "int"):
            setattr(section_obj, f.name, int(raw))
        elif f.type in (float, "float"):
            setattr(section_obj, f.name, float(raw))
        else:
            setattr(section_obj, f.name, raw)


def load_config(source) -> RunConfig:
    """Parse a config file path or INI text back into a RunConfig."""
    parser = configparser.ConfigParser()
    source = str(source)
    text = Path(source).read_text() if "\n" not in source and Path(source).exists() else source
    parser.read_string(text)
    config = RunConfig()
    if parser.has_section("run"):
        config.seed = parser.getint("run", "seed", fallback=config.seed)
        config.out_dir = parser.get("run", "out_dir", fallback=config.out_dir)
    for name in _SECTIONS:
        if parser.has_section(name):
            _coerce(getattr(config, name), parser[name])
    return config


# Stage RNG streams: spawn indices off the master seed. Streams 0-2 are the
# data module's train/test-a/test-b draws, keyed by the same seed.
_STAGE_STREAMS = {
    "flow": 3,
    "classifier": 4,
    "pullback": 5,
    "refiner": 6,
    "hmc": 7,
    "baseline_sampling": 8,
    "laser_sampling": 9,
}


def stage_rng(master_seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(_STAGE_STREAMS[stage],))
    )


# ---------------------------------------------------------------------------
# Manifest and staged execution


@dataclass
class RunManifest:
    config_hash: str = ""
    version: str = __version__
    stages: dict = field(default_factory=dict)  # name -> {hash, seconds, skipped}
    scores: dict = field(default_factory=dict)
    topology: dict = field(default_factory=dict)  # b0 per panel
    weight_stats: dict = field(default_factory=dict)
    failed_stage: str = ""

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        manifest = cls()
        for key, value in json.loads(text).items():
            if hasattr(manifest, key):
                setattr(manifest, key, value)
        return manifest


def _hash_sections(config: RunConfig, names: tuple) -> str:
    parts = [f"seed={config.seed}"]
    for name in names:
        section = getattr(config, name)
        for f in dataclasses.fields(section):
            parts.append(f"{name}.{f.name}={getattr(section, f.name)!r}")
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


# Config sections each stage's output depends on (upstream stages included
# transitively, so a change invalidates everything downstream of it).
_STAGE_DEPS = {
    "data": ("dataset",),
    "flow": ("dataset", "flow"),
    "baseline_sampling": ("dataset", "flow", "scoring"),
    "classifier": ("dataset", "flow", "classifier"),
    "pullback": ("dataset", "flow", "classifier"),
    "refiner": ("dataset", "flow", "classifier", "refiner"),
    "hmc": ("dataset", "flow", "classifier", "hmc", "scoring"),
    "laser_sampling": ("dataset", "flow", "classifier", "refiner", "scoring"),
    "scoring": _SECTIONS,
    "render": _SECTIONS,
}


class _Run:
    """Working state of one experiment; owns the directory and the manifest."""

    def __init__(self, config: RunConfig, log):
        self.config = config
        self.log = log
        self.root = Path(config.out_dir)
        for sub in ("data", "checkpoints", "samples", "scores", "figures"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        manifest_path = self.root / "manifest.json"
        if manifest_path.exists():
            self.manifest = RunManifest.from_json(manifest_path.read_text())
        else:
            self.manifest = RunManifest()
        self.manifest.config_hash = _hash_sections(config, _SECTIONS)
        self.manifest.version = __version__
        self.manifest.failed_stage = ""
        save_config(config, self.root / "config.ini")

    def save_manifest(self):
        (self.root / "manifest.json").write_text(self.manifest.to_json())

    def path(self, rel: str) -> Path:
        return self.root / rel

    def run_stage(self, name: str, artifacts: list[str], compute, load):
        """Run `compute` unless artifacts exist under a matching stage hash."""
        stage_hash = _hash_sections(self.config, _STAGE_DEPS[name])
        paths = [self.root / rel for rel in artifacts]
        record = self.manifest.stages.get(name)
        if record and record.get("hash") == stage_hash and all(p.exists() for p in paths):
            self.log(f"[{name}] up to date, skipping")
            self.record(name, stage_hash, 0.0, skipped=True)
            return load()
        start = time.perf_counter()
        try:
            result = compute()
        except Exception:
            self.manifest.failed_stage = name
            self.save_manifest()
            raise
        self.record(name, stage_hash, time.perf_counter() - start, skipped=False)
        self.log(f"[{name}] done in {self.manifest.stages[name]['seconds']}s")
        return result

    def record(self, name: str, stage_hash: str, seconds: float, skipped: bool):
        self.manifest.stages[name] = {
            "hash": stage_hash,
            "seconds": round(seconds, 3),
            "skipped": skipped,
        }
        self.save_manifest()


def _flow_from_config(config: RunConfig, rng=None) -> FlowModel:
    rng = rng if rng is not None else np.random.default_rng(0)
    return FlowModel(config.flow.blocks, config.flow.units, rng)


def run_experiment(config: RunConfig, log=print, until: str | None = None) -> RunManifest:
    """Execute dataset -> flow -> classifier -> {DCTR, HMC, refiner} -> scores.

    ``until`` stops after the named stage (one of data, flow,
    baseline_sampling, classifier, pullback, hmc, refiner, laser_sampling,
    scoring, render); completed stages with unchanged config are skipped.
    """
    if until is not None and until not in _STAGE_DEPS:
        raise ConfigError(f"unknown stage {until!r}; choose from {sorted(_STAGE_DEPS)}")
    run = _Run(config, log)
    cfg = config

    def reached(stage: str) -> bool:
        return until == stage
    spec = DatasetSpec(
        kind=cfg.dataset.kind,
        n_train=cfg.dataset.n_train,
        n_test=cfg.dataset.n_test,
        seed=cfg.seed,
    )
    n_score = cfg.scoring.n_samples

    # -- data ---------------------------------------------------------------
    def data_compute():
        train = sample_dataset(spec)
        test_a = sample_test_set(spec, stream=1)
        test_b = sample_test_set(spec, stream=2)
        np.save(run.path("data/train.npy"), train)
        np.save(run.path("data/test_a.npy"), test_a)
        np.save(run.path("data/test_b.npy"), test_b)
        save_points_csv(run.path("data/train.csv"), train)
        return train, test_a, test_b

    def data_load():
        return (
            np.load(run.path("data/train.npy")),
            np.load(run.path("data/test_a.npy")),
            np.load(run.path("data/test_b.npy")),
        )

    train_pts, test_a, test_b = run.run_stage(
        "data", ["data/train.npy", "data/test_a.npy", "data/test_b.npy"],
        data_compute, data_load,
    )
    if reached("data"):
        return run.manifest

    # -- flow ---------------------------------------------------------------
    def flow_compute():
        rng = stage_rng(cfg.seed, "flow")
        model = _flow_from_config(cfg, rng)
        train_config = FlowTrainConfig(
            epochs=cfg.flow.epochs,
            batch_size=cfg.flow.batch_size,
            alpha0=cfg.flow.alpha0,
            gamma=cfg.flow.gamma,
            weight_decay=cfg.flow.weight_decay,
        )
        history = train_flow(model, train_pts, train_config, rng)
        save_params(
            run.path("checkpoints/flow.npz"), model.parameters(),
            meta={"blocks": cfg.flow.blocks, "units": cfg.flow.units},
        )
        run.path("checkpoints/flow.json").write_text(json.dumps({
            "blocks": cfg.flow.blocks,
            "units": cfg.flow.units,
            "epochs": cfg.flow.epochs,
            "seed": cfg.seed,
            "final_train_nll": history.train_nll[-1] if history.train_nll else None,
            "final_val_nll": history.val_nll[-1] if history.val_nll else None,
            "train_nll": history.train_nll,
            "val_nll": history.val_nll,
        }, indent=2))
        return model

    def flow_load():
        model = _flow_from_config(cfg)
        arrays, _ = load_params(run.path("checkpoints/flow.npz"))
        assign_params(model.parameters(), arrays)
        return model

    flow_model = run.run_stage(
        "flow", ["checkpoints/flow.npz", "checkpoints/flow.json"],
        flow_compute, flow_load,
    )
    if reached("flow"):
        return run.manifest

    # -- baseline samples -----------------------------------------------------
    def baseline_compute():
        rng = stage_rng(cfg.seed, "baseline_sampling")
        pts = flow_model.sample(n_score, rng)
        np.save(run.path("samples/baseline.npy"), pts)
        save_points_csv(run.path("samples/baseline.csv"), pts)
        return pts

    baseline_pts = run.run_stage(
        "baseline_sampling", ["samples/baseline.npy", "samples/baseline.csv"],
        baseline_compute, lambda: np.load(run.path("samples/baseline.npy")),
    )
    if reached("baseline_sampling"):
        return run.manifest

    # -- classifier -----------------------------------------------------------
    def classifier_compute():
        rng = stage_rng(cfg.seed, "classifier")
        gen_for_classifier = flow_model.sample(len(train_pts), rng)
        train_config = ClassifierTrainConfig(
            epochs=cfg.classifier.epochs,
            batch_size=cfg.classifier.batch_size,
            alpha0=cfg.classifier.alpha0,
            gamma=cfg.classifier.gamma,
        )
        model, history = train_classifier(gen_for_classifier, train_pts, train_config, rng)
        save_params(run.path("checkpoints/classifier.npz"), model.net.parameters(),
                    meta={"val_bce": history.val_bce})
        return model

    def classifier_load():
        model = Classifier(np.random.default_rng(0))
        arrays, _ = load_params(run.path("checkpoints/classifier.npz"))
        assign_params(model.net.parameters(), arrays)
        return model

    classifier = run.run_stage(
        "classifier", ["checkpoints/classifier.npz"], classifier_compute, classifier_load,
    )
    if reached("classifier"):
        return run.manifest

    # -- latent pull-back -------------------------------------------------------
    def pullback_compute():
        rng = stage_rng(cfg.seed, "pullback")
        z = rng.standard_normal((len(train_pts), 2))
        weighted = pull_back(classifier, flow_model, z)
        np.save(run.path("samples/weighted_latent.npy"),
                np.column_stack([weighted.z, weighted.x, weighted.w]))
        weighted.save_csv(run.path("samples/weighted_latent.csv"))
        return weighted

    def pullback_load():
        table = np.load(run.path("samples/weighted_latent.npy"))
        return WeightedLatentBatch(z=table[:, 0:2], x=table[:, 2:4], w=table[:, 4])

    weighted_latent = run.run_stage(
        "pullback", ["samples/weighted_latent.npy", "samples/weighted_latent.csv"],
        pullback_compute, pullback_load,
    )
    if reached("pullback"):
        return run.manifest

    # -- HMC ---------------------------------------------------------------------
    def hmc_compute():
        target = LatentTarget.from_flow_classifier(flow_model, classifier)
        n_keep = -(-n_score // cfg.hmc.chains)  # ceil division
        hmc_seed = int(
            np.random.SeedSequence(cfg.seed, spawn_key=(_STAGE_STREAMS["hmc"],))
            .generate_state(1)[0]
        )
        z, diagnostics = hmc_run(
            target,
            n_chains=cfg.hmc.chains,
            burn_in=cfg.hmc.burn_in,
            n_keep=n_keep,
            eps=cfg.hmc.eps,
            n_steps=cfg.hmc.steps,
            seed=hmc_seed,
        )
        z = z[:n_score]
        features, _ = flow_model.g_forward(z)
        np.save(run.path("samples/hmc_latent.npy"), z)
        np.save(run.path("samples/hmc.npy"), features)
        save_points_csv(run.path("samples/hmc_latent.csv"), z, header="z0,z1")
        save_points_csv(run.path("samples/hmc.csv"), features)
        run.path("samples/hmc_diagnostics.json").write_text(diagnostics.to_json())
        return z, features

    def hmc_load():
        return (
            np.load(run.path("samples/hmc_latent.npy")),
            np.load(run.path("samples/hmc.npy")),
        )

    hmc_latent, hmc_pts = run.run_stage(
        "hmc",
        ["samples/hmc_latent.npy", "samples/hmc.npy", "samples/hmc_diagnostics.json"],
        hmc_compute, hmc_load,
    )
    if reached("hmc"):
        return run.manifest

    # -- refiner GAN ----------------------------------------------------------------
    def refiner_compute():
        rng = stage_rng(cfg.seed, "refiner")
        train_config = RefinerTrainConfig(
            epochs=cfg.refiner.epochs,
            batch_size=cfg.refiner.batch_size,
            alpha0=cfg.refiner.alpha0,
            beta1=cfg.refiner.beta1,
            beta2=cfg.refiner.beta2,
            gamma=cfg.refiner.gamma,
            disc_updates_per_gen=cfg.refiner.disc_updates_per_gen,
        )
        gan = RefinerGan(rng, aux_dim=cfg.refiner.aux_dim)
        gan, history = train_refiner(weighted_latent, train_config, rng, gan=gan)
        save_params(
            run.path("checkpoints/refiner.npz"),
            gan.generator.parameters() + gan.discriminator.parameters(),
            meta={"aux_dim": cfg.refiner.aux_dim, "latent_jsd": history.latent_jsd},
        )
        return gan

    def refiner_load():
        gan = RefinerGan(np.random.default_rng(0), aux_dim=cfg.refiner.aux_dim)
        arrays, _ = load_params(run.path("checkpoints/refiner.npz"))
        assign_params(gan.generator.parameters() + gan.discriminator.parameters(), arrays)
        return gan

    refiner_gan = run.run_stage(
        "refiner", ["checkpoints/refiner.npz"], refiner_compute, refiner_load,
    )
    if reached("refiner"):
        return run.manifest

    # -- refined samples ---------------------------------------------------------
    def laser_compute():
        rng = stage_rng(cfg.seed, "laser_sampling")
        z = refiner_gan.generate(n_score, rng)
        features, _ = flow_model.g_forward(z)
        np.save(run.path("samples/laser_latent.npy"), z)
        np.save(run.path("samples/laser.npy"), features)
        save_points_csv(run.path("samples/laser_latent.csv"), z, header="z0,z1")
        save_points_csv(run.path("samples/laser.csv"), features)
        return z, features

    def laser_load():
        return (
            np.load(run.path("samples/laser_latent.npy")),
            np.load(run.path("samples/laser.npy")),
        )

    laser_latent, laser_pts = run.run_stage(
        "laser_sampling",
        ["samples/laser_latent.npy", "samples/laser.npy", "samples/laser.csv"],
        laser_compute, laser_load,
    )
    if reached("laser_sampling"):
        return run.manifest

    # -- scores --------------------------------------------------------------------
    def scoring_compute():
        bins = (cfg.scoring.bins, cfg.scoring.bins)
        bounds = spec.bounds
        dctr_w, w_stats = compute_weights(classifier, baseline_pts)
        run.manifest.weight_stats = dataclasses.asdict(w_stats)

        h_truth = histogram(test_a[:n_score], bounds=bounds, bins=bins)
        h_truth_b = histogram(test_b[:n_score], bounds=bounds, bins=bins)
        panels = {
            "baseline": histogram(baseline_pts, bounds=bounds, bins=bins),
            "hmc": histogram(hmc_pts, bounds=bounds, bins=bins),
            "laser": histogram(laser_pts, bounds=bounds, bins=bins),
            "dctr": histogram(baseline_pts, weights=dctr_w, bounds=bounds, bins=bins),
        }
        report = ScoreReport(dataset=cfg.dataset.kind)
        report.emd_err, report.jsd_err = score_uncertainty(h_truth, h_truth_b)
        for method, h in panels.items():
            report.add(method, emd(h_truth, h), jsd(h_truth, h))

        latent_box = (-4.0, 4.0, -4.0, 4.0)
        h_latent_weighted = histogram(
            weighted_latent.z, weights=weighted_latent.w, bounds=latent_box, bins=bins
        )
        topology = {
            "truth": b0_diagnostic(h_truth),
            "baseline": b0_diagnostic(panels["baseline"]),
            "hmc": b0_diagnostic(panels["hmc"]),
            "laser": b0_diagnostic(panels["laser"]),
            "dctr": b0_diagnostic(panels["dctr"]),
            "latent_weighted": b0_diagnostic(h_latent_weighted),
            "expected_truth": spec.betti[0],
        }
        run.manifest.scores = {
            "methods": {m: dataclasses.asdict(s) for m, s in report.scores.items()},
            "emd_err": report.emd_err,
            "jsd_err": report.jsd_err,
        }
        run.manifest.topology = topology
        run.path("scores/scores.csv").write_text(report.to_csv())
        run.path("scores/scores.txt").write_text(report.to_table())
        run.save_manifest()
        return report

    def scoring_load():
        return ScoreReport.from_csv(
            run.path("scores/scores.csv").read_text(), dataset=cfg.dataset.kind
        )

    run.run_stage(
        "scoring", ["scores/scores.csv", "scores/scores.txt"],
        scoring_compute, scoring_load,
    )
    if reached("scoring"):
        return run.manifest

    # -- figures ---------------------------------------------------------------------
    def render_compute():
        bins = (cfg.scoring.bins, cfg.scoring.bins)
        bounds = spec.bounds
        latent_box = (-4.0, 4.0, -4.0, 4.0)
        dctr_w, _ = compute_weights(classifier, baseline_pts)
        h_truth = histogram(test_a[:n_score], bounds=bounds, bins=bins)
        vmax = float(h_truth.mass.max())
        feature_panels = {
            "truth": h_truth,
            "baseline": histogram(baseline_pts, bounds=bounds, bins=bins),
            "hmc": histogram(hmc_pts, bounds=bounds, bins=bins),
            "laser": histogram(laser_pts, bounds=bounds, bins=bins),
            "dctr": histogram(baseline_pts, weights=dctr_w, bounds=bounds, bins=bins),
        }
        for name, h in feature_panels.items():
            render_density(h, path=run.path(f"figures/feature_{name}.png"), vmax=vmax)
        prior = stage_rng(cfg.seed, "baseline_sampling").standard_normal((n_score, 2))
        latent_panels = {
            "prior": histogram(prior, bounds=latent_box, bins=bins),
            "weighted": histogram(
                weighted_latent.z, weights=weighted_latent.w, bounds=latent_box, bins=bins
            ),
            "hmc": histogram(hmc_latent, bounds=latent_box, bins=bins),
            "laser": histogram(laser_latent, bounds=latent_box, bins=bins),
        }
        lat_vmax = float(latent_panels["prior"].mass.max())
        for name, h in latent_panels.items():
            render_density(h, path=run.path(f"figures/latent_{name}.png"), vmax=lat_vmax)
        return None

    run.run_stage(
        "render",
        [f"figures/feature_{n}.png" for n in ("truth", "baseline", "hmc", "laser", "dctr")]
        + [f"figures/latent_{n}.png" for n in ("prior", "weighted", "hmc", "laser")],
        render_compute, lambda: None,
    )

    return run.manifest


# ---------------------------------------------------------------------------
# Density rendering

# Anchor colors of the familiar dark-blue-to-yellow perceptual ramp.
_RAMP_ANCHORS = np.array([
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.267, 0.749, 0.441],
    [0.478, 0.821, 0.318],
    [0.741, 0.873, 0.150],
    [0.993, 0.906, 0.144],
])


def _lut() -> np.ndarray:
    t = np.linspace(0.0, 1.0, 256)
    anchors_t = np.linspace(0.0, 1.0, len(_RAMP_ANCHORS))
    channels = [np.interp(t, anchors_t, _RAMP_ANCHORS[:, c]) for c in range(3)]
    return (np.stack(channels, axis=1) * 255).astype(np.uint8)


_LUT = _lut()


def render_density(
    source,
    weights: np.ndarray | None = None,
    path=None,
    bounds: tuple = (-4.0, 4.0, -4.0, 4.0),
    bins: tuple = (64, 64),
    vmax: float | None = None,
    pixel_scale: int = 6,
):
    """Write a deterministic PNG heat map of a histogram or point cloud.

    ``source`` may be a Histogram2D (bounds/bins arguments ignored) or an
    (n, 2) point array, optionally weighted. A fixed ``vmax`` pins the color
    scale across panels of the same dataset.
    """
    from PIL import Image

    if isinstance(source, Histogram2D):
        h = source
    else:
        h = histogram(source, weights=weights, bounds=bounds, bins=bins)
    if path is None:
        raise ConfigError("render_density needs an output path")
    scale = float(h.mass.max()) if vmax is None else float(vmax)
    if scale <= 0.0:
        raise ConfigError("cannot render an empty histogram")
    norm = np.clip(h.mass / scale, 0.0, 1.0)
    idx = (norm * 255).astype(np.uint8)
    # mass[i, j] indexes (x0, x1); image rows run top to bottom in x1
    img = _LUT[idx.T[::-1]]
    img = np.repeat(np.repeat(img, pixel_scale, axis=0), pixel_scale, axis=1)
    Image.fromarray(img, "RGB").save(str(path), format="PNG")
    return path


# ---------------------------------------------------------------------------
# Aggregated comparison


def compare_report(reports: list[ScoreReport], column_groups: list[list[int]] | None = None) -> str:
    """Merge score reports into one aligned table, one column pair per dataset.

    The best unweighted method per column is marked with '*'; exact ties are
    marked on every winner and called out under the table. ``column_groups``
    may merge reports by index; a group mixing dataset kinds is an error.
    """
    if not reports:
        raise ConfigError("need at least one report")
    if column_groups is None:
        column_groups = [[i] for i in range(len(reports))]
    columns = []
    notes = []
    for group in column_groups:
        kinds = {reports[i].dataset for i in group}
        if len(kinds) != 1:
            raise ConfigError(f"cannot merge datasets {sorted(kinds)} into one column")
        members = [reports[i] for i in group]
        if len(members) > 1 and all(
            members[0].scores == m.scores for m in members[1:]
        ):
            notes.append(f"{members[0].dataset}: identical reports merged (tie)")
        columns.append(members[0])

    methods = []
    for report in columns:
        for m in report.scores:
            if m not in methods:
                methods.append(m)

    from .metrics import UNWEIGHTED_METHODS

    width = 16
    header = f"{'Method':<10}"
    for report in columns:
        header += f" {report.dataset + ' EMD':>{width}} {report.dataset + ' JSD':>{width}}"
    lines = [header, "-" * len(header)]
    best = []
    for report in columns:
        contenders = [m for m in report.scores if m in UNWEIGHTED_METHODS]
        best_emd = min((report.scores[m].emd for m in contenders), default=np.inf)
        best_jsd = min((report.scores[m].jsd for m in contenders), default=np.inf)
        emd_winners = [m for m in contenders if report.scores[m].emd == best_emd]
        jsd_winners = [m for m in contenders if report.scores[m].jsd == best_jsd]
        if len(emd_winners) > 1:
            notes.append(f"{report.dataset}: EMD tie between {', '.join(emd_winners)}")
        if len(jsd_winners) > 1:
            notes.append(f"{report.dataset}: JSD tie between {', '.join(jsd_winners)}")
        best.append((emd_winners, jsd_winners))

    for method in methods:
        row = f"{method:<10}"
        for report, (emd_winners, jsd_winners) in zip(columns, best):
            if method in report.scores:
                s = report.scores[method]
                emd_cell = f"{s.emd:.3f}({report.emd_err:.3f})"
                jsd_cell = f"{s.jsd:.3f}({report.jsd_err:.3f})"
                if method in emd_winners:
                    emd_cell = "*" + emd_cell
                if method in jsd_winners:
                    jsd_cell = "*" + jsd_cell
            else:
                emd_cell = jsd_cell = "-"
            row += f" {emd_cell:>{width}} {jsd_cell:>{width}}"
        lines.append(row)
    for note in notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"
