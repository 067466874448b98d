"""Command-line entry point.

Every command reads a JSON run configuration (``--config``), applies dotted
``--set key.path=value`` overrides, validates the result and writes all of its
outputs plus a ``manifest.json`` into ``paths.output_dir``.  Outputs are staged
in a scratch directory and only moved into place once the command succeeds.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import checkpoint as ckpt
from .data import SYNTH_KINDS, CooDataset, DataError, ZTransform, load, save, split, synth
from .evaluation import AblationDesign, SearchError, SearchSpace, ablation_suite, random_search
from .kernels import KERNELS
from .metrics import Metrics
from .model import SPACES, VARIANTS, KftModel
from .train import DivergenceError, TrainConfig, em_train, write_trace_csv

COMMANDS = ("train", "vi-train", "predict", "evaluate", "calibrate", "search", "ablate", "synth")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
CHECKPOINT_NAME = "model.kftc"


class ConfigError(ValueError):
    pass


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsBlock(_Block):
    data: str | None = None
    side: dict[int, str] = Field(default_factory=dict)
    checkpoint: str | None = None
    output_dir: str = "run"


class DataBlock(_Block):
    scale_targets: bool = True
    scale_features: bool = True
    max_categories: int = Field(50, ge=1)


class ModelBlock(_Block):
    variant: Literal[VARIANTS] = "wlr"
    space: Literal[SPACES] = "dual-exact"
    rank: int = Field(5, ge=1)
    ranks: list[int] | None = None
    groups: list[list[int]] | None = None
    kernel: Literal[KERNELS] = "rbf"
    lengthscale: float = Field(1.0, gt=0)
    rff_features: int = Field(256, ge=2)
    reg: float = Field(0.0, ge=0)
    reg_aux: float = Field(0.0, ge=0)

    @field_validator("rff_features")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("rff_features must be even")
        return v


class TrainBlock(_Block):
    epochs: int = Field(20, ge=1)
    iterations_per_epoch: int | None = Field(None, ge=1)
    batch_fraction: float = Field(1.0, gt=0, le=1)
    lr: float = Field(1e-2, ge=0)


class ViBlock(_Block):
    family: Literal["univariate", "multivariate"] = "univariate"
    mean: float = 0.0
    var: float = Field(1.0, gt=0)
    aux_mean: float = 0.0
    aux_var: float = Field(1.0, gt=0)
    noise_var: float = Field(1.0, gt=0)
    kernel_jitter: float = Field(1e-6, gt=0)
    rff_diag: float = Field(1e-2, gt=0)
    init_var: float = Field(1e-3, gt=0)
    cov_rank: int = Field(2, ge=1)
    n_samples: int = Field(100, ge=100)


class SearchBlock(_Block):
    n_iters: int = Field(8, ge=1)
    bayesian: bool = False
    space: dict[str, list] = Field(default_factory=dict)


class SynthBlock(_Block):
    extents: list[int] = Field(default_factory=lambda: [10, 10, 10])
    rank: int = Field(2, ge=1)
    kind: Literal[SYNTH_KINDS] = "informative"
    noise: float = Field(0.05, ge=0)
    side_dim: int = Field(3, ge=1)
    observed_fraction: float = Field(0.5, gt=0, le=1)
    index_effect: float = Field(0.0, ge=0)
    clusters: int | None = Field(None, ge=1)
    popularity: float = Field(0.0, ge=0)


class RunConfig(_Block):
    command: Literal[COMMANDS] = "train"
    seed: int = Field(0, ge=0)
    paths: PathsBlock = Field(default_factory=PathsBlock)
    data: DataBlock = Field(default_factory=DataBlock)
    model: ModelBlock = Field(default_factory=ModelBlock)
    train: TrainBlock = Field(default_factory=TrainBlock)
    vi: ViBlock = Field(default_factory=ViBlock)
    search: SearchBlock = Field(default_factory=SearchBlock)
    synth: SynthBlock = Field(default_factory=SynthBlock)
    ablate: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _compatible(self):
        if self.vi.family == "multivariate" and self.model.space == "primal" and self.command == "vi-train":
            raise ValueError("vi.family 'multivariate' needs model.space dual-exact or dual-rff")
        return self


def config_schema() -> dict:
    return RunConfig.model_json_schema()


# ---------------------------------------------------------------- config IO
def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Set leaves by dotted path, e.g. ``train.lr=0.05`` or ``paths.side.0=side.csv``."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a block")
        node[parts[-1]] = _parse_value(value)
    return raw


def resolve_config(path: str | None, overrides: list[str], command: str | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    raw = apply_overrides(raw, overrides)
    if command is not None:
        raw["command"] = command
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as err:
        lines = [f"{'.'.join(str(x) for x in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors()]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines)) from None


# ---------------------------------------------------------------- helpers
def _need(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"paths.{what} is required for this command")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"paths.{what}: {path} does not exist")
    return p


def _load_data(cfg: RunConfig, scale_targets: bool | None = None):
    _need(cfg.paths.data, "data")
    for p, path in cfg.paths.side.items():
        _need(path, f"side.{p}")
    scale = cfg.data.scale_targets if scale_targets is None else scale_targets
    return load(cfg.paths.data, cfg.paths.side, scale, cfg.data.scale_features, cfg.data.max_categories)


def _build_model(cfg: RunConfig, ds: CooDataset, side) -> KftModel:
    m = cfg.model
    try:
        return KftModel(
            ds.extents,
            variant=m.variant,
            space=m.space,
            rank=m.ranks if m.ranks is not None else m.rank,
            groups=m.groups,
            side=side,
            kernel=m.kernel,
            lengthscale=m.lengthscale,
            rff_features=m.rff_features,
            reg=m.reg,
            reg_aux=m.reg_aux,
            seed=cfg.seed,
        )
    except ValueError as err:
        raise ConfigError(f"model: {err}") from err


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, iterations_per_epoch=t.iterations_per_epoch, batch_fraction=t.batch_fraction, lr=t.lr, seed=cfg.seed)


def _prior(cfg: RunConfig):
    from .variational import PriorHyper

    v = cfg.vi
    return PriorHyper(v.mean, v.var, v.aux_mean, v.aux_var, v.noise_var, v.kernel_jitter, v.rff_diag)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _transform_json(ds: CooDataset):
    return None if ds.target_transform is None else ds.target_transform.to_json()


def _split_metrics(predict, ds: CooDataset, seed: int) -> dict:
    """Metrics on the original target scale for each split part."""
    parts = split(ds, seed)
    out = {}
    for name in ("train", "val", "test"):
        sub = ds.subset(getattr(parts, name))
        pred = ds.to_original(predict(sub.indices))
        out[name] = Metrics.of(pred, sub.values).to_json()
    return out


def _load_checkpoint(cfg: RunConfig):
    path = _need(cfg.paths.checkpoint, "checkpoint")
    kind = ckpt.checkpoint_kind(path)
    if kind == "frequentist":
        model, extra = ckpt.load_model(path)
        return kind, model, None, extra
    if kind == "variational":
        state, extra = ckpt.load_variational(path)
        return kind, state.model, state, extra
    raise ckpt.CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")


def _data_for_checkpoint(cfg: RunConfig, model: KftModel, extra: dict) -> CooDataset:
    ds, _ = _load_data(cfg, scale_targets=False)
    if tuple(ds.extents) != tuple(model.extents):
        if len(ds.extents) != len(model.extents) or any(a > b for a, b in zip(ds.extents, model.extents)):
            raise DataError(f"data extents {ds.extents} do not fit checkpoint extents {model.extents}")
        ds = CooDataset(model.extents, ds.indices, ds.values)
    tf = extra.get("target_transform")
    return CooDataset(ds.extents, ds.indices, ds.values, ZTransform.from_json(tf) if tf else None)


def _predict_fn(model: KftModel):
    def f(idx):
        with torch.no_grad():
            return model.predict(idx).numpy()

    return f


# ---------------------------------------------------------------- commands
def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    s = cfg.synth
    data = synth(
        s.extents,
        rank=s.rank,
        kind=s.kind,
        noise=s.noise,
        seed=cfg.seed,
        side_dim=s.side_dim,
        observed_fraction=s.observed_fraction,
        index_effect=s.index_effect,
        clusters=s.clusters,
        popularity=s.popularity,
    )
    side_paths = {p: out / f"side_{p}.csv" for p in data.side}
    save(data.dataset, out / "data.csv", data.side, side_paths)
    return {"data": "data.csv", "side": {str(p): f"side_{p}.csv" for p in data.side}, "n": data.dataset.n}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    ds, side = _load_data(cfg)
    parts = split(ds, cfg.seed)
    model = _build_model(cfg, ds, side)
    result = em_train(model, ds.subset(parts.train), _train_config(cfg))
    write_trace_csv(result.trace, out / "trace.csv")
    ckpt.save_model(model, out / CHECKPOINT_NAME, {"target_transform": _transform_json(ds), "seed": cfg.seed})
    metrics = _split_metrics(_predict_fn(model), ds, cfg.seed)
    _write_json(out / "metrics.json", metrics)
    return {"checkpoint": CHECKPOINT_NAME, "metrics": metrics}


def cmd_vi_train(cfg: RunConfig, out: Path) -> dict:
    from .variational import VariationalKft, vi_train

    ds, side = _load_data(cfg)
    parts = split(ds, cfg.seed)
    model = _build_model(cfg, ds, side)
    try:
        state = VariationalKft(model, cfg.vi.family, prior=_prior(cfg), init_var=cfg.vi.init_var, cov_rank=cfg.vi.cov_rank, seed=cfg.seed)
    except ValueError as err:
        raise ConfigError(f"vi: {err}") from err
    result = vi_train(state, ds.subset(parts.train), _train_config(cfg))
    write_trace_csv(result.trace, out / "trace.csv")
    ckpt.save_variational(state, out / CHECKPOINT_NAME, {"target_transform": _transform_json(ds), "seed": cfg.seed})
    metrics = _split_metrics(_predict_fn(model), ds, cfg.seed)
    _write_json(out / "metrics.json", metrics)
    return {"checkpoint": CHECKPOINT_NAME, "metrics": metrics}


QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def cmd_predict(cfg: RunConfig, out: Path) -> dict:
    from .variational import posterior_predictive

    kind, model, state, extra = _load_checkpoint(cfg)
    ds = _data_for_checkpoint(cfg, model, extra)
    pred = ds.to_original(_predict_fn(model)(ds.indices))
    header = [f"i{p + 1}" for p in range(ds.n_modes)] + ["prediction"]
    cols = [pred]
    if state is not None:
        draws = ds.to_original(posterior_predictive(state, ds.indices, cfg.vi.n_samples, cfg.seed))
        cols.extend(np.quantile(draws, QUANTILES, axis=0))
        header += [f"q{q:g}" for q in QUANTILES]
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r, row in enumerate(ds.indices):
            w.writerow([int(i) for i in row] + [repr(float(c[r])) for c in cols])
    return {"predictions": "predictions.csv", "n": ds.n, "kind": kind}


def cmd_evaluate(cfg: RunConfig, out: Path) -> dict:
    _, model, _, extra = _load_checkpoint(cfg)
    ds = _data_for_checkpoint(cfg, model, extra)
    metrics = _split_metrics(_predict_fn(model), ds, int(extra.get("seed", cfg.seed)))
    _write_json(out / "metrics.json", metrics)
    return {"metrics": metrics}


def cmd_calibrate(cfg: RunConfig, out: Path) -> dict:
    from .variational import calibration, calibration_heatmap, mean_prediction, posterior_predictive, write_heatmap_csv

    kind, model, state, extra = _load_checkpoint(cfg)
    if state is None:
        raise ckpt.CheckpointError("calibrate needs a variational checkpoint (from vi-train)")
    ds = _data_for_checkpoint(cfg, model, extra)
    test = ds.subset(split(ds, int(extra.get("seed", cfg.seed))).test)
    draws = posterior_predictive(state, test.indices, cfg.vi.n_samples, cfg.seed)
    report = calibration(draws, test.targets, mean_pred=mean_prediction(state, test.indices))
    _write_json(out / "calibration.json", report.to_json())
    if ds.n_modes >= 2:
        write_heatmap_csv(calibration_heatmap(test.indices, draws, test.targets), out / "heatmap.csv")
    return {"calibration": report.to_json()}


def cmd_search(cfg: RunConfig, out: Path) -> dict:
    ds, side = _load_data(cfg)
    try:
        space = SearchSpace.from_json(cfg.search.space)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"search.space: {err}") from err
    result = random_search(
        space,
        ds,
        cfg.search.n_iters,
        cfg.seed,
        side=side,
        variant=cfg.model.variant,
        model_space=cfg.model.space,
        epochs=cfg.train.epochs,
        iterations_per_epoch=cfg.train.iterations_per_epoch,
        bayesian=cfg.search.bayesian,
        log_path=out / "search.jsonl",
    )
    best = {"index": result.best.index, "params": result.best.params, "metrics": result.best.metrics, "score": result.best.score}
    _write_json(out / "best.json", best)
    return {"best": best}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    try:
        design = AblationDesign(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.ablate.items()})
    except TypeError as err:
        raise ConfigError(f"ablate: {err}") from err
    result = ablation_suite(cfg.seed, design)
    result.write_csv(out / "ablation.csv")
    summary = {k: {"mean": m, "sd": s} for k, (m, s) in result.summary().items()}
    _write_json(out / "ablation.json", {"seeds": list(result.seeds), "r2": result.r2, "summary": summary})
    return {"summary": summary}


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "vi-train": cmd_vi_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
    "search": cmd_search,
    "ablate": cmd_ablate,
}


def _versions() -> dict:
    from importlib import metadata

    def version(pkg):
        try:
            return metadata.version(pkg)
        except metadata.PackageNotFoundError:
            return None

    return {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__, "pydantic": version("pydantic")}


def run(cfg: RunConfig) -> dict:
    """Execute ``cfg.command``; outputs appear in the run directory only on success."""
    torch.set_num_threads(1)
    target = Path(cfg.paths.output_dir)
    target.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".kft-stage-", dir=target.parent))
    try:
        summary = HANDLERS[cfg.command](cfg, stage)
        manifest = {
            "command": cfg.command,
            "config": cfg.model_dump(mode="json"),
            "seeds": {"global": cfg.seed},
            "threads": 1,
            "versions": _versions(),
            "outputs": sorted(p.name for p in stage.iterdir()),
        }
        _write_json(stage / "manifest.json", manifest)
        target.mkdir(parents=True, exist_ok=True)
        for item in sorted(stage.iterdir()):
            os.replace(item, target / item.name)
        return summary
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kft", description="Kernel tensor-train regression with side information.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} workflow")
        p.add_argument("-c", "--config", help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config leaf by dotted path")
        p.add_argument("-o", "--output-dir", help="shorthand for --set paths.output_dir=DIR")
    sub.add_parser("schema", help="print the JSON schema of the run configuration")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2, sort_keys=True))
        return EXIT_OK
    try:
        overrides = list(args.overrides)
        if args.output_dir:
            overrides.append(f"paths.output_dir={json.dumps(args.output_dir)}")
        cfg = resolve_config(args.config, overrides, args.command)
        summary = run(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError, SearchError) as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ckpt.CheckpointError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
