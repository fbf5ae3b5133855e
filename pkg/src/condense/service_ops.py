"""Operations shared by the command line tool and the HTTP service.

Every operation takes a pydantic request model and returns a pydantic
response model, so both front ends speak the same schema and the HTTP
layer is a thin wrapper. Paths in requests are resolved on the machine
running the operation, not the client.
"""

from __future__ import annotations

import dataclasses
import time
from pathlib import Path

from pydantic import BaseModel, Field

from .arch import ModelConfig, build_model
from .checkpoint import MAGIC, load_checkpoint, restore_model, save_model
from .configfile import load_config, parse_config_text
from .connectivity import export_connectivity, write_connectivity
from .convert import (ConvertedLgcNet, convert_model, default_tolerance,
                      verify_equivalence)
from .data import load_dataset, synthesize_digits
from .errors import ConfigError
from .metrics import count_flops, count_params
from .training import (TrainSettings, evaluate, traditional_prune_baseline,
                       train)


# -- shared helpers --------------------------------------------------------


def resolve_config(name_or_path: str,
                   overrides: list[str]) -> tuple[ModelConfig, TrainSettings]:
    """Preset name or config file, plus key=value override pairs."""
    cfg, settings = load_config(name_or_path)
    if overrides:
        model_kw, train_kw = parse_config_text("\n".join(overrides),
                                               origin="--set")
        if model_kw:
            cfg = cfg.with_overrides(**model_kw)
        if train_kw:
            settings = dataclasses.replace(settings, **train_kw)
            settings.validate()
    return cfg, settings


def _load_model(path: str):
    return restore_model(load_checkpoint(path))


def _is_checkpoint(path: Path) -> bool:
    try:
        with open(path, "rb") as f:
            return f.read(len(MAGIC)) == MAGIC
    except OSError:
        return False


# -- train / prune-baseline ------------------------------------------------


class TrainRequest(BaseModel):
    config: str = "cifar-lgc-small"
    overrides: list[str] = Field(default_factory=list)
    dataset: str = "mnist"
    data_dir: str | None = None
    subset_size: int | None = None
    test_subset_size: int | None = None
    out_dir: str
    resume: str | None = None
    stop_after: int | None = None


class EpochRow(BaseModel):
    epoch: int
    lr: float
    train_loss: float
    test_error: float
    surviving_fraction: float
    seconds: float


class TrainResponse(BaseModel):
    epochs_run: int
    final_train_loss: float
    final_test_error: float
    surviving_fraction: float
    checkpoint: str | None
    log_file: str | None
    seconds: float
    log: list[EpochRow]
    prune_event: dict | None = None


def _train_common(req: TrainRequest, runner) -> TrainResponse:
    # on_epoch never crosses the wire; the HTTP service leaves it unset.
    cfg, settings = resolve_config(req.config, req.overrides)
    train_set, test_set = load_dataset(req.dataset, path=req.data_dir,
                                       subset_size=req.subset_size,
                                       test_subset_size=req.test_subset_size)
    t0 = time.perf_counter()
    result = runner(cfg, settings, train_set, test_set)
    seconds = time.perf_counter() - t0
    rows = [EpochRow(**dataclasses.asdict(s)) for s in result.log]
    last = result.log[-1]
    return TrainResponse(
        epochs_run=len(result.log),
        final_train_loss=last.train_loss,
        final_test_error=last.test_error,
        surviving_fraction=last.surviving_fraction,
        checkpoint=str(result.checkpoint_path) if result.checkpoint_path else None,
        log_file=str(result.log_path) if result.log_path else None,
        seconds=seconds,
        log=rows,
        prune_event=result.prune_event,
    )


def run_train(req: TrainRequest, on_epoch=None) -> TrainResponse:
    def runner(cfg, settings, train_set, test_set):
        return train(cfg, settings, train_set, test_set, out_dir=req.out_dir,
                     resume_from=req.resume, stop_after=req.stop_after,
                     on_epoch=on_epoch)
    return _train_common(req, runner)


def run_prune_baseline(req: TrainRequest, on_epoch=None) -> TrainResponse:
    if req.resume or req.stop_after:
        raise ConfigError("the pruning baseline runs start to finish; "
                          "resume and stop_after do not apply")
    def runner(cfg, settings, train_set, test_set):
        return traditional_prune_baseline(cfg, settings, train_set, test_set,
                                          out_dir=req.out_dir,
                                          on_epoch=on_epoch)
    return _train_common(req, runner)


# -- convert ---------------------------------------------------------------


class ConvertRequest(BaseModel):
    checkpoint: str
    out: str


class ConvertResponse(BaseModel):
    out: str
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int


def run_convert(req: ConvertRequest) -> ConvertResponse:
    model = _load_model(req.checkpoint)
    model.eval()
    converted = convert_model(model)
    out = save_model(req.out, converted, form="test")
    res = model.config.input_resolution
    return ConvertResponse(
        out=str(out),
        params_before=count_params(model).total_params,
        params_after=count_params(converted).total_params,
        flops_before=count_flops(model, res).total_flops,
        flops_after=count_flops(converted, res).total_flops,
    )


# -- verify ----------------------------------------------------------------


class VerifyRequest(BaseModel):
    checkpoint_a: str
    checkpoint_b: str
    n_inputs: int = 100
    seed: int = 0
    batch_size: int = 50
    input_resolution: int | None = None
    tolerance: float | None = None


class VerifyResponse(BaseModel):
    n_inputs: int
    max_abs_diff: float
    argmax_agreement: float
    tolerance: float
    passed: bool


def run_verify(req: VerifyRequest) -> VerifyResponse:
    model_a = _load_model(req.checkpoint_a)
    model_b = _load_model(req.checkpoint_b)
    tol = req.tolerance
    if tol is None:
        tol = default_tolerance(model_a.dtype)
    report = verify_equivalence(model_a, model_b, n_inputs=req.n_inputs,
                                seed=req.seed, batch_size=req.batch_size,
                                input_resolution=req.input_resolution)
    return VerifyResponse(
        n_inputs=report.n_inputs,
        max_abs_diff=report.max_abs_diff,
        argmax_agreement=report.argmax_agreement,
        tolerance=tol,
        passed=report.passed(tol) and report.argmax_agreement == 1.0,
    )


# -- count -----------------------------------------------------------------


class CountRequest(BaseModel):
    target: str = "cifar-lgc-small"
    form: str = "converted"  # config targets only; checkpoints know their form
    overrides: list[str] = Field(default_factory=list)
    input_resolution: int | None = None


class LayerCostRow(BaseModel):
    name: str
    params: int
    flops: int


class CountResponse(BaseModel):
    form: str
    input_resolution: int
    entries: list[LayerCostRow]
    total_params: int
    total_flops: int
    table: str


def structural_model(cfg: ModelConfig, form: str):
    """Zero-weight model with the right shapes, for cost accounting.

    "converted" builds the deploy form at final condensation, including
    classifier column pruning; "train" is the dense training form before
    any stage has run.
    """
    if form == "converted":
        fc_keep = None
        if cfg.fc_condense_factor > 1:
            fc_keep = cfg.total_channels // cfg.fc_condense_factor
        return ConvertedLgcNet(cfg, fc_keep=fc_keep)
    if form == "train":
        return build_model(cfg, init="zeros")
    raise ConfigError(f"form must be 'train' or 'converted', got {form!r}")


def run_count(req: CountRequest) -> CountResponse:
    path = Path(req.target)
    if path.is_file() and _is_checkpoint(path):
        model = _load_model(req.target)
        form = "converted" if isinstance(model, ConvertedLgcNet) else "train"
    else:
        cfg, _ = resolve_config(req.target, req.overrides)
        form = req.form
        model = structural_model(cfg, form)
    res = req.input_resolution or model.config.input_resolution
    report = count_flops(model, res)
    return CountResponse(
        form=form,
        input_resolution=res,
        entries=[LayerCostRow(name=e.name, params=e.params, flops=e.flops)
                 for e in report.entries],
        total_params=report.total_params,
        total_flops=report.total_flops,
        table=report.as_text(),
    )


# -- export-connectivity ---------------------------------------------------


class ExportConnectivityRequest(BaseModel):
    checkpoint: str
    out: str


class ExportConnectivityResponse(BaseModel):
    out: str
    n_layers: int
    n_producers: int


def run_export_connectivity(req: ExportConnectivityRequest
                            ) -> ExportConnectivityResponse:
    model = _load_model(req.checkpoint)
    if isinstance(model, ConvertedLgcNet):
        raise ConfigError("connectivity export needs a training-form "
                          "checkpoint; converted models have no masks")
    report = export_connectivity(model)
    out = write_connectivity(report, req.out)
    return ExportConnectivityResponse(
        out=str(out),
        n_layers=report.n_layers,
        n_producers=len(report.producer_channels),
    )


# -- synth-data ------------------------------------------------------------


class SynthDataRequest(BaseModel):
    out_dir: str
    train_count: int = 6000
    test_count: int = 1500
    seed: int = 0


class SynthDataResponse(BaseModel):
    out_dir: str
    train_count: int
    test_count: int


def run_synth_data(req: SynthDataRequest) -> SynthDataResponse:
    out = synthesize_digits(req.out_dir, train_count=req.train_count,
                            test_count=req.test_count, seed=req.seed)
    return SynthDataResponse(out_dir=str(out), train_count=req.train_count,
                             test_count=req.test_count)


# -- eval (shared by CLI for checkpoint inspection) ------------------------


class EvalRequest(BaseModel):
    checkpoint: str
    dataset: str = "mnist"
    data_dir: str | None = None
    subset_size: int | None = None
    test_subset_size: int | None = None
    split: str = "test"


class EvalResponse(BaseModel):
    loss: float
    error: float
    n: int


def run_eval(req: EvalRequest) -> EvalResponse:
    model = _load_model(req.checkpoint)
    train_set, test_set = load_dataset(req.dataset, path=req.data_dir,
                                       subset_size=req.subset_size,
                                       test_subset_size=req.test_subset_size)
    if req.split == "train":
        data = train_set
    elif req.split == "test":
        data = test_set
    else:
        raise ConfigError(f"split must be 'train' or 'test', got {req.split!r}")
    loss, error = evaluate(model, data)
    return EvalResponse(loss=loss, error=error, n=len(data))
