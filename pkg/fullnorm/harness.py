"""Experiment runs, named recipes and metric CSV emission."""

# Copyright 2024, fullnorm contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import csv
import math
import pathlib
import time
from typing import IO, Any, Callable

import attrs
import numpy as np
import structlog

from . import (
    __version__,
    config,
    data,
    estimation,
    exceptions,
    layers,
    metrics,
    models,
    optim,
    serializers,
    tensor_core,
)

logger: structlog.stdlib.BoundLogger = structlog.get_logger(__name__)

SETTINGS = config.settings

SEED_MODULUS = 2**64


@attrs.define(frozen=True)
class RunData:
    train: data.Dataset
    test: data.Dataset
    notes: list[str] = attrs.field(factory=list)


@attrs.define
class RunResult:
    csv_path: pathlib.Path
    rows: list[models.MetricsRow]
    errors_path: pathlib.Path | None = None
    series: estimation.ErrorSeries | None = None
    network: layers.Network | None = None

    def split_rows(self, split: models.Split) -> list[models.MetricsRow]:
        return [row for row in self.rows if row.split is split]


def generate_datasets(ds_cfg: config.DatasetConfig, seed: int) -> tuple[data.Dataset, data.Dataset]:
    kind = ds_cfg.kind
    if kind is models.DatasetKind.toy3:
        toy = data.gen_toy3()
        return toy, toy
    if kind is models.DatasetKind.large_variation:
        return data.gen_large_variation(
            n=ds_cfg.n,
            d=ds_cfg.d,
            c=ds_cfg.classes,
            scale_max=ds_cfg.scale_max,
            test_n=ds_cfg.test_n,
            seed=seed,
            noise=ds_cfg.noise,
        )
    if kind is models.DatasetKind.gaussian_mixture:
        return data.gen_gaussian_mixture(
            n=ds_cfg.n,
            d=ds_cfg.d,
            c=ds_cfg.classes,
            spread=ds_cfg.spread,
            seed=seed,
            test_n=ds_cfg.test_n,
        )
    if kind is models.DatasetKind.mnist:
        return data.mnist_dataset(ds_cfg.root, True), data.mnist_dataset(ds_cfg.root, False)
    if kind is models.DatasetKind.cifar10:
        return data.cifar_dataset(ds_cfg.root, True), data.cifar_dataset(ds_cfg.root, False)
    if ds_cfg.train_path is None:
        raise exceptions.InvalidConfig(detail="dataset.train_path is required for kind=file")
    train = serializers.load_dataset(ds_cfg.train_path)
    test = serializers.load_dataset(ds_cfg.test_path) if ds_cfg.test_path else train
    return train, test


def load_run_data(cfg: config.ExperimentConfig) -> RunData:
    """Build the train and test sets, then apply scaling and desk-scale caps."""
    ds_cfg = cfg.dataset
    train, test = generate_datasets(ds_cfg, cfg.seed)
    notes = []
    if ds_cfg.cap is not None and ds_cfg.cap < train.n_samples:
        notes.append(f"train capped at {ds_cfg.cap} of {train.n_samples} samples")
        train = data.cap_samples(train, ds_cfg.cap, cfg.seed)
    if ds_cfg.test_cap is not None and ds_cfg.test_cap < test.n_samples:
        notes.append(f"test capped at {ds_cfg.test_cap} of {test.n_samples} samples")
        test = data.cap_samples(test, ds_cfg.test_cap, cfg.seed)
    if ds_cfg.scale_lo is not None or ds_cfg.scale_hi is not None:
        if ds_cfg.scale_lo is None or ds_cfg.scale_hi is None:
            raise exceptions.InvalidConfig(
                detail="dataset.scale_lo and dataset.scale_hi must be set together"
            )
        train = data.scale_samples(train, ds_cfg.scale_lo, ds_cfg.scale_hi, cfg.seed)
        test = data.scale_samples(
            test, ds_cfg.scale_lo, ds_cfg.scale_hi, (cfg.seed + 1) % SEED_MODULUS
        )
    if ds_cfg.test_on_train:
        test = train
    if test.dim != train.dim or test.class_count != train.class_count:
        raise exceptions.DataFormatError(
            detail=(
                f"test set ({test.dim} features, {test.class_count} classes) does not "
                f"match train set ({train.dim} features, {train.class_count} classes)"
            )
        )
    return RunData(train=train, test=test, notes=notes)


def build_model(cfg: config.ExperimentConfig, train: data.Dataset) -> layers.Network:
    arch = cfg.architecture
    return layers.build_network(
        input_dim=train.dim,
        widths=list(arch.widths),
        n_classes=train.class_count,
        norm=arch.norm,
        stream=tensor_core.RngStream(seed=cfg.seed).derive("weights"),
        bn_alpha=SETTINGS.bn_alpha if arch.bn_alpha is None else arch.bn_alpha,
        eps=SETTINGS.norm_eps if arch.eps is None else arch.eps,
        input_norm=arch.input_norm,
    )


def planned_iterations(cfg: config.ExperimentConfig, n_samples: int) -> int:
    total = cfg.epochs * math.ceil(n_samples / cfg.batch.size)
    if cfg.max_iterations is not None:
        total = min(total, cfg.max_iterations)
    return total


def schedules(
    cfg: config.ExperimentConfig, horizon: int
) -> tuple[optim.Schedule | None, optim.Schedule | None]:
    """Resolve the (step size, approximation rate) schedules of a run.

    MCSGD runs default to the default pair and are checked for
    admissibility unless the config allows otherwise.
    """
    opt = cfg.optimizer
    if opt.kind is models.OptimizerKind.sgd:
        return None, opt.alpha
    gamma_s = opt.gamma or optim.default_gamma(opt.L_g)
    alpha_s = opt.alpha or optim.default_alpha()
    report = optim.check_schedule(
        optim.ScheduleConstraint(
            gamma_exp=gamma_s.exponent, alpha_exp=alpha_s.exponent, L_g=opt.L_g
        ),
        gamma_s,
        alpha_s,
        horizon,
    )
    if opt.allow_inadmissible:
        if not report.admissible:
            logger.warning("running inadmissible schedule", violations=report.violations)
    else:
        optim.require_admissible(report)
    return gamma_s, alpha_s


def evaluate(net: layers.Network, ds: data.Dataset) -> tuple[float, float]:
    """Inference-mode loss and error rate over a whole dataset."""
    mode = net.mode
    net.mode = layers.Mode.infer
    try:
        forward = layers.net_forward(net, ds.features, ds.labels)
    finally:
        net.mode = mode
    return forward.loss, layers.error_rate(forward.logits, ds.labels)


class MetricsWriter:
    """CSV writer: ``#`` metadata lines, the fixed header, then one row per call."""

    def __init__(self, handle: IO[str], metadata: list[tuple[str, Any]]) -> None:
        for key, value in metadata:
            handle.write(f"# {key}: {value}\n")
        self.writer = csv.writer(handle, lineterminator="\n")
        self.writer.writerow(models.METRICS_HEADER)
        self.rows: list[models.MetricsRow] = []

    def write(self, row: models.MetricsRow) -> None:
        self.writer.writerow(row.to_csv_fields())
        self.rows.append(row)


def run_metadata(
    cfg: config.ExperimentConfig, run_data: RunData, recipe: str | None
) -> list[tuple[str, Any]]:
    metadata: list[tuple[str, Any]] = [
        ("fullnorm", __version__),
        ("experiment", cfg.name),
        ("seed", cfg.seed),
    ]
    if recipe is not None:
        metadata.append(("recipe", recipe))
    metadata.append(("train", run_data.train.provenance))
    metadata.append(("test", run_data.test.provenance))
    metadata.extend(("desk-scale", note) for note in run_data.notes)
    if cfg.notes:
        metadata.append(("notes", cfg.notes))
    return metadata


def default_output(cfg: config.ExperimentConfig) -> pathlib.Path:
    if cfg.output is not None:
        return pathlib.Path(cfg.output)
    return pathlib.Path(SETTINGS.output_dir) / f"{cfg.name}.csv"


def run_experiment(
    cfg: config.ExperimentConfig,
    output: str | pathlib.Path | None = None,
    recipe: str | None = None,
) -> RunResult:
    """Train one configuration and write its metrics CSV.

    Parameters
    ----------
    cfg : config.ExperimentConfig
        Validated configuration.
    output : str | pathlib.Path | None
        CSV path; defaults to ``cfg.output`` or ``<output_dir>/<name>.csv``.
    recipe : str | None
        Recipe name recorded in the metadata lines.

    Returns
    -------
    RunResult
        Paths written and the emitted rows.
    """
    csv_path = pathlib.Path(output) if output is not None else default_output(cfg)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    run_data = load_run_data(cfg)
    train, test = run_data.train, run_data.test
    net = build_model(cfg, train)
    opt = cfg.optimizer
    horizon = planned_iterations(cfg, train.n_samples)
    gamma_s, alpha_s = schedules(cfg, horizon)
    state = optim.OptimState.for_network(net)
    series = estimation.ErrorSeries() if cfg.oracle.enabled else None
    norm_kind = cfg.architecture.norm.value
    log = logger.bind(experiment=cfg.name, norm=norm_kind, seed=cfg.seed)
    log.info("run started", iterations=horizon, csv=str(csv_path))

    with open(csv_path, "w", newline="", encoding="utf-8") as handle:
        writer = MetricsWriter(handle, run_metadata(cfg, run_data, recipe))
        for split, ds in ((models.Split.train, train), (models.Split.test, test)):
            loss, error = evaluate(net, ds)
            writer.write(
                models.MetricsRow(
                    iteration=0, epoch=0, split=split, loss=loss, error_rate=error, lr=opt.lr
                )
            )
        iteration = 0
        for epoch in range(1, cfg.epochs + 1):
            if iteration >= horizon:
                break
            plan = data.make_batch_plan(
                train,
                cfg.batch.strategy,
                cfg.batch.size,
                cfg.seed,
                epoch=epoch - 1,
                max_labels=cfg.batch.max_labels,
                workers=cfg.batch.workers,
            )
            lr = optim.step_decay(opt.lr, epoch - 1, opt.lr_decay_every, opt.lr_decay_factor)
            losses = []
            result: optim.StepResult | None = None
            for batch in plan:
                if iteration >= horizon:
                    break
                x, y = train.features[batch], train.labels[batch]
                oracle_due = series is not None and state.k % cfg.oracle.every == 0
                exact: estimation.ExactStats | None = None
                grad_norm_sq: float | None = None
                if oracle_due:
                    full_grads, exact = estimation.full_gradient_with_stats(net, train)
                    grad_norm_sq = estimation.gradient_norm_sq(full_grads)
                started = time.perf_counter()
                if gamma_s is not None and alpha_s is not None:
                    result = optim.mcsgd_step(
                        state, net, x, y, gamma_s, alpha_s, momentum=opt.momentum
                    )
                else:
                    result = optim.sgd_step(
                        state,
                        net,
                        x,
                        y,
                        lr,
                        momentum=opt.momentum,
                        alpha_k=alpha_s.value(state.k) if alpha_s is not None else None,
                        fn_backward=cfg.architecture.fn_backward,
                    )
                elapsed = time.perf_counter() - started
                metrics.observe_step(norm_kind, elapsed)
                iteration += 1
                errors = None
                if series is not None and exact is not None and grad_norm_sq is not None:
                    errors = estimation.estimation_error(estimation.estimates_of(net), exact)
                    series.append(iteration, errors, grad_norm_sq)
                losses.append(result.loss)
                writer.write(
                    models.MetricsRow(
                        iteration=iteration,
                        epoch=epoch,
                        split=models.Split.train,
                        loss=result.loss,
                        error_rate=layers.error_rate(result.logits, y),
                        est_sq_error=errors,
                        grad_norm_sq=grad_norm_sq,
                        lr=result.lr,
                        alpha=result.alpha,
                        wall_ms=elapsed * 1000.0 if SETTINGS.record_wall_time else 0.0,
                    )
                )
            if epoch % cfg.test_every == 0 or iteration >= horizon:
                test_loss, test_error = evaluate(net, test)
                writer.write(
                    models.MetricsRow(
                        iteration=iteration,
                        epoch=epoch,
                        split=models.Split.test,
                        loss=test_loss,
                        error_rate=test_error,
                        lr=result.lr if result is not None else lr,
                        alpha=result.alpha if result is not None else None,
                    )
                )
                log.info(
                    "epoch finished",
                    epoch=epoch,
                    train_loss=float(np.mean(losses)) if losses else None,
                    test_loss=test_loss,
                    test_error=test_error,
                    lr=lr,
                )

    errors_path = None
    if series is not None:
        errors_path = csv_path.with_name(f"{csv_path.stem}.errors.csv")
        series.write_csv(errors_path)
    log.info("run finished", iterations=iteration)
    return RunResult(
        csv_path=csv_path,
        rows=writer.rows,
        errors_path=errors_path,
        series=series,
        network=net,
    )


def experiment(**sections: Any) -> config.ExperimentConfig:
    return config.validate_experiment_config(sections)


def fig1(cap: int | None) -> dict[str, config.ExperimentConfig]:
    return {
        "bn": experiment(
            name="fig1-bn",
            seed=1,
            epochs=200,
            dataset={"kind": "toy3", "test_on_train": True},
            architecture={"widths": [3], "norm": "bn"},
            batch={"strategy": "shuffled", "size": 1},
            optimizer={"lr": 0.1},
        )
    }


FIG3_LR = 0.003


def fig3(cap: int | None) -> dict[str, config.ExperimentConfig]:
    dataset = {
        "kind": "large_variation",
        "n": cap or 2000,
        "d": 200,
        "classes": 200,
        "scale_max": 50.0,
        "test_n": 100,
    }
    arms = {}
    for arm, norm in (("plain", "none"), ("bn", "bn")):
        arms[arm] = experiment(
            name=f"fig3-{arm}",
            seed=3,
            epochs=20,
            notes="scaled variant of the 10000 x 1000 x 1000 dataset",
            dataset=dataset,
            architecture={"widths": [], "norm": norm, "input_norm": norm == "bn"},
            batch={"strategy": "shuffled", "size": 20},
            optimizer={"lr": FIG3_LR},
        )
    return arms


def image_arms(
    recipe: str,
    kind: str,
    strategy: str,
    cap: int,
    optimizer: dict[str, Any],
    alpha: tuple[float, float],
    epochs: int = 40,
    batch: dict[str, Any] | None = None,
) -> dict[str, config.ExperimentConfig]:
    divisor, exponent = alpha
    arms = {}
    for norm in ("bn", "fn"):
        arms[norm] = experiment(
            name=f"{recipe}-{norm}",
            seed=4,
            epochs=epochs,
            dataset={"kind": kind, "cap": cap},
            architecture={"norm": norm, "fn_backward": "elementwise"},
            batch={"strategy": strategy, "size": 64, **(batch or {})},
            optimizer={
                **optimizer,
                "alpha": {"divisor": divisor, "exponent": exponent},
            },
        )
    return arms


def mnist_unshuffled(cap: int | None) -> dict[str, config.ExperimentConfig]:
    return image_arms(
        "mnist_unshuffled",
        "mnist",
        "single_label",
        cap or SETTINGS.mnist_cap,
        {"lr": 0.01, "momentum": 0.5},
        (20.0, 0.4),
    )


def mnist_shuffled(cap: int | None) -> dict[str, config.ExperimentConfig]:
    return image_arms(
        "mnist_shuffled",
        "mnist",
        "shuffled",
        cap or SETTINGS.mnist_cap,
        {"lr": 0.01, "momentum": 0.5},
        (20.0, 0.4),
    )


CIFAR_OPTIMIZER = {
    "lr": 0.01,
    "momentum": 0.9,
    "lr_decay_every": 20,
    "lr_decay_factor": 5.0,
}


def cifar_unshuffled(cap: int | None) -> dict[str, config.ExperimentConfig]:
    return image_arms(
        "cifar_unshuffled",
        "cifar10",
        "max_k_labels",
        cap or SETTINGS.cifar_cap,
        CIFAR_OPTIMIZER,
        (5.0, 0.3),
        batch={"max_labels": 3},
    )


def cifar_shuffled(cap: int | None) -> dict[str, config.ExperimentConfig]:
    return image_arms(
        "cifar_shuffled",
        "cifar10",
        "shuffled",
        cap or SETTINGS.cifar_cap,
        CIFAR_OPTIMIZER,
        (20.0, 0.2),
    )


def batchsize(cap: int | None) -> dict[str, config.ExperimentConfig]:
    arms = {}
    for norm in ("bn", "fn"):
        for size in (1, 16):
            arms[f"{norm}-b{size}"] = experiment(
                name=f"batchsize-{norm}-b{size}",
                seed=8,
                epochs=10,
                dataset={
                    "kind": "mnist",
                    "cap": cap or SETTINGS.mnist_cap,
                    "scale_lo": -2.5,
                    "scale_hi": 2.5,
                },
                architecture={"norm": norm, "fn_backward": "elementwise"},
                batch={"strategy": "shuffled", "size": size},
                optimizer={
                    "lr": 0.01,
                    "momentum": 0.5,
                    "alpha": {"divisor": 20.0, "exponent": 0.4},
                },
            )
    return arms


RATES_ITERATIONS = 100_000
RATES_LIPSCHITZ = 0.25


def rates(cap: int | None, iterations: int = RATES_ITERATIONS) -> dict[str, config.ExperimentConfig]:
    n = cap or 512
    size = 32
    return {
        "fn": experiment(
            name="rates-fn",
            seed=5,
            epochs=math.ceil(iterations / math.ceil(n / size)),
            max_iterations=iterations,
            test_every=50,
            dataset={"kind": "gaussian_mixture", "n": n, "d": 8, "classes": 4, "spread": 1.0},
            architecture={
                "widths": [8, 8],
                "norm": "fn",
                "input_norm": True,
                "fn_backward": "oracle",
            },
            batch={"strategy": "iid", "size": size},
            optimizer={
                "kind": "mcsgd",
                "L_g": RATES_LIPSCHITZ,
                "gamma": optim.default_gamma(RATES_LIPSCHITZ).model_dump(),
                "alpha": optim.default_alpha().model_dump(),
            },
            oracle={"enabled": True, "every": 10},
        )
    }


RECIPES: dict[str, Callable[[int | None], dict[str, config.ExperimentConfig]]] = {
    "fig1": fig1,
    "fig3": fig3,
    "mnist_unshuffled": mnist_unshuffled,
    "cifar_unshuffled": cifar_unshuffled,
    "mnist_shuffled": mnist_shuffled,
    "cifar_shuffled": cifar_shuffled,
    "batchsize": batchsize,
    "rates": rates,
}


def recipe_configs(recipe_id: str, cap: int | None = None) -> dict[str, config.ExperimentConfig]:
    try:
        build = RECIPES[recipe_id]
    except KeyError:
        raise exceptions.UnknownRecipe(
            detail=f"{recipe_id!r} is not one of {', '.join(RECIPES)}"
        ) from None
    return build(cap)


def run_arms(
    recipe_id: str,
    arms: dict[str, config.ExperimentConfig],
    out_dir: str | pathlib.Path | None = None,
) -> dict[str, RunResult]:
    """Run every arm, writing ``<recipe>-<arm>.csv`` and ``<recipe>-<arm>.cfg``."""
    directory = pathlib.Path(out_dir or SETTINGS.output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    results = {}
    for arm, cfg in arms.items():
        stem = f"{recipe_id}-{arm}"
        cfg = cfg.model_copy(update={"output": str(directory / f"{stem}.csv")})
        (directory / f"{stem}.cfg").write_text(
            config.dump_experiment_config(cfg), encoding="utf-8"
        )
        logger.info("recipe arm", recipe=recipe_id, arm=arm)
        results[arm] = run_experiment(cfg, recipe=recipe_id)
    return results


def reproduce(
    recipe_id: str, out_dir: str | pathlib.Path | None = None, cap: int | None = None
) -> dict[str, RunResult]:
    """Materialize a named recipe and run all of its arms.

    Raises
    ------
    exceptions.UnknownRecipe
        Raised if `recipe_id` is not a known recipe.
    """
    return run_arms(recipe_id, recipe_configs(recipe_id, cap), out_dir)
