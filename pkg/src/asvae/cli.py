"""Command line entry point.

Subcommands: train, eval, sample, verify, gradcheck. Option precedence
is built-in defaults, then the --config file, then explicit flags.
Config files are key=value lines; blank lines and # comments ignored.

Exit codes: 0 success, 2 numerical failure (divergent training, failed
verification or gradient check), 3 file or format trouble, 4 bad
configuration. Tracebacks are reserved for genuine bugs; expected
failures print a one-line error to stderr.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

from . import autodiff as ad
from . import datasets as data_io
from . import evaluation as ev
from . import networks as net
from . import objectives as obj
from . import oracle
from . import trainer
from .checkpoint import load_checkpoint
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    FormatError,
    NumericsError,
    ShapeError,
    StateError,
    TrainingError,
)
from .rng import RngStream

EXIT_OK = 0
EXIT_NUMERICS = 2
EXIT_IO = 3
EXIT_CONFIG = 4


def parse_config_file(path: str | Path) -> dict[str, str]:
    """key=value lines; # starts a comment, blank lines are skipped."""
    values: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value.strip()
    return values


def resolve_run_dir(flag_value: str | None) -> Path:
    """--run-dir, else ASVAE_RUN_DIR, else ./runs/default."""
    if flag_value:
        return Path(flag_value)
    env = os.environ.get("ASVAE_RUN_DIR")
    if env:
        return Path(env)
    return Path("runs") / "default"


_TRAIN_FLAG_KEYS = (
    ("mode", "mode"),
    ("dataset", "dataset"),
    ("seed", "seed"),
    ("epochs", "max_epochs"),
    ("batch_size", "batch_size"),
    ("latent_dim", "latent_dim"),
    ("learning_rate", "learning_rate"),
    ("disc_steps", "disc_steps"),
)


def _flag_overrides(args: argparse.Namespace) -> dict[str, str]:
    out: dict[str, str] = {}
    for attr, key in _TRAIN_FLAG_KEYS:
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    return out


def _build_train_config(args: argparse.Namespace) -> trainer.TrainConfig:
    config = trainer.TrainConfig()
    if args.config:
        config = trainer.config_from_dict(parse_config_file(args.config), base=config)
    return trainer.config_from_dict(_flag_overrides(args), base=config)


def cmd_train(args: argparse.Namespace) -> int:
    run_dir = resolve_run_dir(args.run_dir)
    resume_state = None
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        config = trainer.config_from_dict(ckpt.config)
        config = trainer.config_from_dict(_flag_overrides(args), base=config)
        dataset = trainer.build_dataset(config)
        resume_state = trainer.state_from_checkpoint(ckpt, dataset.features.shape[1])
        if resume_state.epoch >= config.max_epochs:
            raise ConfigError(
                f"checkpoint is already at epoch {resume_state.epoch}; "
                f"raise --epochs beyond {config.max_epochs} to continue"
            )
    else:
        config = _build_train_config(args)
    result = trainer.run_training(config, run_dir=run_dir, resume_state=resume_state, log=print)
    tag = "stopped early" if result.stopped_early else "finished"
    print(
        f"{tag} at epoch {result.state.epoch}, "
        f"best validation {result.state.best_val:.6g} (epoch {result.best_epoch})"
    )
    print(f"run dir: {run_dir}")
    return EXIT_OK


def _load_bundle(checkpoint_path: str) -> tuple[trainer.TrainConfig, trainer.TrainState]:
    ckpt = load_checkpoint(checkpoint_path)
    config = trainer.config_from_dict(ckpt.config)
    dataset = trainer.build_dataset(config)
    state = trainer.state_from_checkpoint(ckpt, dataset.features.shape[1])
    return config, state


def cmd_eval(args: argparse.Namespace) -> int:
    config, state = _load_bundle(args.checkpoint)
    if args.dataset:
        config = trainer.config_from_dict({"dataset": args.dataset}, base=config)
    dataset = trainer.build_dataset(config)
    _, val_idx = trainer.split_indices(dataset.features.shape[0], config.val_fraction, config.seed)
    x_val = dataset.features[val_idx]
    classifier = None
    if dataset.labels is not None:
        classifier = data_io.train_toy_classifier(dataset, seed=config.seed + 9000)
    report = ev.evaluate_model(
        state.bundle,
        x_val,
        dataset.scale,
        k_samples=args.k_samples,
        seed=args.seed,
        classifier=classifier,
    )
    print(ev.EvalReport.CSV_HEADER)
    print(report.to_csv_row())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        fresh = not out.exists() or out.stat().st_size == 0
        with out.open("a") as fh:
            if fresh:
                fh.write(ev.EvalReport.CSV_HEADER + "\n")
            fh.write(report.to_csv_row() + "\n")
        print(f"appended to {out}")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    config, state = _load_bundle(args.checkpoint)
    stream = RngStream(args.seed)
    samples = ev.sample_generated(state.bundle, args.n, stream)
    out = Path(args.out) if args.out else None
    if out is None:
        dataset = trainer.build_dataset(config)
        suffix = ".pgm" if dataset.pixels is not None or dataset.scale == "unit" else ".atns"
        out = Path(args.checkpoint).with_name("samples" + suffix)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".pgm":
        cols = max(1, math.isqrt(args.n))
        data_io.write_image_grid(out, samples, cols=cols)
    else:
        data_io.save_tensor_file(out, samples)
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    nx, nz = 4, 3
    if args.config:
        values = parse_config_file(args.config)
        known = {"oracle_x_size", "oracle_z_size"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown verify config keys: {', '.join(unknown)}")
        try:
            nx = int(values.get("oracle_x_size", nx))
            nz = int(values.get("oracle_z_size", nz))
        except ValueError as exc:
            raise ConfigError(f"oracle sizes must be integers: {exc}") from exc
    results = oracle.verify_all(
        nx=nx, nz=nz, trials=args.trials, tolerance=args.tolerance, seed=args.seed
    )
    for check in results:
        status = "PASS" if check.passed else "FAIL"
        print(
            f"{status} {check.name}: max residual {check.max_residual:.3e} "
            f"(tolerance {check.tolerance:.1e}) over {check.detail}"
        )
    if all(c.passed for c in results):
        print(f"all {len(results)} checks passed")
        return EXIT_OK
    failed = sum(1 for c in results if not c.passed)
    print(f"{failed} of {len(results)} checks failed", file=sys.stderr)
    return EXIT_NUMERICS


def _gradcheck_cases() -> list[tuple[str, object, dict]]:
    """Small fixed model, one case per training objective.

    Each case rebuilds its sampling stream per call, so repeated
    evaluation is bit-for-bit repeatable (a precondition the checker
    itself enforces).
    """
    stream = RngStream(314)
    bundle = net.build_bundle(
        data_dim=3,
        latent_dim=2,
        stream=stream.spawn(0),
        hidden=(6, 5),
        activation="tanh",
        likelihood="gaussian",
        disc_dropout=0.1,
    )
    x = stream.spawn(1).normal((4, 3))
    x_other = stream.spawn(2).normal((4, 3))

    def gen_params():
        return {
            f"{name}.{key}": p
            for name, mlp in (("enc", bundle.encoder), ("dec", bundle.decoder))
            for key, p in mlp.params.items()
        }

    def disc_params(disc, tag):
        return {f"{tag}.{key}": p for key, p in disc.params.items()}

    cases: list[tuple[str, object, dict]] = []

    cases.append(
        ("mode_vae", lambda: obj.elbo_vae(bundle, x, RngStream(21)).total_tensor, gen_params())
    )
    cases.append(
        (
            "mode_asvae",
            lambda: obj.asvae_generator_loss(bundle, x, RngStream(22)).total_tensor,
            gen_params(),
        )
    )
    cases.append(
        (
            "mode_asvae_r",
            lambda: obj.asvae_r_loss(bundle, x, RngStream(23)).total_tensor,
            gen_params(),
        )
    )
    cases.append(
        (
            "mode_asvae_g",
            lambda: obj.asvae_g_loss(bundle, x.shape[0], RngStream(24)).total_tensor,
            gen_params(),
        )
    )

    def ali_gen():
        stream = RngStream(25)
        real = obj.sample_encoder_joint(bundle, x, stream)
        fake = obj.sample_decoder_joint(bundle, x.shape[0], stream)
        frozen = net.detach_mlp(bundle.disc1)
        return obj.ali_loss(frozen, real, fake, stream=stream.spawn(9), training=True)

    cases.append(("mode_ali", ali_gen, gen_params()))

    def game_one():
        stream = RngStream(26)
        sampler = net.detach_bundle(bundle)
        real = obj.sample_encoder_joint(sampler, x, stream)
        fake = obj.sample_product_pq(sampler, x.shape[0], stream)
        return obj.adv_objective_a1(bundle.disc1, real, fake, stream=stream.spawn(9), training=True)

    cases.append(("adv_game_one", game_one, disc_params(bundle.disc1, "d1")))

    def game_two():
        stream = RngStream(27)
        sampler = net.detach_bundle(bundle)
        real = obj.sample_decoder_joint(sampler, x.shape[0], stream)
        fake = obj.sample_product_qq(sampler, x, x_other, stream)
        return obj.adv_objective_a2(bundle.disc2, real, fake, stream=stream.spawn(9), training=True)

    cases.append(("adv_game_two", game_two, disc_params(bundle.disc2, "d2")))
    return cases


def cmd_gradcheck(args: argparse.Namespace) -> int:
    corrupt = os.environ.get("ASVAE_GRADCHECK_CORRUPT", "")
    failures = []
    for name, loss_fn, params in _gradcheck_cases():
        fn = loss_fn
        if name == corrupt:
            fn = lambda loss_fn=loss_fn: ad._scaled_gradient_identity(loss_fn(), 2.0)
        report = ad.finite_diff_check(fn, params, tol=args.tolerance)
        status = "PASS" if report.passed else "FAIL"
        print(
            f"{status} {name}: max rel err {report.max_rel_err:.3e} "
            f"over {report.entries_checked} entries (tolerance {report.tol:.1e})"
        )
        if not report.passed:
            failures.append(name)
            print(
                f"   worst: {report.worst_param}[{report.worst_index}] "
                f"analytic {report.analytic_at_worst:.9g} vs "
                f"numeric {report.numeric_at_worst:.9g}",
                file=sys.stderr,
            )
    if failures:
        print(f"gradient check failed: {', '.join(failures)}", file=sys.stderr)
        return EXIT_NUMERICS
    print("all gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asvae",
        description="Train and inspect adversarial symmetric variational autoencoders.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model and write checkpoints")
    p_train.add_argument("--mode", choices=trainer.MODES)
    p_train.add_argument("--dataset")
    p_train.add_argument("--config", help="key=value option file")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--latent-dim", type=int)
    p_train.add_argument("--learning-rate", type=float)
    p_train.add_argument("--disc-steps", type=int)
    p_train.add_argument("--run-dir")
    p_train.add_argument("--checkpoint", help="resume from this checkpoint")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on held-out data")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", help="override the training dataset")
    p_eval.add_argument("--k-samples", type=int, default=64)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", help="append the CSV row to this file")
    p_eval.set_defaults(func=cmd_eval)

    p_sample = sub.add_parser("sample", help="draw from a trained model")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--n", type=int, default=64)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", help=".pgm for an image grid, .atns for raw tensors")
    p_sample.set_defaults(func=cmd_sample)

    p_verify = sub.add_parser(
        "verify", help="check the adversarial theory on exact discrete models"
    )
    p_verify.add_argument("--trials", type=int, default=100)
    p_verify.add_argument("--tolerance", type=float, default=1e-8)
    p_verify.add_argument("--seed", type=int, default=2024)
    p_verify.add_argument("--config", help="optional oracle_x_size / oracle_z_size file")
    p_verify.set_defaults(func=cmd_verify)

    p_grad = sub.add_parser(
        "gradcheck", help="finite-difference audit of every training objective"
    )
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericsError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except (ConfigError, ContractError, DomainError, ShapeError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
