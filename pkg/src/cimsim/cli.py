"""Command-line front end: fit devices, train, evaluate, report, sweep.

Subcommands
-----------
fit-device      fit ReRAM or FG parameters to a measurement CSV
train           train a network preset and write checkpoint + logs
eval            quantized accuracy of a saved checkpoint
report          power/area/neuron-current report from a checkpoint
quantize-sweep  accuracy versus weight-quantization level count

Every run writes a ``manifest.json`` (config hash, seed, versions) beside its
outputs, and all files are written atomically.  ``CIM_SIM_THREADS`` caps the
BLAS/worker thread count (the control layer itself is single-threaded).
"""

import argparse
import configparser
import dataclasses
import io
import json
import os
import sys


def _apply_thread_cap():
    cap = os.environ.get("CIM_SIM_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


_apply_thread_cap()

import numpy as np  # noqa: E402

from . import dataio, devices, training  # noqa: E402
from .converters import ConverterSpec, LinearLevels, MeasuredStates  # noqa: E402
from .devices import DeviceKind  # noqa: E402
from .exceptions import CimSimError, ConfigError  # noqa: E402
from .network import calibrate_gains, lenet5_preset  # noqa: E402
from .metrics import (  # noqa: E402
    TelemetryAccumulator, build_report, neuron_current_stats, report_json,
    report_rows, tile_overhead_report,
)


# --------------------------------------------------------------------------
# experiment configuration


_DATA_KEYS = ("train_images", "train_labels", "test_images", "test_labels")


class ExperimentConfig:
    """Validated view of an experiment INI file plus CLI overrides."""

    def __init__(self, path=None, overrides=None):
        self.parser = configparser.ConfigParser()
        self.text = ""
        if path is not None:
            if not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            with open(path) as fh:
                self.text = fh.read()
            self.parser.read_string(self.text)
        self.overrides = overrides or {}

    def _get(self, section, key, fallback=None):
        if key in self.overrides and self.overrides[key] is not None:
            return self.overrides[key]
        return self.parser.get(section, key, fallback=fallback)

    @property
    def device(self) -> DeviceKind:
        name = str(self._get("experiment", "device", "reram")).lower()
        try:
            return DeviceKind(name)
        except ValueError:
            raise ConfigError(f"unknown device kind: {name!r} (want reram or fg)")

    @property
    def seed(self) -> int:
        return int(self._get("train", "seed", 42))

    def params(self) -> dict:
        path = self._get("experiment", "params_file", None)
        if path is not None and not os.path.exists(path):
            raise ConfigError(f"params_file not found: {path}")
        return dataio.load_params(path)

    def converter(self, params: dict) -> ConverterSpec:
        spec = params.get("converter", ConverterSpec())
        bits = self._get("converter", "bits", None)
        return spec if bits is None else dataclasses.replace(spec, bits=int(bits))

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            learning_rate=float(self._get("train", "learning_rate", 0.1)),
            batch_size=int(self._get("train", "batch_size", 32)),
            epochs=int(self._get("train", "epochs", 3)),
            seed=self.seed,
        )

    def dataset_paths(self) -> dict:
        data_dir = self._get("data", "dir", None)
        names = {
            "train_images": "train-images-idx3-ubyte",
            "train_labels": "train-labels-idx1-ubyte",
            "test_images": "t10k-images-idx3-ubyte",
            "test_labels": "t10k-labels-idx1-ubyte",
        }
        out = {}
        for key in _DATA_KEYS:
            val = self._get("data", key, None)
            if val is None and data_dir is not None:
                val = os.path.join(data_dir, names[key])
            if val is None:
                raise ConfigError(
                    f"dataset path {key} missing: set [data] {key} or [data] dir "
                    "(or pass --data-dir)")
            if not os.path.exists(val):
                raise ConfigError(f"dataset file not found: {val}")
            out[key] = val
        return out

    def limits(self) -> tuple:
        return (int(self._get("data", "limit_train", 10000)),
                int(self._get("data", "limit_test", 1000)))

    def manifest_text(self) -> str:
        buf = io.StringIO()
        buf.write(self.text)
        buf.write("\n# overrides\n")
        for k in sorted(self.overrides):
            if self.overrides[k] is not None:
                buf.write(f"{k} = {self.overrides[k]}\n")
        return buf.getvalue()


def _load_datasets(cfg: ExperimentConfig):
    paths = cfg.dataset_paths()
    limit_train, limit_test = cfg.limits()
    train = dataio.load_mnist(paths["train_images"], paths["train_labels"])
    test = dataio.load_mnist(paths["test_images"], paths["test_labels"])
    return train.subset(limit_train), test.subset(limit_test)


def _weight_quantizer(kind: DeviceKind, levels: int | None = None):
    """Default test-time weight quantizer: measured states for ReRAM (the
    device has a discrete set of reliably-programmable gaps), uniform levels
    for FG (quasi-continuous charge storage, limited by write resolution)."""
    if levels is not None:
        return LinearLevels(levels)
    if kind is DeviceKind.RERAM:
        return MeasuredStates(dataio.load_measured_states())
    return LinearLevels(256)


def _build_model(cfg: ExperimentConfig, train_images, dtype=np.float32):
    params = cfg.params()
    kind = cfg.device
    device_params = params["reram" if kind is DeviceKind.RERAM else "fg"]
    model = lenet5_preset(kind, device_params,
                          converter=cfg.converter(params),
                          seed=cfg.seed, dtype=dtype)
    sample = train_images[:64].astype(dtype)
    calibrate_gains(model, sample)
    return model


def _write_manifest(out_dir: str, cfg: ExperimentConfig, extra=None):
    dataio.write_manifest(os.path.join(out_dir, "manifest.json"),
                          cfg.manifest_text(), cfg.seed, extra)


# --------------------------------------------------------------------------
# subcommands


def cmd_fit_device(args) -> int:
    sweeps = dataio.load_measurement_csv(args.measurements)
    if args.device == "reram":
        result = devices.fit_reram_params(sweeps)
        section = {"reram": result.params}
    else:
        base = dataio.load_params()["fg"]
        result = devices.fit_fg_params(sweeps, base)
        section = {"fg": result.params}
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    dataio.save_params(args.out, section)
    print(f"fit {args.device}: converged={result.converged} "
          f"iterations={result.iterations} residual={result.residual_norm:.3e}")
    print(f"wrote {args.out}")
    return 0 if result.converged else 1


def cmd_train(args) -> int:
    cfg = ExperimentConfig(args.config, vars(args))
    train_set, test_set = _load_datasets(cfg)
    model = _build_model(cfg, train_set.images)
    quantizer = None if args.no_quantize else _weight_quantizer(cfg.device)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.csv")
    result = training.train(model, train_set, cfg.train_config(),
                            test_set=test_set, quantizer=quantizer,
                            log_path=log_path)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    dataio.save_checkpoint(ckpt, result.model)
    final = result.history[-1]
    _write_manifest(args.out, cfg, {"device": cfg.device.value,
                                    "final_test_accuracy": final.test_accuracy})
    print(f"epochs={len(result.history)} final_test_accuracy={final.test_accuracy:.4f}")
    print(f"wrote {ckpt} and {log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = ExperimentConfig(args.config, vars(args))
    model = dataio.load_checkpoint(args.checkpoint)
    _, test_set = _load_datasets(cfg)
    if args.no_quantize:
        acc = training.evaluate(model, test_set)
    else:
        quantizer = _weight_quantizer(model.device_kind, args.levels)
        acc = training.evaluate_quantized(model, test_set, quantizer)
    print(f"accuracy = {acc:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        dataio.atomic_write_text(
            os.path.join(args.out, "eval.json"),
            json.dumps({"accuracy": acc, "n_test": len(test_set),
                        "quantized": not args.no_quantize}, indent=2) + "\n")
        _write_manifest(args.out, cfg, {"accuracy": acc})
    return 0


def cmd_report(args) -> int:
    cfg = ExperimentConfig(args.config, vars(args))
    model = dataio.load_checkpoint(args.checkpoint)
    _, test_set = _load_datasets(cfg)
    acc_sink = TelemetryAccumulator()
    accuracy = training.evaluate(model, test_set, quantize_io=not args.no_quantize,
                                 telemetry_sink=acc_sink)
    report = build_report(model, acc_sink)
    os.makedirs(args.out, exist_ok=True)
    rows = report_rows(report)
    csv_text = "\n".join(",".join(str(c) for c in row) for row in rows) + "\n"
    dataio.atomic_write_text(os.path.join(args.out, "report.csv"), csv_text)
    dataio.atomic_write_text(os.path.join(args.out, "report.json"),
                             report_json(report) + "\n")
    _write_manifest(args.out, cfg, {"accuracy": accuracy})
    print(f"accuracy = {accuracy:.4f}")
    print(f"avg tile power = {report.avg_power_w:.3e} W, "
          f"peak = {report.peak_power_w:.3e} W, "
          f"total area = {report.total_area_um2:.1f} um^2")
    for e in tile_overhead_report(report):
        flag = "  ** converter-dominated" if e.overhead_dominated else ""
        print(f"  {e.name}: overhead ratio {e.ratio:.3g}{flag}")
    stats = neuron_current_stats(acc_sink)
    for name, (peak, avg) in stats.items():
        print(f"  {name}: avg neuron current {avg:.3e} A, peak {peak:.3e} A")
    print(f"wrote {args.out}/report.csv and report.json")
    return 0


def cmd_quantize_sweep(args) -> int:
    cfg = ExperimentConfig(args.config, vars(args))
    model = dataio.load_checkpoint(args.checkpoint)
    _, test_set = _load_datasets(cfg)
    levels = [int(x) for x in args.levels.split(",")]
    if any(n < 2 for n in levels):
        raise ConfigError("level counts must be >= 2")
    rows = [["levels", "accuracy"]]
    for n in levels:
        acc = training.evaluate_quantized(model, test_set, LinearLevels(n))
        rows.append([n, f"{acc:.4f}"])
        print(f"levels={n:4d}  accuracy={acc:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        csv_text = "\n".join(",".join(str(c) for c in r) for r in rows) + "\n"
        dataio.atomic_write_text(os.path.join(args.out, "quantize_sweep.csv"), csv_text)
        _write_manifest(args.out, cfg)
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _add_common(p, checkpoint=False):
    p.add_argument("--config", help="experiment INI file")
    p.add_argument("--device", choices=["reram", "fg"], dest="device")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data-dir", dest="dir", help="directory with IDX files")
    p.add_argument("--limit-train", type=int, dest="limit_train")
    p.add_argument("--limit-test", type=int, dest="limit_test")
    p.add_argument("--no-quantize", action="store_true")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="checkpoint.bin path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cimsim", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-device", help="fit device parameters to measurements")
    p.add_argument("measurements", help="CSV with voltage_v,current_a,state_label")
    p.add_argument("--device", choices=["reram", "fg"], required=True)
    p.add_argument("--out", required=True, help="output parameter INI file")
    p.set_defaults(func=cmd_fit_device)

    p = sub.add_parser("train", help="train the LeNet-5 preset")
    _add_common(p)
    p.add_argument("--epochs", type=int, dest="epochs")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.set_defaults(func=cmd_train, out="runs/train")

    p = sub.add_parser("eval", help="quantized accuracy of a checkpoint")
    _add_common(p, checkpoint=True)
    p.add_argument("--levels", type=int, help="override weight-quantizer level count")
    p.set_defaults(func=cmd_eval, out=None)

    p = sub.add_parser("report", help="power/area/current report")
    _add_common(p, checkpoint=True)
    p.set_defaults(func=cmd_report, out="runs/report")

    p = sub.add_parser("quantize-sweep", help="accuracy vs weight level count")
    _add_common(p, checkpoint=True)
    p.add_argument("--levels", default="2,4,16,64,256",
                   help="comma-separated level counts")
    p.set_defaults(func=cmd_quantize_sweep, out=None)
    return ap


def run_command(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and args.seed < 0:
        print("error: seed must be non-negative", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CimSimError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
