"""Experiment runner: one config file, one subcommand per pipeline stage.

Every artifact is stamped with the config hash and master seed; errors leave
a machine-readable ``error.json`` in the run directory and a nonzero exit
code. Plot emission is data-only CSV.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import urllib.request
from pathlib import Path

import click
import numpy as np

from . import device_models as dm
from .config import ExperimentConfig, load_config
from .periphery import QuantConfig, adc_transfer_csv, sar_adc
from .tile import ReadStimulus, Tile, ideal_mac, mac_with_ir_drop, tile_static_power
from .variation import VariationSpec, distinguishable_states, state_merging_report

SIGMA_GRID = (0.0, 0.02, 0.05, 0.1, 0.2)


def _write(out_dir: Path, name: str, text: str) -> Path:
    path = out_dir / name
    path.write_text(text)
    return path


def _stamp(cfg: ExperimentConfig) -> str:
    return f"# config_hash={cfg.config_hash} seed={cfg.seed}\n"


def _config_options(f):
    f = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                     help="override one config key")(f)
    return click.option("--config", "cfg_path", required=True,
                        type=click.Path(exists=True))(f)


def _run(cfg_path, overrides, command, fn):
    """Execute a subcommand body; emit an error record on failure.

    Config errors are recorded in the current directory (no run directory
    exists yet); everything else lands next to the run's outputs.
    """
    out_dir = Path(".")
    try:
        cfg = load_config(cfg_path, overrides)
        if "CIMCUBE_THREADS" in os.environ:
            import torch
            torch.set_num_threads(int(os.environ["CIMCUBE_THREADS"]))
        out_dir = cfg.resolve_output_dir()
        cfg.write_resolved(out_dir)
        fn(cfg, out_dir)
    except Exception as exc:  # noqa: BLE001 - converted to an error record
        record = {"command": command, "error": type(exc).__name__,
                  "message": str(exc)}
        (out_dir / "error.json").write_text(json.dumps(record, indent=2))
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@click.group()
def main():
    """3D compute-in-memory tile simulator and CNN harness."""


@main.command("iv-sweep")
@_config_options
@click.option("--device", type=click.Choice(["tft", "rram"]), required=True)
@click.option("--vmin", type=float, default=None)
@click.option("--vmax", type=float, default=None)
@click.option("--points", type=int, default=101)
@click.option("--vds", type=float, default=None,
              help="extra TFT sweep at this drain bias")
def cmd_iv_sweep(cfg_path, overrides, device, vmin, vmax, points, vds):
    """Emit V,I curves for the compact models."""

    def body(cfg: ExperimentConfig, out_dir: Path):
        if points < 1:
            raise dm.InvalidInputError("points must be >= 1")
        if device == "tft":
            lo = 0.0 if vmin is None else vmin
            hi = 2.0 if vmax is None else vmax
            vgs = np.linspace(lo, hi, points)
            sweeps = {"iv_tft_linear.csv": 0.1, "iv_tft_saturation.csv": 1.0}
            if vds is not None:
                sweeps["iv_tft_custom.csv"] = vds
            for name, vd in sweeps.items():
                rows = [_stamp(cfg), "V,I\n"]
                for vg in vgs:
                    i = dm.tft_drain_current(cfg.tft, float(vg), 0.0, vd)
                    rows.append(f"{float(vg)!r},{i!r}\n")
                _write(out_dir, name, "".join(rows))
        else:
            hi = 2.0 if vmax is None else vmax
            volts = _hysteresis_voltages(hi, points)
            state = dm.RramState(gap=cfg.rram.gap_max)
            rows = [_stamp(cfg), "V,I\n"]
            for v in volts:
                state = dm.rram_apply_pulse(cfg.rram, state, float(v), 1e-6) \
                    if v != 0 else state
                i = dm.rram_current(cfg.rram, state, float(v))
                rows.append(f"{float(v)!r},{i!r}\n")
            _write(out_dir, "iv_rram_loop.csv", "".join(rows))
        qcfg = cfg.quant
        _write(out_dir, "adc_transfer.csv", _stamp(cfg) + adc_transfer_csv(qcfg))

    _run(cfg_path, overrides, "iv-sweep", body)


def _hysteresis_voltages(vmax: float, points: int) -> np.ndarray:
    quarter = max(points // 4, 1)
    up = np.linspace(0, vmax, quarter, endpoint=False)
    down = np.linspace(vmax, 0, quarter, endpoint=False)
    neg = np.linspace(0, -vmax, quarter, endpoint=False)
    back = np.linspace(-vmax, 0, quarter)
    return np.concatenate([up, down, neg, back])


@main.command("states")
@_config_options
@click.option("--n-mc", type=int, default=10_000)
def cmd_states(cfg_path, overrides, n_mc):
    """Distinguishable-state counts over a sigma grid."""

    def body(cfg: ExperimentConfig, out_dir: Path):
        rows = [_stamp(cfg), "sigma,count\n"]
        for sigma in SIGMA_GRID:
            spec = VariationSpec(sigma_d2d=sigma,
                                 distribution=cfg.variation.distribution,
                                 seed=cfg.seed)
            count = distinguishable_states(cfg.rram, spec, n_mc=n_mc)
            rows.append(f"{sigma!r},{count}\n")
            report = state_merging_report(cfg.rram, spec, n_mc=n_mc)
            _write(out_dir, f"state_merging_sigma{sigma:g}.csv",
                   _stamp(cfg) + report)
        _write(out_dir, "states_summary.csv", "".join(rows))

    _run(cfg_path, overrides, "states", body)


@main.command("mac")
@_config_options
@click.option("--weights", "weights_path", type=click.Path(exists=True),
              default=None, help="CSV row,col,layer,level (default all-HRS)")
@click.option("--stimulus", "stim_path", type=click.Path(exists=True),
              default=None, help="key=value file: input_bits, layer_select, v_read")
def cmd_mac(cfg_path, overrides, weights_path, stim_path):
    """Program a tile, run ideal and IR-drop MAC, report currents and power."""

    def body(cfg: ExperimentConfig, out_dir: Path):
        g = cfg.geometry
        levels = np.zeros((g.n_rows, g.n_cols, g.n_layers), dtype=np.int32)
        if weights_path is not None:
            for lineno, line in enumerate(Path(weights_path).read_text().splitlines()):
                line = line.split("#")[0].strip()
                if not line or line.startswith("row"):
                    continue
                try:
                    r, c, l, lv = (int(x) for x in line.split(","))
                    levels[r, c, l] = lv
                except (ValueError, IndexError) as exc:
                    raise dm.InvalidInputError(
                        f"{weights_path}:{lineno + 1}: bad weight row") from exc
        gap_table = dm.level_gap_table(cfg.rram)
        tile = Tile(g, cfg.tft, cfg.rram, gaps=gap_table[levels],
                    levels=levels, d2d=np.ones_like(gap_table[levels]))
        stim = _load_stimulus(stim_path, g)
        ideal = ideal_mac(tile, stim)
        cols, _ = mac_with_ir_drop(tile, stim)
        power = float(np.sum(cols) * stim.v_read)
        qcfg = cfg.quant
        rows = [_stamp(cfg), "col,I_ideal,I_ir_drop,adc_code\n"]
        for j in range(g.n_cols):
            code = sar_adc(float(cols[j]), qcfg)
            rows.append(f"{j},{float(ideal[j])!r},{float(cols[j])!r},{code}\n")
        rows.append(f"# static_power_W={power!r}\n")
        _write(out_dir, "mac_report.csv", "".join(rows))

    _run(cfg_path, overrides, "mac", body)


def _load_stimulus(path, g) -> ReadStimulus:
    bits = (1,) * g.n_rows
    select = (1,) * g.n_layers
    v_read = 0.5
    if path is not None:
        kv = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#")[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise dm.InvalidInputError(f"{path}: expected key=value, got {line!r}")
            k, v = (part.strip() for part in line.split("=", 1))
            kv[k] = v
        if "input_bits" in kv:
            bits = tuple(int(b) for b in kv["input_bits"].split(","))
        if "layer_select" in kv:
            select = tuple(int(b) for b in kv["layer_select"].split(","))
        if "v_read" in kv:
            v_read = float(kv["v_read"])
    return ReadStimulus(input_bits=bits, layer_select=select, v_read=v_read)


@main.command("train")
@_config_options
def cmd_train(cfg_path, overrides):
    """Train the configured preset and write a checkpoint plus accuracy log."""

    def body(cfg: ExperimentConfig, out_dir: Path):
        from .nn.checkpoint import save_checkpoint
        from .nn.datasets import load_dataset
        from .nn.network import build_network
        from .nn.train import build_eval_net, evaluate, train

        data = load_dataset(cfg.dataset_name, cfg.dataset_path)
        spec = build_network(cfg.preset, input_shape=data.input_shape)
        result = train(spec, data, cfg.train, qcfg=cfg.quant,
                       max_train_images=cfg.max_train_images,
                       progress=lambda e, a, l: click.echo(
                           f"epoch {e}: train acc {a:.4f} loss {l:.4f}"))
        net = build_eval_net(spec, result.weights, result.act_scales, cfg.quant)
        test_acc = evaluate(net, data.test_images, data.test_labels)
        result.log.append((cfg.train.epochs - 1, "test", test_acc, float("nan")))
        rows = [_stamp(cfg), "epoch,split,accuracy,loss\n"]
        for epoch, split, acc, loss in result.log:
            rows.append(f"{epoch},{split},{acc!r},{loss!r}\n")
        _write(out_dir, "accuracy_log.csv", "".join(rows))
        save_checkpoint(out_dir / "checkpoint.cimw", spec, result.weights,
                        result.act_scales, cfg.quant,
                        dropout_trained=result.dropout_trained,
                        meta={"config_hash": cfg.config_hash, "seed": cfg.seed,
                              "test_accuracy": test_acc})
        click.echo(f"test accuracy {test_acc:.4f}")

    _run(cfg_path, overrides, "train", body)


@main.command("infer")
@_config_options
@click.option("--checkpoint", "ckpt", type=click.Path(), default=None)
@click.option("--mode", type=click.Choice(["ideal", "with_ir_drop"]),
              default="ideal")
def cmd_infer(cfg_path, overrides, ckpt, mode):
    """Variation-aware analog inference from a checkpoint."""

    def body(cfg: ExperimentConfig, out_dir: Path):
        from .nn.checkpoint import load_checkpoint
        from .nn.datasets import load_dataset
        from .nn.infer import infer
        from .nn.mapping import map_network
        from .nn.quant import quantize_weights

        path = Path(ckpt) if ckpt else out_dir / "checkpoint.cimw"
        if not path.exists():
            raise FileNotFoundError(
                f"no checkpoint at {path}; run `cimcube train` first")
        spec, weights, act_scales, qcfg, header = load_checkpoint(path)
        data = load_dataset(cfg.dataset_name, cfg.dataset_path)
        qweights = {li: quantize_weights(weights[li], qcfg.weight_bits)
                    for li in spec.mapped_layers}
        mapping = map_network(spec, qweights, cfg.geometry, qcfg,
                              cfg.tft, cfg.rram)
        images, labels = data.test_images, data.test_labels
        if cfg.max_images:
            images, labels = images[:cfg.max_images], labels[:cfg.max_images]
        report = infer(mapping, images, labels, act_scales,
                       variation=cfg.variation, mode=mode)
        rows = [_stamp(cfg),
                f"accuracy,{report.accuracy!r}\n",
                f"n_images,{report.n_images}\n",
                f"adc_saturation_events,{report.adc_saturation_events}\n",
                f"mode,{mode}\n",
                f"sigma_d2d,{cfg.variation.sigma_d2d!r}\n"]
        _write(out_dir, "infer_report.csv", "".join(rows))
        conf = [_stamp(cfg), "truth\\pred," + ",".join(map(str, range(10))) + "\n"]
        for t in range(10):
            conf.append(f"{t}," + ",".join(str(int(x)) for x in report.confusion[t]) + "\n")
        _write(out_dir, "confusion.csv", "".join(conf))
        click.echo(f"accuracy {report.accuracy:.4f} "
                   f"({report.adc_saturation_events} ADC saturation events)")

    _run(cfg_path, overrides, "infer", body)


@main.command("prune")
@_config_options
@click.option("--checkpoint", "ckpt", type=click.Path(), default=None)
@click.option("--ratio", type=float, required=True)
def cmd_prune(cfg_path, overrides, ckpt, ratio):
    """Channel-prune a checkpoint and save the rewired network."""

    def body(cfg: ExperimentConfig, out_dir: Path):
        from .nn.checkpoint import load_checkpoint, save_checkpoint
        from .nn.network import prune_channels

        path = Path(ckpt) if ckpt else out_dir / "checkpoint.cimw"
        if not path.exists():
            raise FileNotFoundError(f"no checkpoint at {path}")
        spec, weights, act_scales, qcfg, header = load_checkpoint(path)
        new_spec, new_weights, kept = prune_channels(spec, weights, ratio)
        save_checkpoint(out_dir / "checkpoint_pruned.cimw", new_spec,
                        new_weights, act_scales, qcfg,
                        dropout_trained=header.get("dropout_trained", False),
                        meta={"pruned_from": str(path), "ratio": ratio,
                              "kept_channels": {str(k): v for k, v in kept.items()}})
        click.echo(f"pruned checkpoint written ({ratio:g} of channels removed)")

    _run(cfg_path, overrides, "prune", body)


@main.command("fetch")
@_config_options
def cmd_fetch(cfg_path, overrides):
    """Download and checksum-verify the configured dataset files."""

    def body(cfg: ExperimentConfig, out_dir: Path):
        from .nn.datasets import FETCH_MANIFEST

        manifest = FETCH_MANIFEST.get(cfg.dataset_name)
        if manifest is None:
            raise dm.InvalidInputError(f"no fetch manifest for {cfg.dataset_name!r}")
        dest = Path(cfg.dataset_path)
        dest.mkdir(parents=True, exist_ok=True)
        for name, digest in manifest["files"].items():
            target = dest / name
            if not target.exists():
                click.echo(f"downloading {name}")
                urllib.request.urlretrieve(manifest["base_url"] + name, target)
            actual = hashlib.sha256(target.read_bytes()).hexdigest()
            if actual != digest:
                target.unlink()
                raise OSError(f"checksum mismatch for {name}: {actual}")
            click.echo(f"verified {name}")

    _run(cfg_path, overrides, "fetch", body)


@main.command("report")
@_config_options
def cmd_report(cfg_path, overrides):
    """Re-read the run directory's CSV artifacts and print a summary."""

    def body(cfg: ExperimentConfig, out_dir: Path):
        found = sorted(out_dir.glob("*.csv"))
        if not found:
            click.echo("no artifacts in run directory")
            return
        for path in found:
            rows = parse_csv(path)
            click.echo(f"{path.name}: {len(rows)} data rows")

    _run(cfg_path, overrides, "report", body)


def parse_csv(path) -> list:
    """Reader for the tool's own CSV artifacts (skips # stamps)."""
    rows = []
    header = None
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append(line.split(","))
    return rows


if __name__ == "__main__":
    main()
