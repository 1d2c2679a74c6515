#!/usr/bin/env python3
"""Desk-scale Fashion-MNIST study on the vgg-mini preset.

Runs the full experiment behind the headline numbers:
  1. quantization-aware training without dropout,
  2. the same training with tile-column dropout,
  3. the train/test gap comparison between the two,
  4. sigma = 0.1 variation-aware analog inference over five seeds.

Dataset files must already be present (see `cimcube fetch`). Results land in
the output directory as CSV.

Usage: run_fmnist_study.py DATA_DIR OUT_DIR [--epochs N] [--eval-images N]
"""

import argparse
import json
import statistics
import time
from pathlib import Path

import numpy as np

from cimcube.device_models import reference_rram, reference_tft
from cimcube.nn.checkpoint import save_checkpoint
from cimcube.nn.datasets import load_dataset
from cimcube.nn.infer import infer
from cimcube.nn.mapping import map_network
from cimcube.nn.network import build_network
from cimcube.nn.quant import quantize_weights
from cimcube.nn.train import TrainConfig, build_eval_net, evaluate, train
from cimcube.periphery import QuantConfig
from cimcube.tile import TileGeometry
from cimcube.variation import VariationSpec

VARIATION_SEEDS = (11, 12, 13, 14, 15)


def run_training(spec, data, qcfg, epochs, seed, dropout):
    cfg = TrainConfig(epochs=epochs, dropout=dropout, seed=seed)
    t0 = time.time()
    result = train(spec, data, cfg, qcfg=qcfg,
                   progress=lambda e, a, l: print(
                       f"  [{dropout}] epoch {e}: acc {a:.4f} loss {l:.4f}",
                       flush=True))
    net = build_eval_net(spec, result.weights, result.act_scales, qcfg)
    test_acc = evaluate(net, data.test_images, data.test_labels)
    train_acc = result.log[-1][2]
    print(f"  [{dropout}] train {train_acc:.4f} test {test_acc:.4f} "
          f"({time.time() - t0:.0f} s)")
    return result, train_acc, test_acc


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("data_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--eval-images", type=int, default=1000,
                    help="test images per analog-inference run")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    data = load_dataset("fmnist", args.data_dir)
    spec = build_network("vgg-mini", input_shape=data.input_shape)
    qcfg = QuantConfig()
    tft, rram = reference_tft(), reference_rram()

    print("== no-dropout training ==")
    base, base_train, base_test = run_training(
        spec, data, qcfg, args.epochs, args.seed, "off")
    print("== tile-column dropout training ==")
    drop, drop_train, drop_test = run_training(
        spec, data, qcfg, args.epochs, args.seed, "tile-column")

    gap_base = base_train - base_test
    gap_drop = drop_train - drop_test
    print(f"train-test gap: {gap_base:.4f} (off) vs {gap_drop:.4f} (dropout)")

    for name, result in (("baseline", base), ("dropout", drop)):
        save_checkpoint(out / f"checkpoint_{name}.cimw", spec, result.weights,
                        result.act_scales, qcfg,
                        dropout_trained=result.dropout_trained)
        with open(out / f"accuracy_log_{name}.csv", "w") as f:
            f.write("epoch,split,accuracy,loss\n")
            for epoch, split, acc, loss in result.log:
                f.write(f"{epoch},{split},{acc!r},{loss!r}\n")

    print("== sigma = 0.1 analog inference, dropout-trained weights ==")
    qw = {li: quantize_weights(drop.weights[li], qcfg.weight_bits)
          for li in spec.mapped_layers}
    mapping = map_network(spec, qw, TileGeometry(), qcfg, tft, rram)
    images = data.test_images[:args.eval_images]
    labels = data.test_labels[:args.eval_images]
    clean = infer(mapping, images, labels, drop.act_scales, mode="ideal")
    print(f"  sigma=0 accuracy {clean.accuracy:.4f}")
    accs = []
    for seed in VARIATION_SEEDS:
        rep = infer(mapping, images, labels, drop.act_scales,
                    variation=VariationSpec(sigma_d2d=0.1, seed=seed),
                    mode="ideal")
        accs.append(rep.accuracy)
        print(f"  seed {seed}: accuracy {rep.accuracy:.4f}")
    drop_abs = clean.accuracy - statistics.median(accs)
    print(f"  median degradation {drop_abs:.4f}")

    summary = {
        "train_acc_baseline": base_train, "test_acc_baseline": base_test,
        "train_acc_dropout": drop_train, "test_acc_dropout": drop_test,
        "gap_baseline": gap_base, "gap_dropout": gap_drop,
        "sigma0_accuracy": clean.accuracy,
        "sigma01_accuracies": accs,
        "median_degradation": drop_abs,
    }
    (out / "study_summary.json").write_text(json.dumps(summary, indent=2))
    with open(out / "variation_sweep.csv", "w") as f:
        f.write("seed,accuracy\n")
        f.write(f"0 (sigma=0),{clean.accuracy!r}\n")
        for seed, acc in zip(VARIATION_SEEDS, accs):
            f.write(f"{seed},{acc!r}\n")
    print(f"summary written to {out / 'study_summary.json'}")


if __name__ == "__main__":
    main()
