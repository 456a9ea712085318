"""Desk-scale end-to-end run: overfit check plus the three-regimen comparison.

Usage: python scripts/run_regimen_experiments.py [--steps N] [--out DIR]
Prints training-set and held-out Dice per regimen; mirrors what the acceptance
suite asserts, as a hands-on entry point.
"""

import argparse
import json
import time

from samedoct.data import generate_synthetic
from samedoct.experiments import evaluate_on_volumes, evaluate_point_prompted, mean_dice
from samedoct.lora import Regimen, inject_lora
from samedoct.metrics import aggregate_report
from samedoct.model import ModelConfig, build_model
from samedoct.train import TrainConfig, slices_from_volumes, train


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--compare-steps", type=int, default=1000)
    parser.add_argument("--stop-dice", type=float, default=0.92)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    t0 = time.perf_counter()
    dataset = generate_synthetic(8, (16, 256, 256), 3, seed=1)
    train_vols = [v for v, e in zip(dataset.volumes, dataset.manifest["volumes"])
                  if e["split"] == "train"]
    train_masks = [m for m, e in zip(dataset.masks, dataset.manifest["volumes"])
                   if e["split"] == "train"]
    test_vols = [v for v, e in zip(dataset.volumes, dataset.manifest["volumes"])
                 if e["split"] == "test"]
    test_masks = [m for m, e in zip(dataset.masks, dataset.manifest["volumes"])
                  if e["split"] == "test"]
    slices = slices_from_volumes(train_vols, train_masks)
    print(f"dataset: {len(train_vols)} train / {len(test_vols)} test volumes, "
          f"{len(slices)} training slices ({time.perf_counter() - t0:.1f}s)")

    results = {}

    def stop_when_fit(step, model, lora_state):
        d = mean_dice(evaluate_on_volumes(model, train_vols[:2], train_masks[:2], lora_state))
        print(f"  step {step + 1}: quick train dice {d:.3f}")
        return d >= args.stop_dice

    # lora_samed, the overfit run
    t0 = time.perf_counter()
    cfg = TrainConfig(max_steps=args.steps, seed=0)
    model = build_model(ModelConfig(), seed=0)
    lora = inject_lora(model, rank=4, seed=0)
    _, hist = train(slices, model, Regimen.LORA_SAMED, cfg,
                    lora_state=lora, callback=stop_when_fit, callback_every=250)
    train_records = evaluate_on_volumes(model, train_vols, train_masks, lora,
                                        experiment="lora_samed (train)")
    results["overfit_train_dice"] = mean_dice(train_records)
    print(f"lora_samed: {len(hist.steps)} steps in {time.perf_counter() - t0:.0f}s, "
          f"train dice {results['overfit_train_dice']:.3f}")

    held_out = {}
    lora_records = evaluate_on_volumes(model, test_vols, test_masks, lora,
                                       experiment="lora_samed")
    held_out["lora_samed"] = lora_records
    print(f"lora_samed held-out dice: {mean_dice(lora_records):.3f}")

    # decoder_only with the same budget actually used by the lora run
    t0 = time.perf_counter()
    steps_used = min(len(hist.steps), args.compare_steps)
    cfg2 = TrainConfig(max_steps=steps_used, seed=0)
    model_dec = build_model(ModelConfig(), seed=0)
    train(slices, model_dec, Regimen.DECODER_ONLY, cfg2)
    dec_records = evaluate_on_volumes(model_dec, test_vols, test_masks,
                                      experiment="decoder_only")
    held_out["decoder_only"] = dec_records
    print(f"decoder_only: {steps_used} steps in {time.perf_counter() - t0:.0f}s, "
          f"held-out dice {mean_dice(dec_records):.3f}")

    # untrained zero-shot with one simulated click per class
    t0 = time.perf_counter()
    model_zs = build_model(ModelConfig(), seed=0)
    zs_records = evaluate_point_prompted(model_zs, test_vols, test_masks, n_points=1,
                                         seed=0, experiment="zero_shot 1 point")
    held_out["zero_shot"] = zs_records
    print(f"zero_shot 1pt: held-out dice {mean_dice(zs_records):.3f} "
          f"({time.perf_counter() - t0:.0f}s)")

    results["held_out"] = {k: mean_dice(v) for k, v in held_out.items()}
    report = aggregate_report(held_out["zero_shot"] + held_out["decoder_only"]
                              + held_out["lora_samed"])
    print()
    print(report.render_table())
    print()
    print(json.dumps(results, indent=1))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(results, f, indent=1)


if __name__ == "__main__":
    main()
