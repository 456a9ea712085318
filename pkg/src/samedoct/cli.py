"""Command-line entry points: generate / train / eval / simulate-prompts / predict / serve."""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from .errors import SamedOctError

# Overlay colors per class id (RGB): IRF red, SRF green, PED blue.
CLASS_COLORS = {1: (220, 40, 40), 2: (40, 200, 80), 3: (60, 90, 230)}
DEFAULT_PORT_ENV = "SAMEDOCT_PORT"


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"shape must be DxHxW, got {text!r}")
    return tuple(int(p) for p in parts)


def cmd_generate(args) -> int:
    from .data import generate_synthetic, write_dataset

    dataset = generate_synthetic(args.n, args.shape, args.classes, args.seed)
    manifest_path = write_dataset(dataset, args.out)
    print(f"wrote {args.n} volumes to {args.out} (manifest: {manifest_path})")
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset, load_manifest
    from .lora import Regimen, inject_lora
    from .model.core import build_model
    from .train import load_yaml_config, slices_from_volumes, train

    train_cfg, model_cfg, raw = load_yaml_config(args.config)
    data_path = args.data or raw.get("data")
    if not data_path:
        raise SamedOctError("no dataset: pass --data or set 'data' in the config")
    manifest = load_manifest(data_path)
    volumes, masks = load_dataset(manifest, split="train")
    dataset = slices_from_volumes(volumes, masks)

    model = build_model(model_cfg, seed=train_cfg.seed)
    regimen = Regimen(args.regimen)
    lora_state = None
    if regimen is Regimen.LORA_SAMED:
        lora_state = inject_lora(model, rank=args.lora_rank, seed=train_cfg.seed)
    checkpoint_path, history = train(dataset, model, regimen, train_cfg,
                                     lora_state=lora_state, out_dir=args.out)
    _plot_history(history, os.path.join(args.out, "history.png"))
    print(f"trained {len(history.steps)} steps; checkpoint: {checkpoint_path}")
    return 0


def _plot_history(history, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [row["step"] for row in history.steps]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax1.plot(steps, [row["loss"] for row in history.steps], label="total", lw=0.8)
    ax1.plot(steps, [row["ce"] for row in history.steps], label="ce", lw=0.6, alpha=0.7)
    ax1.plot(steps, [row["dice"] for row in history.steps], label="dice", lw=0.6, alpha=0.7)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(steps, [row["lr"] for row in history.steps], color="tab:orange", lw=0.8)
    ax2.set_xlabel("step")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _index_masks(directory: str) -> dict[str, str]:
    from .data import load_mask

    index = {}
    for sidecar in sorted(glob.glob(os.path.join(directory, "*.json"))):
        if os.path.basename(sidecar) == "manifest.json":
            continue
        try:
            mask = load_mask(sidecar)
        except SamedOctError:
            continue
        index[mask.volume_id or os.path.basename(sidecar)] = sidecar
    return index


def cmd_eval(args) -> int:
    from .data import load_mask
    from .metrics import aggregate_report, evaluate_volume, plot_report, records_to_csv

    pred_idx = _index_masks(args.pred)
    ref_a_idx = _index_masks(args.ref_a)
    ref_b_idx = _index_masks(args.ref_b) if args.ref_b else {}
    shared = sorted(set(pred_idx) & set(ref_a_idx))
    if not shared:
        raise SamedOctError("no volume ids shared between --pred and --ref-a")
    records = []
    for vid in shared:
        pred = load_mask(pred_idx[vid])
        ref_a = load_mask(ref_a_idx[vid])
        ref_b = load_mask(ref_b_idx[vid]) if vid in ref_b_idx else None
        records.extend(evaluate_volume(pred, ref_a, ref_b, experiment=args.experiment))
    records_to_csv(records, args.out)
    report = aggregate_report(records)
    print(report.render_table())
    figure_path = os.path.splitext(args.out)[0] + ".png"
    plot_report(report, figure_path)
    print(f"wrote {args.out} and {figure_path}")
    return 0


def cmd_simulate_prompts(args) -> int:
    from .data import load_mask
    from .simulate import simulate_points

    mask = load_mask(args.mask)
    sim = simulate_points(mask.labels[args.slice], args.class_id, args.n, args.seed,
                          connectivity=args.connectivity)
    print(json.dumps(sim.to_json_list(), indent=1))
    return 0


def _overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    rgb = np.stack([np.clip(image * 255, 0, 255)] * 3, axis=2).astype(np.float32)
    for class_id, color in CLASS_COLORS.items():
        sel = labels == class_id
        rgb[sel] = (1 - alpha) * rgb[sel] + alpha * np.array(color, dtype=np.float32)
    return rgb.astype(np.uint8)


def cmd_predict(args) -> int:
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .data import load_volume, save_mask
    from .experiments import predict_volume

    model, lora_state, manifest = load_checkpoint(args.checkpoint)
    volume = load_volume(args.volume)
    class_names = {int(k): v for k, v in manifest.get("class_names", {}).items()}
    mask = predict_volume(model, volume, lora_state, class_names=class_names)
    os.makedirs(args.out, exist_ok=True)
    save_mask(mask, os.path.join(args.out, f"{volume.volume_id or 'prediction'}_labels.json"))
    for k in range(mask.labels.shape[0]):
        Image.fromarray(mask.labels[k], mode="L").save(
            os.path.join(args.out, f"slice_{k:03d}_mask.png"))
        Image.fromarray(_overlay(volume.voxels[k], mask.labels[k]), mode="RGB").save(
            os.path.join(args.out, f"slice_{k:03d}_overlay.png"))
    print(f"wrote {mask.labels.shape[0]} slice masks and overlays to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(cache_size=args.cache_size)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samedoct",
                                     description="Promptable OCT fluid segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--shape", type=_parse_shape, default=(16, 256, 256), help="DxHxW")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fine-tune under a regimen")
    p.add_argument("--config", required=True, help="YAML with train/model sections")
    p.add_argument("--regimen", required=True, choices=["decoder_only", "lora_samed"])
    p.add_argument("--data", help="dataset manifest (overrides config)")
    p.add_argument("--lora-rank", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate predicted masks against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref-a", required=True)
    p.add_argument("--ref-b")
    p.add_argument("--experiment", default="eval")
    p.add_argument("--out", required=True, help="record-level CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate-prompts", help="simulated clicks for one mask slice")
    p.add_argument("--mask", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=8)
    p.add_argument("--slice", type=int, default=0)
    p.set_defaults(func=cmd_simulate_prompts)

    p = sub.add_parser("predict", help="per-slice masks and overlays for a volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("serve", help="run the HTTP prompting service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=int(os.environ.get(DEFAULT_PORT_ENV, "8765")))
    p.add_argument("--cache-size", type=int, default=64)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SamedOctError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: OSError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
