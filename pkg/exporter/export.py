#!/usr/bin/env python3
"""Export an image folder into the FBNK feature-bank format.

Expects a class-per-subdirectory layout::

    root/
      sparrow/ img001.jpg ...
      warbler/ img002.jpg ...

Every image is resized (short side 256), center-cropped to 224x224,
normalized, and pushed through a frozen backbone; there is no train-time
augmentation, so exports are deterministic. Convolutional backbones pool
their final feature map (max pooling by default, which transfers best for
retrieval on these features); transformer backbones emit the class-token
embedding and ignore the pooling flag. Labels follow sorted subdirectory
order and ids are the relative file paths.

Pretrained weights are used when available; ``--weights none`` (or an
unreachable download mirror) falls back to a seeded random initialization,
which keeps the output schema and determinism intact but, obviously, not
the feature quality. ``--weights PATH`` loads a local state dict.

The FBNK byte layout written here is the toolkit's interchange format
(little-endian): magic "FBNK", version u32=1, n u64, D u32, C u32,
id_block_len u64, newline-terminated UTF-8 ids, n u32 labels,
n*D float32 features row-major.
"""

from __future__ import annotations

import argparse
import struct
import sys
import warnings
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<4sIQIIQ")
_IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}
_FALLBACK_SEED = 0x5EED


class ExportError(Exception):
    pass


class UnknownBackbone(ExportError):
    pass


# name -> (torchvision builder name, weights enum name, feature dim, kind)
BACKBONES = {
    "resnet18": ("resnet18", "ResNet18_Weights", 512, "conv"),
    "resnet34": ("resnet34", "ResNet34_Weights", 512, "conv"),
    "resnet50": ("resnet50", "ResNet50_Weights", 2048, "conv"),
    "resnet101": ("resnet101", "ResNet101_Weights", 2048, "conv"),
    "vit_b_16": ("vit_b_16", "ViT_B_16_Weights", 768, "token"),
}


def write_fbnk(path, features: np.ndarray, labels: np.ndarray, class_count: int, ids) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    labels = np.asarray(labels, dtype="<u4")
    n, dim = features.shape
    id_block = b"".join(str(i).encode("utf-8") + b"\n" for i in ids)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"FBNK", 1, n, dim, class_count, len(id_block)))
        fh.write(id_block)
        fh.write(labels.tobytes())
        fh.write(features.tobytes())


def discover_images(root: Path) -> tuple[list[tuple[Path, int]], list[str]]:
    """(image path, label) pairs with labels in sorted-subdirectory order."""
    if not root.is_dir():
        raise ExportError(f"image root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ExportError(f"need >= 2 class subdirectories under {root}, found {len(class_dirs)}")
    samples = []
    for label, class_dir in enumerate(class_dirs):
        for path in sorted(class_dir.rglob("*")):
            if path.suffix.lower() in _IMAGE_SUFFIXES and path.is_file():
                samples.append((path, label))
    if not samples:
        raise ExportError(f"no images found under {root}")
    return samples, [d.name for d in class_dirs]


def build_backbone(name: str, weights: str):
    """Instantiate a frozen feature extractor; returns (module, dim, kind)."""
    import torch
    import torchvision.models as tvm

    if name not in BACKBONES:
        raise UnknownBackbone(
            f"unknown backbone {name!r}; available: {', '.join(sorted(BACKBONES))}"
        )
    builder_name, weights_enum, dim, kind = BACKBONES[name]
    builder = getattr(tvm, builder_name)

    state_dict = None
    pretrained = None
    if weights == "auto":
        try:
            pretrained = getattr(tvm, weights_enum).DEFAULT
            model = builder(weights=pretrained)
        except Exception as exc:  # no mirror / no cache: fall back, stay deterministic
            warnings.warn(
                f"pretrained weights unavailable ({exc}); using seeded random init",
                stacklevel=2,
            )
            pretrained = None
    if pretrained is None:
        if weights not in ("auto", "none"):
            state_dict = torch.load(weights, map_location="cpu", weights_only=True)
        torch.manual_seed(_FALLBACK_SEED)
        model = builder(weights=None)
        if state_dict is not None:
            model.load_state_dict(state_dict)

    if kind == "conv":
        # keep everything up to the last convolutional block; pooling is ours
        model = torch.nn.Sequential(*list(model.children())[:-2])
    else:
        model.heads = torch.nn.Identity()  # class-token embedding
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model, dim, kind


def _transform():
    from torchvision import transforms

    return transforms.Compose(
        [
            transforms.Resize(256),
            transforms.CenterCrop(224),
            transforms.ToTensor(),
            transforms.Normalize(
                mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]
            ),
        ]
    )


def export(
    image_root,
    backbone_name: str,
    output_path,
    pool: str = "max",
    weights: str = "auto",
    batch_size: int = 8,
    device: str = "cpu",
) -> dict:
    """Run the export; returns a summary dict (n, dim, classes, skipped)."""
    import torch
    from PIL import Image

    if pool not in ("max", "avg"):
        raise ExportError(f"pool must be 'max' or 'avg', got {pool!r}")
    root = Path(image_root)
    samples, class_names = discover_images(root)
    model, dim, kind = build_backbone(backbone_name, weights)
    model = model.to(device)
    transform = _transform()

    tensors, ids, labels, skipped = [], [], [], 0
    for path, label in samples:
        try:
            with Image.open(path) as img:
                tensor = transform(img.convert("RGB"))
        except Exception as exc:
            warnings.warn(f"skipping unreadable image {path}: {exc}", stacklevel=2)
            skipped += 1
            continue
        tensors.append(tensor)
        ids.append(path.relative_to(root).as_posix())
        labels.append(label)
    if not tensors:
        raise ExportError("every image failed to load")

    chunks = []
    with torch.no_grad():
        for start in range(0, len(tensors), batch_size):
            batch = torch.stack(tensors[start : start + batch_size]).to(device)
            out = model(batch)
            if kind == "conv":
                out = out.amax(dim=(2, 3)) if pool == "max" else out.mean(dim=(2, 3))
            chunks.append(out.cpu().numpy().astype(np.float32))
    features = np.concatenate(chunks, axis=0)
    if features.shape[1] != dim:
        raise ExportError(f"backbone emitted D={features.shape[1]}, registry says {dim}")

    write_fbnk(output_path, features, np.asarray(labels), len(class_names), ids)
    return {
        "n": len(ids),
        "dim": int(features.shape[1]),
        "classes": class_names,
        "skipped": skipped,
        "out": str(output_path),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Export an image folder to an FBNK feature bank"
    )
    parser.add_argument("--root", required=True, help="class-per-subdirectory image folder")
    parser.add_argument("--backbone", default="resnet50", help="registry name, e.g. resnet50")
    parser.add_argument("--pool", choices=["max", "avg"], default="max")
    parser.add_argument("--out", required=True, help="output .fbnk path")
    parser.add_argument("--weights", default="auto",
                        help="'auto' (pretrained if reachable), 'none', or a state-dict path")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)
    try:
        summary = export(
            args.root,
            args.backbone,
            args.out,
            pool=args.pool,
            weights=args.weights,
            batch_size=args.batch_size,
            device=args.device,
        )
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"exported n={summary['n']} D={summary['dim']} C={len(summary['classes'])} "
        f"(skipped {summary['skipped']}) -> {summary['out']}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
