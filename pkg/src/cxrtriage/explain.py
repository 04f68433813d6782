"""Grad-CAM heatmaps and PNG overlays."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, PngImagePlugin

from .networks import ModelBundle
from .preprocess import resize_bilinear
from .tensor import Sequential, Sigmoid, Softmax, Tape, param_refs


@dataclass
class Heatmap:
    grid: np.ndarray  # feature-map resolution, values in [0, 1]
    upsampled: np.ndarray  # network-input resolution
    target_class: int
    score: float
    layer: str


def _resolve(model, layer: str | None) -> tuple[Sequential, str]:
    if isinstance(model, ModelBundle):
        return model.graph, layer or model.spec.cam_layer
    if layer is None:
        raise ValueError("layer is required when passing a bare graph")
    return model, layer


def grad_cam(model: ModelBundle | Sequential, x: np.ndarray, target_class: int,
             layer: str | None = None) -> Heatmap:
    """Gradient-weighted class activation map of one image.

    ``layer`` names a top-level layer of the graph whose output is a
    (C, H, W) feature map.  Gradients are taken of the target class's
    pre-activation logit (the input to the final softmax/sigmoid).
    """
    graph, layer = _resolve(model, layer)
    names = [n for n, _ in graph.layers]
    if layer not in names:
        raise KeyError(f"graph has no top-level layer {layer!r}")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("grad_cam takes a single image")

    tape = Tape(train=False, param_grads=False)
    cut = names.index(layer)
    head = graph.layers[cut + 1:]
    if head and isinstance(head[-1][1], (Softmax, Sigmoid)):
        final, head = head[-1][1], head[:-1]
    else:
        final = None
    refs = param_refs(graph)
    h = x.astype(refs[0].value.dtype if refs else x.dtype, copy=False)
    for _, lay in graph.layers[:cut + 1]:
        h = lay.forward(h, tape)
    acts = h
    if acts.ndim != 4:
        raise ValueError(f"layer {layer!r} output has shape {acts.shape}, expected a feature map")
    for _, lay in head:
        h = lay.forward(h, tape)
    logits = h
    n_classes = logits.shape[1]
    if not 0 <= target_class < n_classes:
        raise IndexError(f"target_class {target_class} out of range for {n_classes} classes")
    probs = final.forward(logits) if final is not None else logits

    g = np.zeros_like(logits)
    g[0, target_class] = 1.0
    for _, lay in reversed(head):
        g = lay.backward(g, tape)
    alpha = g[0].astype(np.float64).mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, acts[0].astype(np.float64), axes=1), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    size = x.shape[2:]
    up = np.clip(resize_bilinear(cam, size), 0.0, 1.0) if cam.shape != size else cam.copy()
    return Heatmap(cam, up, int(target_class), float(probs[0, target_class]), layer)


def _gray01(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    if img.dtype == np.uint8:
        return img / 255.0
    if img.dtype == np.uint16:
        return img / 65535.0
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def overlay_array(heatmap: Heatmap, image: np.ndarray, colormap: str = "jet", alpha: float = 0.4) -> np.ndarray:
    """RGB uint8 blend; each pixel's opacity is ``alpha * heat`` so cold regions keep the original."""
    from matplotlib import colormaps

    base = _gray01(image)
    heat = heatmap.grid
    if heat.shape != base.shape:
        heat = np.clip(resize_bilinear(heat, base.shape), 0.0, 1.0)
    color = colormaps[colormap](heat)[..., :3]
    a = (alpha * heat)[..., None]
    rgb = base[..., None] * (1.0 - a) + color * a
    return np.round(rgb * 255.0).astype(np.uint8)


def overlay(heatmap: Heatmap, image: np.ndarray, out_path: str | Path, colormap: str = "jet",
            alpha: float = 0.4, label: str | None = None, footer: bool = False) -> Path:
    """Write the blended PNG.

    The class name and score go into a PNG text chunk; ``footer=True``
    additionally draws them in a strip below the image (changing its height).
    """
    rgb = overlay_array(heatmap, image, colormap, alpha)
    caption = f"{label if label is not None else heatmap.target_class}: {heatmap.score:.4f}"
    im = Image.fromarray(rgb, mode="RGB")
    if footer:
        strip = 14
        canvas = Image.new("RGB", (im.width, im.height + strip), (0, 0, 0))
        canvas.paste(im, (0, 0))
        ImageDraw.Draw(canvas).text((2, im.height + 1), caption, fill=(255, 255, 255))
        im = canvas
    info = PngImagePlugin.PngInfo()
    info.add_text("annotation", caption)
    out_path = Path(out_path)
    im.save(out_path, format="PNG", pnginfo=info)
    return out_path


def save_heatmap_csv(heatmap: Heatmap, path: str | Path) -> None:
    np.savetxt(path, heatmap.grid, delimiter=",", fmt="%.9g")
