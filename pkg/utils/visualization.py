"""
PNG renderings of BEV feature maps and retrieval strips.
"""
import logging
import os
from typing import Sequence, Union

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw, ImageOps

from extensions.autodiff import Tensor
from utils.bev_pillars import BevFeatureMap
from utils.errors import ValidationError

logger = logging.getLogger(__name__)

MapLike = Union[BevFeatureMap, Tensor, np.ndarray]

TRUE_POSITIVE = (46, 160, 67)
FALSE_POSITIVE = (214, 39, 40)
QUERY_FRAME = (120, 120, 120)
BACKGROUND = (255, 255, 255)


def _as_array(feature_map: MapLike) -> np.ndarray:
    if isinstance(feature_map, BevFeatureMap):
        return feature_map.values
    if isinstance(feature_map, Tensor):
        return feature_map.values
    array = np.asarray(feature_map, dtype=np.float64)
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3:
        raise ValidationError(f"expected a [C, H, W] map, got shape {array.shape}")
    return array


def bev_image(feature_map: MapLike, scale: int = 4, colormap: str = "viridis") -> Image.Image:
    """
    Heat map of the per-cell activation magnitude (channel mean of |F|).
    Rows grow along x, so the image is flipped to put the sensor at the bottom.
    """
    activation = np.abs(_as_array(feature_map)).mean(axis=0)
    peak = float(activation.max())
    normalized = activation / peak if peak > 0 else activation
    rgba = colormaps[colormap](normalized[::-1])
    image = Image.fromarray((rgba[..., :3] * 255).astype(np.uint8))
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)
    return image


def render_bev_png(feature_map: MapLike, path: str, scale: int = 4) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    bev_image(feature_map, scale).save(path, format="PNG")
    logger.info("Wrote BEV image %s", path)
    return path


def render_retrieval_png(
    query_map: MapLike,
    retrieved_maps: Sequence[MapLike],
    successes: Sequence[bool],
    path: str,
    scale: int = 2,
    border: int = 4,
    gap: int = 8,
) -> str:
    """
    Query tile followed by the top-N retrieved tiles; retrieved tiles are framed
    green for true positives and red for false positives.
    """
    if len(retrieved_maps) != len(successes):
        raise ValidationError("need one success flag per retrieved map")
    tiles = [ImageOps.expand(bev_image(query_map, scale), border=border, fill=QUERY_FRAME)]
    for retrieved, success in zip(retrieved_maps, successes):
        color = TRUE_POSITIVE if success else FALSE_POSITIVE
        tiles.append(ImageOps.expand(bev_image(retrieved, scale), border=border, fill=color))

    width = sum(tile.width for tile in tiles) + gap * (len(tiles) - 1)
    height = max(tile.height for tile in tiles)
    strip = Image.new("RGB", (width, height), BACKGROUND)
    x = 0
    for tile in tiles:
        strip.paste(tile, (x, 0))
        x += tile.width + gap
    if len(tiles) > 1:
        # separator after the query tile
        divider = tiles[0].width + gap // 2
        ImageDraw.Draw(strip).line([(divider, 0), (divider, height)], fill=QUERY_FRAME, width=1)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    strip.save(path, format="PNG")
    logger.info("Wrote retrieval strip with %d results to %s", len(retrieved_maps), path)
    return path
