"""
End-to-end descriptor model: window of scans -> 256-D descriptor.

    encode each scan (pillars) -> align past maps -> pyramid + deformable
    aggregation -> channel MLP -> GeM pooling
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import FRAME_RATE_HZ, GRID_PRESET, NORMALIZE_DESCRIPTORS, SEED, WINDOW_K
from extensions.autodiff import Tensor, getitem, pad_trailing
from extensions.nn_ops import l2_normalize, sum_maps
from utils.ablation import AblationFlags
from utils.bev_pillars import BevFeatureMap, GridConfig, encode_scan, init_pillar_params
from utils.descriptor_head import GemConfig, gem_pool, init_head_params, project_channels, to_descriptor
from utils.ego_motion import RansacConfig
from utils.errors import ValidationError
from utils.params_io import ParameterStore, read_checkpoint, save_parameters
from utils.preprocess import Window, refine_frames
from utils.radar_io import Descriptor, RadarScan
from utils.stpdfa import DeformConfig, build_pyramid, init_stpdfa_params, run_stpdt
from utils.tgfa import align_window, build_trajectory

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    grid: GridConfig = field(default_factory=lambda: GridConfig.preset(GRID_PRESET))
    deform: DeformConfig = field(default_factory=DeformConfig)
    gem: GemConfig = field(default_factory=GemConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    window: int = WINDOW_K
    frame_rate: float = FRAME_RATE_HZ
    normalize: bool = NORMALIZE_DESCRIPTORS
    seed: int = SEED

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValidationError("window K must be at least 1")
        if not self.frame_rate > 0:
            raise ValidationError("frame_rate must be positive")
        self.deform.check_channels(self.grid.channels)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.to_dict(),
            "deform": {
                "n_heads": self.deform.n_heads,
                "n_points": self.deform.n_points,
                "n_levels": self.deform.n_levels,
                "dropout": self.deform.dropout,
            },
            "gem": {"p": self.gem.p, "eps": self.gem.eps},
            "ransac": {
                "max_iterations": self.ransac.max_iterations,
                "inlier_threshold": self.ransac.inlier_threshold,
                "min_inlier_fraction": self.ransac.min_inlier_fraction,
                "seed": self.ransac.seed,
            },
            "flags": self.flags.to_dict(),
            "window": self.window,
            "frame_rate": self.frame_rate,
            "normalize": self.normalize,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        try:
            return cls(
                grid=GridConfig.from_dict(data["grid"]),
                deform=DeformConfig(**data["deform"]),
                gem=GemConfig(**data["gem"]),
                ransac=RansacConfig(**data["ransac"]),
                flags=AblationFlags.from_dict(data["flags"]),
                window=int(data["window"]),
                frame_rate=float(data["frame_rate"]),
                normalize=bool(data["normalize"]),
                seed=int(data["seed"]),
            )
        except (KeyError, TypeError) as e:
            raise ValidationError(f"invalid model description: {e}") from e


def init_model(config: ModelConfig, seed: Optional[int] = None) -> ParameterStore:
    """Fresh parameters for every stage, drawn from `seed` (config.seed by default)."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    store = ParameterStore()
    init_pillar_params(store, config.grid, rng)
    init_stpdfa_params(store, config.grid.channels, config.deform, rng)
    init_head_params(store, config.grid.channels, rng)
    logger.debug("Initialized %d parameter tensors (%d values)", len(store), store.num_values())
    return store


def encode_window(window: Window, params: ParameterStore, config: ModelConfig) -> List[BevFeatureMap]:
    """BEV maps of a window's scans, past maps aligned to the current frame when fa is on."""
    if window.size != config.window:
        raise ValidationError(f"window has {window.size} scans, model expects {config.window}")
    maps = [encode_scan(scan, params, config.grid, config.seed) for scan in window.scans]
    if not config.flags.fa:
        return maps
    trajectory = build_trajectory(list(window.velocities), config.frame_rate, config.grid)
    return align_window(maps, trajectory)


def fuse_maps(maps: Sequence[BevFeatureMap], params: ParameterStore, config: ModelConfig,
              training: bool = False, seed: int = 0) -> Tensor:
    """
    Temporal fusion of aligned maps into one [C, H, W] map.

    Without tsp and da the maps are summed. With tsp the maps are padded to a
    multiple of the pyramid stride and the aggregate is cropped back.
    """
    tensors = [m.tensor for m in maps]
    flags = config.flags
    if not flags.uses_aggregator:
        return sum_maps(tensors)
    channels, height, width = tensors[-1].shape
    if flags.tsp:
        stride = config.deform.stride
        pad_h, pad_w = (-height) % stride, (-width) % stride
        pyramids = [build_pyramid(pad_trailing(t, pad_h, pad_w), params, config.deform) for t in tensors]
    else:
        pad_h = pad_w = 0
        pyramids = [[t] for t in tensors]
    fused = run_stpdt(pyramids, config.deform, params, training, seed, use_deformable=flags.da)
    if pad_h or pad_w:
        fused = getitem(fused, (slice(None), slice(0, height), slice(0, width)))
    return fused


def forward(window: Window, params: ParameterStore, config: ModelConfig,
            training: bool = False, seed: int = 0) -> Tensor:
    """Descriptor tensor [256] of a preprocessed window."""
    maps = encode_window(window, params, config)
    fused = fuse_maps(maps, params, config, training, seed)
    vector = gem_pool(project_channels(fused, params), config.gem)
    if config.normalize:
        vector = l2_normalize(vector)
    return vector


def describe(window: Union[Window, Sequence[RadarScan]], params: ParameterStore, config: ModelConfig) -> Descriptor:
    """
    Inference-mode descriptor. Raw scans (oldest first) are refined first:
    RANSAC ego-velocity and, with dpr, dynamic point removal.
    """
    if not isinstance(window, Window):
        scans = list(window)
        refined, estimates = refine_frames(scans, config.ransac, config.flags)
        window = Window(tuple(refined), np.stack([e.velocity for e in estimates]) if estimates else np.zeros((0, 3)),
                        anchor=len(scans) - 1)
    return to_descriptor(forward(window, params, config, training=False))


def save_model(params: ParameterStore, config: ModelConfig, path: str) -> None:
    save_parameters(params, path, meta={"model": config.to_dict()})


def load_model(path: str, expected_grid: Optional[GridConfig] = None) -> Tuple[ParameterStore, ModelConfig]:
    """
    Load parameters and their model configuration.

    Raises:
        ValidationError: Grid differs from `expected_grid` or parameter shapes do not fit the config
    """
    params, meta = read_checkpoint(path)
    if "model" not in meta:
        raise ValidationError(f"{path} carries no model configuration")
    config = ModelConfig.from_dict(meta["model"])
    if expected_grid is not None and config.grid != expected_grid:
        raise ValidationError(f"checkpoint grid {config.grid} does not match {expected_grid}")
    expected = init_model(config).shapes()
    if params.shapes() != expected:
        missing = sorted(set(expected) - set(params.names()))
        raise ValidationError(f"checkpoint parameters do not fit the model (missing: {missing[:5]})")
    return params, config
