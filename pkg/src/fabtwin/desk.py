"""Small-scale end-to-end experiment against the virtual-fab oracle.

Everything runs at 64 px with a depth-6 network so that a full train and
evaluate cycle fits in a few minutes on a CPU.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy import ndimage

from .core import DatasetManifest, child_seed
from .evaluation import (embed_features, frechet_distance, kl_sets, match_greedy, match_random,
                         variance_map, wd_pairwise_mean)
from .fab import FabParams, fab_batch, fab_sample
from .networks import sample_outputs, unet_forward
from .patterns import STRUCTURE_KINDS, SynthSpec, make_eval_structure, synth_fourier_pattern
from .training import TrainConfig, train_genfab, train_unet

logger = logging.getLogger(__name__)

DESK_SPEC = SynthSpec(size=64, passband_low=1.5, passband_high=5.0, min_feature_px=4)

# scaled analogs of the evaluation structures on a 64 px canvas
DESK_STRUCTURES = {
    "cross25": dict(canvas_px=64, region_px=50, arm_width=6),
    "cross50": dict(canvas_px=64, region_px=50, arm_width=12),
}


@dataclass
class DeskConfig:
    seed: int = 0
    n_pairs: int = 200
    steps: int = 2000
    depth: int = 6
    base_width: int = 16
    latent_dim: int = 16
    log_every: int = 10
    n_oracle: int = 35
    band_px: int = 3
    structures: tuple = ("cross25", "cross50")
    fab: FabParams = field(default_factory=FabParams)
    spec: SynthSpec = DESK_SPEC

    def train_config(self, **overrides):
        return TrainConfig(steps=self.steps, depth=self.depth, base_width=self.base_width,
                           latent_dim=self.latent_dim, log_every=self.log_every, seed=self.seed,
                           **overrides)


def build_desk_dataset(n_pairs, seed, spec=DESK_SPEC, params=None):
    """``n_pairs`` (layout, fabricated) pairs from Fourier patterns and the virtual fab."""
    params = params or FabParams()
    X, Y = [], []
    for i in range(n_pairs):
        layout = synth_fourier_pattern(spec, child_seed(seed, "layout", i))
        X.append(layout)
        Y.append(fab_sample(layout, params, child_seed(seed, "train_fab", i)))
    return np.array(X, dtype=np.float32), np.array(Y, dtype=np.float32)


SMOKE_SEED = 2024


def smoke_manifest_path():
    """Path of the shipped 20-pair smoke dataset manifest (64 px, seed 2024)."""
    return resources.files("fabtwin") / "data" / "smoke" / "manifest.json"


def load_smoke_dataset():
    return DatasetManifest.load(smoke_manifest_path()).load_arrays()


def edge_band(layout, width=3):
    """Pixels within ``width`` px of the layout boundary, on either side."""
    layout = np.asarray(layout) > 0
    inside = ndimage.distance_transform_edt(layout)
    outside = ndimage.distance_transform_edt(~layout)
    return np.where(layout, inside <= width, outside <= width)


def pearson(a, b):
    """Pearson correlation; NaN when either input is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a, b = a - a.mean(), b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else float("nan")


@dataclass
class StructureResult:
    kind: str
    iou_random: float
    iou_greedy: float
    kl_genfab: float
    kl_unet: float
    wd_genfab: float
    wd_unet: float
    var_mass_genfab: float
    var_mass_oracle: float
    var_max_unet: float
    edge_corr: float


@dataclass
class DeskResult:
    seed: int
    structures: dict
    genfab_log: list
    unet_log: list
    seconds: float

    def to_dict(self):
        return {"seed": self.seed, "seconds": self.seconds,
                "structures": {k: asdict(v) for k, v in self.structures.items()}}


def evaluate_structure(kind, genfab, unet, cfg):
    layout = make_eval_structure(kind, **DESK_STRUCTURES.get(kind, {}))
    width = DESK_STRUCTURES.get(kind, {}).get("arm_width", 0)
    real = np.array(fab_batch(layout, cfg.n_oracle, cfg.fab, child_seed(cfg.seed, "eval", width)),
                    dtype=np.float64)
    gen = np.array(sample_outputs(genfab, layout, cfg.n_oracle, child_seed(cfg.seed, "gen", width)))
    det = np.repeat(unet_forward(unet, layout)[None], cfg.n_oracle, axis=0)
    # variance maps compare binarized outcomes, like the oracle's own output
    gen_bin = (gen >= 0.5).astype(np.float64)
    var_gen, var_real = variance_map(gen_bin), variance_map(real)
    band = edge_band(layout, cfg.band_px)
    return StructureResult(
        kind=kind,
        iou_random=match_random(gen, real, cfg.seed),
        iou_greedy=match_greedy(gen, real),
        kl_genfab=kl_sets(real, gen),
        kl_unet=kl_sets(real, det),
        wd_genfab=wd_pairwise_mean(gen, real),
        wd_unet=wd_pairwise_mean(det, real),
        var_mass_genfab=float(var_gen.sum()),
        var_mass_oracle=float(var_real.sum()),
        var_max_unet=float(variance_map(det).max()),
        edge_corr=pearson(var_gen[band], var_real[band]),
    )


def run_desk_experiment(cfg=None, dataset=None):
    """Train Gen-Fab and a deterministic U-Net, then score both on the oracle structures."""
    cfg = cfg or DeskConfig()
    t0 = time.perf_counter()
    X, Y = dataset if dataset is not None else build_desk_dataset(cfg.n_pairs, cfg.seed, cfg.spec,
                                                                  cfg.fab)
    train_cfg = cfg.train_config()
    logger.info("seed %d: training Gen-Fab for %d steps", cfg.seed, cfg.steps)
    genfab = train_genfab((X, Y), train_cfg)
    logger.info("seed %d: training U-Net for %d steps", cfg.seed, cfg.steps)
    unet = train_unet((X, Y), train_cfg)
    results = {kind: evaluate_structure(kind, genfab.model, unet.model, cfg)
               for kind in cfg.structures}
    return DeskResult(cfg.seed, results, genfab.log, unet.log, time.perf_counter() - t0)


def distribution_shift(seed=0, n_train=200, canvas_px=64, embedder="avgpool8"):
    """FD between train patterns and eval structures, and between two train halves.

    Returns ``(fd_inter, fd_intra)``. The structure set holds every kind at
    its scaled size plus its 90 degree rotations.
    """
    X, _ = build_desk_dataset(n_train, seed)
    scale = canvas_px / 256
    structures = []
    for kind in STRUCTURE_KINDS:
        base = make_eval_structure(kind, canvas_px=256)
        small = np.asarray(ndimage.zoom(base.astype(np.float64), scale, order=0) >= 0.5,
                           dtype=np.float64)
        structures.extend(np.rot90(small, k) for k in range(4))
    feats_train = embed_features(X, embedder)
    feats_struct = embed_features(np.array(structures), embedder)
    half = n_train // 2
    fd_inter = frechet_distance(feats_train, feats_struct)
    fd_intra = frechet_distance(feats_train[:half], feats_train[half:])
    return fd_inter, fd_intra
