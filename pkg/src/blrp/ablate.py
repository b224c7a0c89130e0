"""Latent-initialisation and projection-sharing ablations."""
from dataclasses import dataclass
import time

from .errors import GridError
from .latent import Direction, InitVariant, ProjectionSharing
from .model import param_count
from .train import train, write_csv

P, I, R = InitVariant.POS_EMB_1D, InitVariant.DYN_PROJ_INIT_ONLY, InitVariant.DYN_PROJ_RESIDUAL
FWD, BWD, BI = Direction.FORWARD, Direction.BACKWARD, Direction.BIDIRECTIONAL
SEP = ProjectionSharing.SEPARATE

ABLATION_HEADER = ("variant", "direction", "fwd_init", "bwd_init", "sharing", "params",
                   "val_accuracy", "seconds")


@dataclass(frozen=True)
class Variant:
    group: str
    direction: Direction
    fwd_init: InitVariant = None
    bwd_init: InitVariant = None
    sharing: ProjectionSharing = SEP

    @property
    def descriptor(self):
        def tag(v):
            return "none" if v is None else v.value
        return (f"{self.group}:{self.direction.value}:fwd={tag(self.fwd_init)}"
                f":bwd={tag(self.bwd_init)}:sharing={self.sharing.value}")

    def apply(self, cfg):
        return cfg.replace(direction=self.direction, fwd_init=self.fwd_init,
                           bwd_init=self.bwd_init, sharing=self.sharing)


# Latent usage per direction: 3 forward-only, 3 backward-only, 7 bidirectional rows.
FLOW_GRID = [
    Variant("flow", FWD, P, None),
    Variant("flow", FWD, I, None),
    Variant("flow", FWD, R, None),
    Variant("flow", BWD, None, P),
    Variant("flow", BWD, None, I),
    Variant("flow", BWD, None, R),
    Variant("flow", BI, P, P),
    Variant("flow", BI, P, I),
    Variant("flow", BI, I, P),
    Variant("flow", BI, I, I),
    Variant("flow", BI, P, R),
    Variant("flow", BI, R, P),
    Variant("flow", BI, R, R),
]
# Fills the row count the acceptance grid expects; not one of the reference table rows.
FLOW_EXTRA = [Variant("flow-extra", BI, I, R)]
# Projection sharing with residual projection in both directions.
SHARING_GRID = [
    Variant("sharing", BI, R, R, ProjectionSharing.SHARED_SINGLE),
    Variant("sharing", BI, R, R, ProjectionSharing.SIAMESE),
    Variant("sharing", BI, R, R, ProjectionSharing.SEPARATE),
]


def default_grid():
    return FLOW_GRID + FLOW_EXTRA + SHARING_GRID


def validate_grid(grid):
    seen = set()
    for v in grid:
        if v.descriptor in seen:
            raise GridError(f"duplicate ablation variant {v.descriptor}")
        seen.add(v.descriptor)
    if not grid:
        raise GridError("empty ablation grid")


@dataclass
class AblationRow:
    variant: Variant
    params: int
    val_accuracy: float
    seconds: float


def run_ablation(grid, base_cfg, optim_cfg, train_samples, val_samples, out_dir,
                 csv_path, timing=False, log=None):
    """Train every variant with the same seed and data; one CSV row per variant."""
    validate_grid(grid)
    results, rows = [], []
    for k, v in enumerate(grid):
        cfg = v.apply(base_cfg)
        t0 = time.perf_counter()
        res = train(cfg, optim_cfg, None, None, f"{out_dir}/variant{k:02d}",
                    train_samples=train_samples, val_samples=val_samples)
        secs = time.perf_counter() - t0
        acc = res.final_val.accuracy
        results.append(AblationRow(v, param_count(cfg), acc, secs))
        rows.append([v.descriptor, v.direction.value,
                     v.fwd_init.value if v.fwd_init else "none",
                     v.bwd_init.value if v.bwd_init else "none",
                     v.sharing.value, param_count(cfg), repr(acc),
                     f"{secs:.3f}" if timing else ""])
        write_csv(csv_path, ABLATION_HEADER, rows)
        if log:
            log(f"[{k + 1}/{len(grid)}] {v.descriptor}: val acc {acc:.4f}")
    return results


def best_variant(results):
    """Highest validation accuracy; ties go to the earlier grid row."""
    return max(results, key=lambda r: r.val_accuracy)
