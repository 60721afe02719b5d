"""Direct point-set optimization: a Chamfer-driven deformation stage followed by
an EMD-driven residual refinement stage, plus single-loss and joint variants."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .core import BoundingBox, PointCloud, as_cloud, bounding_box
from .dataset import derive_rng, resample
from .roofeval import EvalConfig, RoofReport, TABLE_COLUMNS, aggregate_metrics, evaluate_roof
from .metrics import (
    Assignment,
    LossBreakdown,
    SizeMismatchError,
    chamfer_distance,
    emd_assignment,
    emd_gradient,
)

LOSSES = ("cd", "emd")
# assignment tolerance inside the optimizer loop, relative to the bounding-box
# diagonal; the gradient only needs a near-optimal matching
OPTIM_EMD_REL_TOL = 1e-3


class DivergenceError(RuntimeError):
    """Loss exceeded the guard factor times its starting value; ``history`` holds the run so far."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class OptimizerConfig:
    n_points: int = 3000
    alpha: float = 1.0
    stage1_iters: int = 500
    stage2_iters: int = 300
    step_size: float = 0.05
    decay: float = 0.5
    decay_every: int = 150
    assignment_refresh: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    divergence_factor: float = 10.0
    bbox_inflation: float = 0.1
    emd_rel_tol: float = OPTIM_EMD_REL_TOL

    def __post_init__(self):
        for name in ("n_points", "stage1_iters", "stage2_iters", "assignment_refresh", "decay_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")

    def lr(self, it: int) -> float:
        return self.step_size * self.decay ** (it // self.decay_every)


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    stage: int
    cd: float | None
    emd: float | None
    total: float


@dataclass(frozen=True)
class TwoStageResult:
    x_inter: PointCloud
    x_final: PointCloud
    residuals: np.ndarray
    history: list[LossRecord]
    loss: LossBreakdown | None = None
    order: tuple[str, str] = ("cd", "emd")
    seconds: float = 0.0


class Adam:
    """Per-coordinate adaptive moment steps on a single array."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * (grad * grad)
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return -lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# loss evaluators with cached target-side state
# ---------------------------------------------------------------------------

class _ChamferLoss:
    # plain k=1 tree queries: tie order cannot change the value and only
    # matters for the gradient on a measure-zero set
    def __init__(self, target):
        self.y = target
        self.y_tree = cKDTree(target)

    def __call__(self, x):
        d_xy, nn_xy = self.y_tree.query(x, k=1)
        d_yx, nn_yx = cKDTree(x).query(self.y, k=1)
        d_xy = d_xy * d_xy
        d_yx = d_yx * d_yx
        g = 2.0 * (x - self.y[nn_xy]) / len(x)
        np.add.at(g, nn_yx, 2.0 * (x[nn_yx] - self.y) / len(self.y))
        return float(np.mean(d_xy) + np.mean(d_yx)), g


class _EmdLoss:
    """EMD against a fixed target, re-solving the assignment every ``refresh`` calls."""

    def __init__(self, target, refresh, rel_tol):
        self.y = target
        self.refresh = refresh
        self.rel_tol = rel_tol
        self.calls = 0
        self.assignment: Assignment | None = None

    def __call__(self, x):
        if len(x) != len(self.y):
            raise SizeMismatchError(f"EMD needs equal sizes, got {len(x)} and {len(self.y)}")
        if self.assignment is None or self.calls % self.refresh == 0:
            span = np.linalg.norm(np.ptp(np.vstack([x, self.y]), axis=0))
            eps = len(x) * self.rel_tol * span if span > 0 else None
            self.assignment = emd_assignment(x, self.y, eps, warm=self.assignment)
        self.calls += 1
        dist = np.linalg.norm(x - self.y[self.assignment.mapping], axis=1)
        return float(np.mean(dist)), emd_gradient(x, self.y, self.assignment)


def _loss_fn(name, target, cfg):
    if name == "cd":
        return _ChamferLoss(target)
    if name == "emd":
        return _EmdLoss(target, cfg.assignment_refresh, cfg.emd_rel_tol)
    raise ValueError(f"unknown loss {name!r}; expected one of {LOSSES}")


def _record(stage, it, name, value, weight=1.0, fixed_cd=None):
    if stage == 1:
        cd, emd = (value, None) if name == "cd" else (None, value)
        return LossRecord(it, 1, cd, emd, value)
    cd = fixed_cd
    if name == "emd":
        emd = value
        total = (cd or 0.0) + weight * value
    else:
        emd = None
        total = (cd or 0.0) + weight * value
    return LossRecord(it, 2, cd, emd, total)


def _check_divergence(loss, initial, factor, history, stage):
    if loss > factor * initial and loss > 1e-12:
        raise DivergenceError(
            f"stage {stage} loss {loss:.6g} exceeded {factor:g}x initial {initial:.6g}", history
        )


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def init_random_cloud(bbox: BoundingBox, n: int, seed: int = 0) -> PointCloud:
    """``n`` points uniform in ``bbox``, from the seed's ``init`` sub-stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if np.any(bbox.extent <= 0):
        raise ValueError(f"degenerate bounding box with extent {bbox.extent}")
    rng = derive_rng(seed, "init")
    return PointCloud(rng.uniform(bbox.min, bbox.max, size=(n, 3)))


def init_box_for(target, inflation: float = 0.1) -> BoundingBox:
    """Target's bounding box inflated by ``inflation``; flat axes get a floor of that fraction of the widest one."""
    box = bounding_box(target)
    ext = np.maximum(box.extent, inflation * box.extent.max())
    if ext.max() == 0:
        ext = np.ones(3)
    half = 0.5 * ext * (1 + inflation)
    return BoundingBox(box.center - half, box.center + half)


def _optimize_points(x0, target, loss_name, iters, cfg, history, stage, it0=0):
    x = np.array(x0, dtype=np.float64)
    loss = _loss_fn(loss_name, target, cfg)
    opt = Adam(x.shape, cfg.beta1, cfg.beta2)
    initial = None
    for it in range(iters):
        value, grad = loss(x)
        history.append(_record(stage, it0 + it, loss_name, value))
        if initial is None:
            initial = value
        _check_divergence(value, initial, cfg.divergence_factor, history, stage)
        x = x + opt.step(grad, cfg.lr(it))
    return x


def run_stage1(init, target, cfg: OptimizerConfig | None = None, loss: str = "cd"):
    """Move the points of ``init`` to minimize Chamfer distance (or ``loss``) to ``target``.

    Returns ``(x_inter, history)``.
    """
    cfg = cfg or OptimizerConfig()
    init = as_cloud(init)
    target = as_cloud(target)
    init.require_nonempty("init")
    target.require_nonempty("target")
    y = target.points
    if loss == "emd" and len(y) != len(init):
        y = resample(target, len(init), cfg.seed).points
    history: list[LossRecord] = []
    x = _optimize_points(init.points, y, loss, cfg.stage1_iters, cfg, history, stage=1)
    return PointCloud(x), history


def run_stage2(x_inter, target, cfg: OptimizerConfig | None = None, loss: str = "emd",
               cd_inter: float | None = None, it0: int = 0, guard_ref: float | None = None) -> TwoStageResult:
    """Optimize per-point residuals on top of ``x_inter`` under ``alpha`` times EMD (or ``loss``).

    ``x_final = x_inter + residuals`` exactly. With ``alpha == 0`` the
    residuals stay zero. The step size schedule restarts at ``step_size``;
    ``it0`` only offsets the recorded iteration numbers. The divergence guard
    compares against ``guard_ref`` when given (the run's initial value of
    the same loss), else against the first stage-2 loss.
    """
    cfg = cfg or OptimizerConfig()
    x_inter = as_cloud(x_inter)
    target = as_cloud(target)
    x_inter.require_nonempty("x_inter")
    target.require_nonempty("target")
    if loss == "emd" and len(x_inter) != len(target):
        raise SizeMismatchError(
            f"refinement needs |x_inter| == |target| ({len(x_inter)} vs {len(target)}); resample first"
        )
    base = x_inter.points
    y = target.points
    if cd_inter is None:
        cd_inter = chamfer_distance(base, y)
    fn = _loss_fn(loss, y, cfg)
    r = np.zeros_like(base)
    opt = Adam(r.shape, cfg.beta1, cfg.beta2)
    history: list[LossRecord] = []
    initial = guard_ref
    for it in range(cfg.stage2_iters):
        value, grad = fn(base + r)
        weighted = cfg.alpha * value
        history.append(_record(2, it0 + it, loss, value, cfg.alpha, cd_inter))
        if initial is None:
            initial = weighted
        _check_divergence(weighted, initial, cfg.divergence_factor, history, 2)
        r = r + opt.step(cfg.alpha * grad, cfg.lr(it))
    x_final = base + r
    residuals = x_final - base
    return TwoStageResult(PointCloud(base), PointCloud(x_final), residuals, history)


def _prepare_target(target, cfg):
    target = as_cloud(target)
    target.require_nonempty("target")
    return target, resample(target, cfg.n_points, cfg.seed)


def run_two_stage(target, cfg: OptimizerConfig | None = None, order=("cd", "emd"), init=None) -> TwoStageResult:
    """Random init, stage 1 under ``order[0]``, stage 2 residuals under ``order[1]``.

    The default order is Chamfer then EMD. The target is resampled to
    ``n_points`` before any EMD term.
    """
    cfg = cfg or OptimizerConfig()
    t0 = time.perf_counter()
    target, y_eq = _prepare_target(target, cfg)
    if init is None:
        init = init_random_cloud(init_box_for(target, cfg.bbox_inflation), cfg.n_points, cfg.seed)
    s1_target = y_eq if order[0] == "emd" else target
    x_inter, hist1 = run_stage1(init, s1_target, cfg, loss=order[0])
    cd_inter = chamfer_distance(x_inter, target)
    s2_target = y_eq if order[1] == "emd" else target
    try:
        # same loss in both stages: guard against the run's initial value, so the
        # fresh optimizer's first steps off a converged cloud are not divergence
        ref = cfg.alpha * hist1[0].total if order[0] == order[1] and hist1 else None
        res = run_stage2(x_inter, s2_target, cfg, loss=order[1], cd_inter=cd_inter,
                         it0=cfg.stage1_iters, guard_ref=ref)
    except DivergenceError as exc:
        raise DivergenceError(str(exc), hist1 + exc.history) from None
    breakdown = None
    if tuple(order) == ("cd", "emd"):
        emd_final = res.history[-1].emd if cfg.alpha == 0 else None
        breakdown = _final_breakdown(x_inter, res.x_final, target, y_eq, cfg, emd_final)
    return replace(res, history=hist1 + res.history, loss=breakdown, order=tuple(order),
                   seconds=time.perf_counter() - t0)


def _final_breakdown(x_inter, x_final, target, y_eq, cfg, emd_final=None):
    cd = chamfer_distance(x_inter, target)
    emd = emd_final if emd_final is not None else emd_assignment(y_eq, x_final).total_cost
    return LossBreakdown(cd_inter=cd, emd_final=emd, alpha=cfg.alpha, total=cd + cfg.alpha * emd)


def run_single_loss(target, cfg: OptimizerConfig | None = None, loss: str = "cd", init=None):
    """One stage of ``stage1_iters + stage2_iters`` iterations under a single loss.

    Returns ``(cloud, history)``; ``init`` overrides the random start.
    """
    cfg = cfg or OptimizerConfig()
    target, y_eq = _prepare_target(target, cfg)
    if init is None:
        init = init_random_cloud(init_box_for(target, cfg.bbox_inflation), cfg.n_points, cfg.seed)
    init = as_cloud(init)
    y = y_eq if loss == "emd" else target
    if loss == "emd" and len(init) != len(y):
        y = resample(target, len(init), cfg.seed)
    merged = replace(cfg, stage1_iters=cfg.stage1_iters + cfg.stage2_iters)
    return run_stage1(init, y, merged, loss=loss)


def run_joint(target, cfg: OptimizerConfig | None = None, init=None) -> TwoStageResult:
    """Optimize the deformed cloud and the residuals together under CD(x, y) + alpha * EMD(y, x + r)."""
    cfg = cfg or OptimizerConfig()
    t0 = time.perf_counter()
    target, y_eq = _prepare_target(target, cfg)
    if init is None:
        init = init_random_cloud(init_box_for(target, cfg.bbox_inflation), cfg.n_points, cfg.seed)
    x = np.array(as_cloud(init).points)
    r = np.zeros_like(x)
    cd_fn = _ChamferLoss(target.points)
    emd_fn = _EmdLoss(y_eq.points, cfg.assignment_refresh, cfg.emd_rel_tol)
    opt_x = Adam(x.shape, cfg.beta1, cfg.beta2)
    opt_r = Adam(r.shape, cfg.beta1, cfg.beta2)
    history: list[LossRecord] = []
    initial = None
    for it in range(cfg.stage1_iters + cfg.stage2_iters):
        cd, g_cd = cd_fn(x)
        if cfg.alpha > 0:
            emd, g_emd = emd_fn(x + r)
        else:
            emd, g_emd = 0.0, np.zeros_like(x)
        total = cd + cfg.alpha * emd
        history.append(LossRecord(it, 0, cd, emd, total))
        if initial is None:
            initial = total
        _check_divergence(total, initial, cfg.divergence_factor, history, 0)
        lr = cfg.lr(it)
        x = x + opt_x.step(g_cd + cfg.alpha * g_emd, lr)
        r = r + opt_r.step(cfg.alpha * g_emd, lr)
    x_final = x + r
    breakdown = _final_breakdown(PointCloud(x), PointCloud(x_final), target, y_eq, cfg)
    return TwoStageResult(PointCloud(x), PointCloud(x_final), x_final - x, history, breakdown,
                          ("cd", "emd"), time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

# arm name -> (stage-1 loss, stage-2 loss); single-loss arms have one entry
ARMS = {
    "two-stage": ("cd", "emd"),
    "cd-cd": ("cd", "cd"),
    "emd-emd": ("emd", "emd"),
    "emd-cd": ("emd", "cd"),
    "cd-only": ("cd",),
    "emd-only": ("emd",),
    "joint": ("joint",),
    "pcd": ("cd",),  # stage-1 output of the two-stage run
}
GRIDS = ("arm", "alpha", "n_points")


def sample_seed(seed: int, index: int) -> int:
    """Seed for the ``index``-th sample of a batch run with root ``seed``."""
    return int(derive_rng(seed, "sample", index).integers(2**31 - 1))


def run_arm(target, arm: str, cfg: OptimizerConfig | None = None) -> dict[str, PointCloud]:
    """Run one ablation arm; returns ``{"final": cloud}`` plus ``"inter"`` for staged arms."""
    cfg = cfg or OptimizerConfig()
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; expected one of {sorted(ARMS)}")
    if arm == "pcd":
        res = run_two_stage(target, cfg)
        return {"final": res.x_inter}
    if arm == "joint":
        res = run_joint(target, cfg)
        return {"final": res.x_final, "inter": res.x_inter}
    order = ARMS[arm]
    if len(order) == 1:
        cloud, _ = run_single_loss(target, cfg, order[0])
        return {"final": cloud}
    res = run_two_stage(target, cfg, order=order)
    return {"final": res.x_final, "inter": res.x_inter}


@dataclass
class AblationCell:
    label: str
    sample: str
    report: RoofReport
    seconds: float
    inter_report: RoofReport | None = None


@dataclass
class AblationTable:
    grid: str
    labels: list[str]
    cells: list[AblationCell] = field(default_factory=list)

    def rows(self) -> list[tuple[str, dict]]:
        out = []
        for label in self.labels:
            cells = [c for c in self.cells if c.label == label]
            agg = aggregate_metrics([c.report for c in cells])
            agg["seconds"] = float(np.mean([c.seconds for c in cells])) if cells else None
            out.append((label, agg))
        return out

    def to_csv(self, timing: bool = True) -> str:
        cols = [*TABLE_COLUMNS, "seconds"] if timing else list(TABLE_COLUMNS)
        lines = [",".join([self.grid, *cols])]
        for label, agg in self.rows():
            vals = ["" if agg[c] is None else repr(agg[c]) for c in cols]
            lines.append(",".join([label, *vals]))
        return "\n".join(lines) + "\n"

    def per_sample(self, label: str) -> list[AblationCell]:
        return [c for c in self.cells if c.label == label]


def _cell_cfg(grid, value, cfg):
    if grid == "arm":
        return str(value), cfg
    if grid == "alpha":
        return f"alpha={value:g}", replace(cfg, alpha=float(value))
    if grid == "n_points":
        return f"n_points={int(value)}", replace(cfg, n_points=int(value))
    raise ValueError(f"unknown grid {grid!r}; expected one of {GRIDS}")


def ablation_cell(target, sample: str, index: int, grid: str, value, cfg: OptimizerConfig,
                  eval_cfg: EvalConfig | None = None) -> AblationCell:
    """Optimize and evaluate one (sample, grid value) pair; the seed derives from ``index``."""
    label, ccfg = _cell_cfg(grid, value, cfg)
    ccfg = replace(ccfg, seed=sample_seed(cfg.seed, index))
    arm = str(value) if grid == "arm" else "two-stage"
    t0 = time.perf_counter()
    clouds = run_arm(target, arm, ccfg)
    seconds = time.perf_counter() - t0
    report = evaluate_roof(target, clouds["final"], eval_cfg)
    inter = evaluate_roof(target, clouds["inter"], eval_cfg) if "inter" in clouds else None
    return AblationCell(label, sample, report, seconds, inter)


def ablate(targets, grid: str, values, cfg: OptimizerConfig | None = None,
           eval_cfg: EvalConfig | None = None) -> AblationTable:
    """Batch-mean roof metrics for each grid value.

    ``targets`` is a sequence of ``(name, cloud)``; ``grid`` is ``"arm"``
    (values from ``ARMS``), ``"alpha"`` or ``"n_points"``. Every cell of
    sample ``i`` shares the seed ``sample_seed(cfg.seed, i)``.
    """
    cfg = cfg or OptimizerConfig()
    targets = list(targets)
    values = list(values)
    if not targets:
        raise ValueError("empty target batch")
    if not values:
        raise ValueError("empty ablation grid")
    labels = [_cell_cfg(grid, v, cfg)[0] for v in values]
    table = AblationTable(grid, labels)
    for v in values:
        for i, (name, target) in enumerate(targets):
            table.cells.append(ablation_cell(target, name, i, grid, v, cfg, eval_cfg))
    return table
