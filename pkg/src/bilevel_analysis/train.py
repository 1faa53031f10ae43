"""Learning analysis operators.

* :func:`sgd_train` minimizes the supervised denoising loss
  ``Q(theta) = sum_t 0.5 ||x*(theta, y_t) - x_t||^2`` by SGD with exact
  gradients and warm-started ADMM solves.
* :func:`unsupervised_train` learns orthonormal filters that sparsify clean
  images (ADMM with an orthogonal Procrustes update).
* :func:`beta_sweep` picks the regularization weight with the best training SNR.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datagen import Dataset, philox
from .denoise import AdmmState, DenoiseConfig, admm_denoise, resolve_operator, soft_threshold
from .evaluation import snr
from .imgops import (
    FilterBank,
    apply_analysis,
    load_filterbank,
    make_dct_filterbank,
    save_filterbank,
)
from .kktgrad import KKT_MAX_ITERS, KKT_TOL, loss_and_gradient

logger = logging.getLogger(__name__)

DEFAULT_SCHEDULE = ((1, 5000), (5, 2500), (10, 2500))
_SHUFFLE_STREAM = 2


def parse_schedule(text) -> tuple:
    """``"1x5000,5x2500"`` -> ``((1, 5000), (5, 2500))``."""
    if not isinstance(text, str):
        return tuple((int(b), int(n)) for b, n in text)
    stages = []
    for part in text.split(","):
        try:
            b, n = part.lower().split("x")
            stages.append((int(b), int(n)))
        except ValueError:
            raise ValueError(f"bad schedule stage {part!r}; expected BATCHxITERS") from None
    return tuple(stages)


def format_schedule(schedule) -> str:
    return ",".join(f"{b}x{n}" for b, n in schedule)


def _train_denoise_default():
    return DenoiseConfig(rho=10.0, relax=1.7, outer_iters=2000, tol=1e-6)


@dataclass
class TrainConfig:
    """Settings for :func:`sgd_train`.

    ``schedule`` lists ``(batch_size, iterations)`` stages. The gradient step
    is ``step_size * sum(grad) / (n_pixels * batch)``. ``init`` is ``"dct"``
    (the eight nonconstant 3x3 DCT filters) or a filter-bank file.
    """

    beta: float = 0.02
    step_size: float = 2.0
    schedule: tuple = DEFAULT_SCHEDULE
    seed: int = 0
    denoise: DenoiseConfig = field(default_factory=_train_denoise_default)
    kkt_tol: float = KKT_TOL
    kkt_max_iters: int = KKT_MAX_ITERS
    init: str = "dct"
    warm_start: bool = True
    snapshot_every: int = 100
    unreliable_fraction: float = 0.1

    def __post_init__(self):
        self.schedule = parse_schedule(self.schedule)
        if isinstance(self.denoise, dict):
            self.denoise = DenoiseConfig(**self.denoise)
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if not self.step_size >= 0:
            raise ValueError("step_size must be >= 0")
        if not self.schedule or any(b < 1 or n < 0 for b, n in self.schedule):
            raise ValueError("schedule must be a nonempty list of (batch >= 1, iters >= 0)")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")

    @property
    def total_iters(self) -> int:
        return sum(n for _, n in self.schedule)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["schedule"] = [list(s) for s in self.schedule]
        d["denoise"] = {k: v for k, v in asdict(self.denoise).items() if k != "warm"}
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainRun:
    """Result of :func:`sgd_train`.

    ``loss_log[i]`` is the mean per-pair loss of the batch used at step
    ``i``, measured before that step's update. ``steps`` holds one record
    per step (batch, ADMM iterations, flags). ``theta_history`` holds
    ``(step, filters)`` snapshots taken before the given step.
    """

    config: TrainConfig
    final_fb: FilterBank
    theta_history: list = field(default_factory=list)
    loss_log: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    warm_cache: dict = field(default_factory=dict)

    @property
    def n_flagged(self) -> int:
        return sum(s["flagged"] for s in self.steps)

    @property
    def unreliable(self) -> bool:
        return bool(self.steps) and self.n_flagged > self.config.unreliable_fraction * len(self.steps)

    @property
    def admm_iters(self) -> np.ndarray:
        return np.array([s["admm_iters"] for s in self.steps], dtype=float)


def initial_filterbank(init) -> FilterBank:
    if isinstance(init, FilterBank):
        return init.copy()
    if init == "dct":
        return make_dct_filterbank(include_dc=False)
    return load_filterbank(init)


def _epoch_order(seed, epoch, T):
    return philox(seed, _SHUFFLE_STREAM, epoch).permutation(T)


def _cold_state(fb, y, cfg: DenoiseConfig) -> AdmmState:
    z = soft_threshold(apply_analysis(fb, y), cfg.beta / cfg.rho)
    return AdmmState(x=y.copy(), z=z, u=np.zeros_like(z), rho=cfg.rho)


# persistence -----------------------------------------------------------

_STEP_FIELDS = ("step", "batch_size", "loss", "admm_iters", "n_used", "flagged", "grad_norm")


def _loss_csv(steps) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_STEP_FIELDS)
    for s in steps:
        writer.writerow([repr(s[k]) if isinstance(s[k], float) else s[k] for k in _STEP_FIELDS])
    return buf.getvalue()


def _save_state(state: AdmmState, path: Path):
    header = {"rho": state.rho, "x": list(state.x.shape), "z": list(state.z.shape)}
    path.with_suffix(".json").write_text(json.dumps(header))
    np.concatenate([state.x.ravel(), state.z.ravel(), state.u.ravel()]).astype("<f8").tofile(
        path.with_suffix(".f64"))


def _load_state(path: Path) -> AdmmState:
    header = json.loads(path.with_suffix(".json").read_text())
    xs, zs = tuple(header["x"]), tuple(header["z"])
    nx, nz = int(np.prod(xs)), int(np.prod(zs))
    data = np.fromfile(path.with_suffix(".f64"), dtype="<f8")
    if data.size != nx + 2 * nz:
        raise ValueError(f"{path}: warm state has {data.size} values, expected {nx + 2 * nz}")
    return AdmmState(x=data[:nx].reshape(xs), z=data[nx:nx + nz].reshape(zs),
                     u=data[nx + nz:].reshape(zs), rho=header["rho"])


def _checkpoint(run_dir: Path, run: TrainRun, fb: FilterBank, step: int, epoch: int, pos: int):
    (run_dir / "loss.csv").write_text(_loss_csv(run.steps))
    with open(run_dir / "diagnostics.jsonl", "w") as fh:
        for s in run.steps:
            for d in s["pairs"]:
                fh.write(json.dumps(dict(d, step=s["step"])) + "\n")
    snaps = run_dir / "snapshots"
    snaps.mkdir(exist_ok=True)
    for it, filters in run.theta_history:
        target = snaps / f"theta_{it:06d}.json"
        if not target.exists():
            save_filterbank(FilterBank(filters, {"step": it}), target)
    warm = run_dir / "warm"
    warm.mkdir(exist_ok=True)
    for idx, state in run.warm_cache.items():
        _save_state(state, warm / f"pair_{idx:04d}")
    save_filterbank(FilterBank(fb.filters, {"step": step}), run_dir / "current.json")
    (run_dir / "checkpoint.json").write_text(json.dumps(
        {"step": step, "epoch": epoch, "pos": pos,
         "warm_pairs": sorted(int(i) for i in run.warm_cache)}, indent=2))


def _resume(run_dir: Path, cfg: TrainConfig):
    saved = TrainConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    if saved.to_dict() != cfg.to_dict():
        raise ValueError(f"{run_dir}: config differs from the run being resumed")
    ck = json.loads((run_dir / "checkpoint.json").read_text())
    step = ck["step"]
    fb = load_filterbank(run_dir / "current.json")
    steps = []
    with open(run_dir / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    pairs = {}
    with open(run_dir / "diagnostics.jsonl") as fh:
        for line in fh:
            d = json.loads(line)
            pairs.setdefault(d.pop("step"), []).append(d)
    for r in rows[:step]:
        s = {"step": int(r["step"]), "batch_size": int(r["batch_size"]), "loss": float(r["loss"]),
             "admm_iters": float(r["admm_iters"]), "n_used": int(r["n_used"]),
             "flagged": r["flagged"] == "True", "grad_norm": float(r["grad_norm"])}
        s["pairs"] = pairs.get(s["step"], [])
        steps.append(s)
    history = [(int(p.stem.split("_")[1]), load_filterbank(p).filters)
               for p in sorted((run_dir / "snapshots").glob("theta_*.json"))]
    history = [h for h in history if h[0] <= step]
    warm = {i: _load_state(run_dir / "warm" / f"pair_{i:04d}") for i in ck["warm_pairs"]}
    run = TrainRun(config=cfg, final_fb=fb, theta_history=history,
                   loss_log=[s["loss"] for s in steps], steps=steps, warm_cache=warm)
    return run, fb, step, ck["epoch"], ck["pos"]


# supervised ------------------------------------------------------------

def sgd_train(dataset: Dataset, cfg: TrainConfig, init_fb: FilterBank | None = None,
              run_dir=None, resume: bool = False, callback=None) -> TrainRun:
    """Stochastic gradient descent on the supervised denoising loss.

    Batches are drawn without replacement from a seeded per-epoch shuffle; an
    epoch's leftover pairs that cannot fill a batch are skipped. Pairs whose
    KKT solve fails are left out of the step and the gradient is averaged
    over the remaining ones. Each pair keeps its last ADMM state as the next
    warm start.

    With ``run_dir`` the run is checkpointed every ``cfg.snapshot_every``
    steps; ``resume=True`` continues from the last checkpoint and produces
    the same result as an uninterrupted run.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    T, N = len(dataset), dataset.clean.shape[-1]
    if max(b for b, _ in cfg.schedule) > T:
        raise ValueError(f"batch size exceeds the {T} training pairs")
    dcfg = replace(cfg.denoise, beta=cfg.beta, warm=None)
    batch_sizes = np.repeat([b for b, _ in cfg.schedule], [n for _, n in cfg.schedule])
    run_dir = None if run_dir is None else Path(run_dir)

    if resume:
        if run_dir is None:
            raise ValueError("resume needs a run directory")
        run, fb, start, epoch, pos = _resume(run_dir, cfg)
    else:
        fb = init_fb.copy() if init_fb is not None else initial_filterbank(cfg.init)
        run = TrainRun(config=cfg, final_fb=fb)
        start, epoch, pos = 0, 0, 0
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    order = _epoch_order(cfg.seed, epoch, T)
    n_pix = N * N

    for step in range(start, len(batch_sizes)):
        if step % cfg.snapshot_every == 0:
            if not run.theta_history or run.theta_history[-1][0] != step:
                run.theta_history.append((step, fb.filters.copy()))
            if run_dir is not None and step > start:
                _checkpoint(run_dir, run, fb, step, epoch, pos)
        bs = int(batch_sizes[step])
        if pos + bs > T:
            epoch, pos = epoch + 1, 0
            order = _epoch_order(cfg.seed, epoch, T)
        idx = order[pos:pos + bs]
        pos += bs

        X, Y = dataset.clean[idx], dataset.noisy[idx]
        warm = None
        if cfg.warm_start:
            warm = AdmmState.stack([run.warm_cache[i] if i in run.warm_cache
                                    else _cold_state(fb, dataset.noisy[i], dcfg) for i in idx])
        res = loss_and_gradient(fb, X, Y, cfg.beta, warm=warm, denoise_cfg=dcfg,
                                kkt_tol=cfg.kkt_tol, kkt_max_iters=cfg.kkt_max_iters)
        if cfg.warm_start:
            for j, i in enumerate(idx):
                s = res.state[j]
                run.warm_cache[int(i)] = AdmmState(x=s.x, z=s.z, u=s.u, rho=s.rho)

        n_used = res.n_used
        update = np.zeros_like(fb.filters)
        if n_used:
            update = cfg.step_size * res.grad / (n_pix * n_used)
            fb = FilterBank(fb.filters - update, dict(fb.provenance))
        record = {
            "step": step,
            "batch_size": bs,
            "loss": res.loss / bs,
            "admm_iters": float(np.mean([d["admm_iters"] for d in res.diagnostics])),
            "n_used": n_used,
            "flagged": res.flagged,
            "grad_norm": float(np.linalg.norm(update)),
            "pairs": [dict(d, pair=int(i)) for d, i in zip(res.diagnostics, idx)],
        }
        run.steps.append(record)
        run.loss_log.append(record["loss"])
        if callback is not None:
            callback(step, fb, record)
        if step % 100 == 0:
            logger.info("step %d loss %.6g admm %.1f flagged %s", step, record["loss"],
                        record["admm_iters"], record["flagged"])

    fb = FilterBank(fb.filters, {"kind": "supervised", "beta": cfg.beta,
                                 "steps": len(batch_sizes), "seed": cfg.seed})
    run.final_fb = fb
    total = len(batch_sizes)
    if not run.theta_history or run.theta_history[-1][0] != total:
        run.theta_history.append((total, fb.filters.copy()))
    if run_dir is not None:
        _checkpoint(run_dir, run, fb, total, epoch, pos)
        save_filterbank(fb, run_dir / "final.json")
        (run_dir / "summary.json").write_text(json.dumps(
            {"steps": total, "flagged_steps": run.n_flagged, "unreliable": run.unreliable,
             "final_loss": run.loss_log[-1] if run.loss_log else None}, indent=2))
    if run.unreliable:
        logger.warning("%d of %d steps had inaccurate gradients; run marked unreliable",
                       run.n_flagged, len(run.steps))
    return run


# unsupervised ----------------------------------------------------------

def _patches(images, f) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    return sliding_window_view(images, (f, f), axis=(-2, -1)).reshape(-1, f * f)


def sparsity_objective(F, patches) -> float:
    """``sum_t ||W_F x_t||_1`` written through the patch matrix."""
    return float(np.sum(np.abs(patches @ F.T)))


@dataclass
class UnsupervisedResult:
    fb: FilterBank
    F: np.ndarray
    objective: list
    init_objective: float
    best_iter: int
    dropped: int


def unsupervised_train(images, iters: int = 200, rho: float = 1.0, f: int = 3,
                       beta: float = 1.0, return_info: bool = False):
    """Learn ``f*f`` orthonormal filters that sparsify ``images``.

    ADMM on ``min beta ||P F^T||_1 s.t. F F^T = I`` with ``Z = P F^T``, where
    ``P`` stacks every ``f x f`` patch. The ``F`` update is an orthogonal
    Procrustes problem solved by SVD. Starts from the full DCT basis and
    keeps the iterate with the smallest objective. The filter closest to the
    constant is dropped from the returned bank.

    ``beta`` does not move the minimizer but sets the soft threshold
    ``beta / rho``; passing the reconstruction weight found for the DCT bank
    puts the threshold on the scale of the patch coefficients.
    """
    if isinstance(images, Dataset):
        images = images.clean
    if iters < 0 or not rho > 0 or not beta > 0:
        raise ValueError("need iters >= 0, rho > 0 and beta > 0")
    P = _patches(images, f)
    F = make_dct_filterbank(include_dc=True, size=f).matrix.copy()
    Z = P @ F.T
    U = np.zeros_like(Z)
    history = [sparsity_objective(F, P)]
    best_F, best_obj, best_iter = F.copy(), history[0], 0
    for it in range(1, iters + 1):
        M = (Z - U).T @ P
        if not np.all(np.isfinite(M)):
            raise FloatingPointError(f"non-finite Procrustes target at iteration {it}")
        try:
            A, _, Bt = np.linalg.svd(M)
        except np.linalg.LinAlgError as err:
            raise RuntimeError(f"SVD failed in the Procrustes update at iteration {it}") from err
        F = A @ Bt
        PF = P @ F.T
        Z = soft_threshold(PF + U, beta / rho)
        U += PF - Z
        history.append(sparsity_objective(F, P))
        if history[-1] < best_obj:
            best_F, best_obj, best_iter = F.copy(), history[-1], it
    # the constant direction is (1, ..., 1) / f
    dc = int(np.argmax(np.abs(best_F @ np.full(f * f, 1.0 / f))))
    keep = np.delete(best_F, dc, axis=0)
    fb = FilterBank.from_matrix(keep, {"kind": "unsupervised", "iters": iters, "rho": rho,
                                       "beta": beta, "best_iter": best_iter})
    if return_info:
        return UnsupervisedResult(fb, best_F, history, history[0], best_iter, dc)
    return fb


# beta sweeps -----------------------------------------------------------

def default_beta_grid(n: int = 15, lo: float = 1e-3, hi: float = 1.0) -> np.ndarray:
    return np.geomspace(lo, hi, n)


@dataclass
class SweepResult:
    best_beta: float
    table: list  # (beta, snr) sorted by beta

    @property
    def best_snr(self):
        return dict(self.table)[self.best_beta]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["beta", "snr_db"])
        for beta, value in self.table:
            writer.writerow([repr(float(beta)), "inf" if not isinstance(value, float) else repr(value)])
        return buf.getvalue()


def beta_sweep(operator, dataset: Dataset, grid=None, cfg: DenoiseConfig | None = None,
               refine: int = 0) -> SweepResult:
    """Denoise every training pair for each ``beta`` and keep the best SNR.

    ``refine`` adds that many log-spaced values between the neighbours of
    the best grid point and re-selects.
    """
    fb = resolve_operator(operator)
    grid = default_beta_grid() if grid is None else np.atleast_1d(np.asarray(grid, dtype=float))
    if grid.size == 0 or np.any(grid < 0):
        raise ValueError("beta grid must be nonempty and nonnegative")
    cfg = cfg or DenoiseConfig()
    results = {}

    def run(betas):
        for beta in betas:
            beta = float(beta)
            if beta not in results:
                x = admm_denoise(fb, dataset.noisy, cfg, beta=beta, warm=None).x
                results[beta] = snr(x, dataset.clean)

    def best():
        return max(sorted(results), key=lambda b: results[b])

    run(grid)
    if refine > 0 and len(results) > 1:
        betas = sorted(results)
        i = betas.index(best())
        lo = betas[max(i - 1, 0)]
        hi = betas[min(i + 1, len(betas) - 1)]
        if lo > 0:
            run(np.geomspace(lo, hi, refine + 2)[1:-1])
        else:
            run(np.linspace(lo, hi, refine + 2)[1:-1])
    table = sorted(results.items())
    return SweepResult(best_beta=best(), table=table)
