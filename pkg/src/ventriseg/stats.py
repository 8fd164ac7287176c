"""Experiment protocols: repeated runs with t-tests, best-validation model
selection, k-fold cross-validation, training-set-size sweeps and the
pattern-network depth ablation."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import infer as infer_mod
from . import metrics as metrics_mod
from . import nets as nets_mod
from . import train as train_mod
from .grid import Case, DatasetSplit
from .nets import NetworkSpec
from .train import TrainConfig

DEFAULT_RUNS = 5
SIGNIFICANCE_LEVEL = 0.05


def ttest(a, b) -> float:
    """Two-sided two-sample Student's t-test with pooled variance.

    Degenerate samples (zero pooled variance) give p = 1 for equal means
    and p = 0 (with a warning) for unequal means.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    na, nb = a.size, b.size
    df = na + nb - 2
    pooled_var = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / df
    diff = a.mean() - b.mean()
    if pooled_var == 0:
        if diff == 0:
            return 1.0
        warnings.warn("degenerate t-test: zero pooled variance with unequal means")
        return 0.0
    t = diff / math.sqrt(pooled_var * (1.0 / na + 1.0 / nb))
    from scipy import stats as sps

    return float(2.0 * sps.t.sf(abs(t), df))


@dataclass
class RunOutcome:
    """Summary of one training run of a protocol cell."""

    run_index: int
    seed: int
    val_dice: float
    test_dice: float
    test_mad: float
    train_dice: float = float("nan")
    records: list = field(default_factory=list)
    checkpoint: object | None = None


@dataclass
class RunSet:
    """All repetitions of one experimental configuration."""

    experiment_id: str
    runs: list[RunOutcome] = field(default_factory=list)

    def values(self, key: str) -> list[float]:
        return [getattr(r, key) for r in self.runs]


def select_best(runs: RunSet) -> RunOutcome:
    """The run with the highest validation Dice; ties go to the lowest index."""
    if not runs.runs:
        raise ValueError("empty run set")
    best = runs.runs[0]
    for r in runs.runs[1:]:
        if r.val_dice > best.val_dice:
            best = r
    return best


def derive_seed(experiment_seed: int, *indices: int) -> int:
    """Deterministic per-run seed from the experiment seed and cell indices."""
    ss = np.random.SeedSequence(entropy=experiment_seed, spawn_key=tuple(indices))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# The real pipeline runner (train -> infer -> evaluate); protocol drivers
# accept any callable with this signature so tests can substitute stubs.
# ---------------------------------------------------------------------------

def make_pipeline_runner(infer_kwargs: dict | None = None,
                         evaluate_train: bool = False):
    """Build a runner: (train, val, test cases, spec, cfg, seed, idx) -> RunOutcome."""
    infer_kwargs = dict(infer_kwargs or {})

    def _mean_case_metrics(net, cases, cfg):
        dices, mads, records = [], [], []
        for case in cases:
            if net.spec.family == "unet2d":
                _, pred = infer_mod.segment_2d(
                    net, case.volume, batch_slices=cfg.val_batch_slices)
            else:
                _, pred = infer_mod.segment_3d(
                    net, case.volume, extent=cfg.window_extent,
                    overlap=cfg.window_overlap)
            rec = metrics_mod.evaluate_case(case.labels, pred,
                                            case_id=case.case_id, tag=case.tag)
            records.append(rec)
            dices.append(rec.dice)
            mads.append(rec.mad_mm)
        return float(np.mean(dices)), float(np.mean(mads)), records

    def runner(train_cases, val_cases, test_cases, net_spec: NetworkSpec,
               cfg: TrainConfig, seed: int, run_index: int) -> RunOutcome:
        cfg = replace(cfg, seed=seed)
        net = nets_mod.build(net_spec, seed=seed)
        best, history = train_mod.train(net, (train_cases, val_cases), cfg)
        best_net = best.build_network()
        test_dice, test_mad, records = _mean_case_metrics(best_net, test_cases, cfg)
        train_dice = float("nan")
        if evaluate_train:
            train_dice, _, _ = _mean_case_metrics(best_net, train_cases, cfg)
        return RunOutcome(
            run_index=run_index,
            seed=seed,
            val_dice=history.best_val_dice,
            test_dice=test_dice,
            test_mad=test_mad,
            train_dice=train_dice,
            records=records,
            checkpoint=best,
        )

    return runner


def repeat_runs(runner, train_cases, val_cases, test_cases, net_spec,
                cfg: TrainConfig, experiment_id: str, experiment_seed: int,
                n_runs: int = DEFAULT_RUNS, cell: tuple[int, ...] = ()) -> RunSet:
    """Train the same configuration ``n_runs`` times with derived seeds."""
    runs = []
    for i in range(n_runs):
        seed = derive_seed(experiment_seed, *cell, i)
        runs.append(runner(train_cases, val_cases, test_cases, net_spec, cfg,
                           seed, i))
    return RunSet(experiment_id=experiment_id, runs=runs)


def compare_runsets(a: RunSet, b: RunSet) -> dict:
    """Mean/std and t-test p-values (Dice and MAD) for two run sets."""
    out = {"a": a.experiment_id, "b": b.experiment_id}
    for key, label in (("test_dice", "dice"), ("test_mad", "mad")):
        va, vb = a.values(key), b.values(key)
        out[f"{label}_a_mean"] = float(np.mean(va))
        out[f"{label}_a_std"] = float(np.std(va, ddof=1))
        out[f"{label}_b_mean"] = float(np.mean(vb))
        out[f"{label}_b_std"] = float(np.std(vb, ddof=1))
        out[f"p_{label}"] = ttest(va, vb)
    return out


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def make_folds(cases: list[Case], n_folds: int, dilated_per_fold: int,
               normal_per_fold: int, rng: np.random.Generator) -> list[list[str]]:
    """Randomly assign case ids to folds with fixed per-class counts."""
    normal = [c.case_id for c in cases if c.tag == "normal"]
    dilated = [c.case_id for c in cases if c.tag == "dilated"]
    if len(normal) < n_folds * normal_per_fold or len(dilated) < n_folds * dilated_per_fold:
        raise ValueError(
            f"need {n_folds}x({normal_per_fold} normal + {dilated_per_fold} dilated), "
            f"have {len(normal)} normal / {len(dilated)} dilated")
    normal = list(rng.permutation(normal))
    dilated = list(rng.permutation(dilated))
    folds = []
    for k in range(n_folds):
        fold = dilated[k * dilated_per_fold:(k + 1) * dilated_per_fold]
        fold += normal[k * normal_per_fold:(k + 1) * normal_per_fold]
        folds.append(sorted(fold))
    return folds


def crossval(cases: list[Case], folds: list[list[str]], val_cases: list[Case],
             net_spec: NetworkSpec, cfg: TrainConfig, runner=None,
             runs_per_fold: int = DEFAULT_RUNS, experiment_seed: int = 0) -> list[dict]:
    """Each fold serves once as the test set; the rest train.

    The validation set is fixed and held out of every fold.  Returns one
    row per fold with mean/std Dice and MAD over the repetitions.
    """
    if runner is None:
        runner = make_pipeline_runner()
    by_id = {c.case_id: c for c in cases}
    seen: set[str] = set()
    for fold in folds:
        overlap = seen & set(fold)
        if overlap:
            raise ValueError(f"case(s) {sorted(overlap)} appear in multiple folds")
        seen.update(fold)
        for cid in fold:
            if cid not in by_id:
                raise ValueError(f"fold references unknown case {cid!r}")
    val_ids = {c.case_id for c in val_cases}
    if seen & val_ids:
        raise ValueError("validation cases may not appear in any fold")

    rows = []
    for k, fold in enumerate(folds):
        test_cases = [by_id[cid] for cid in fold]
        train_cases = [by_id[cid] for cid in seen - set(fold)
                       if cid in by_id]
        train_cases.sort(key=lambda c: c.case_id)
        runset = repeat_runs(runner, train_cases, val_cases, test_cases,
                             net_spec, cfg, f"fold{k + 1}", experiment_seed,
                             n_runs=runs_per_fold, cell=(k,))
        dices = runset.values("test_dice")
        mads = runset.values("test_mad")
        rows.append({
            "fold": k + 1,
            "dice_mean": float(np.mean(dices)),
            "dice_std": float(np.std(dices, ddof=1)) if len(dices) > 1 else 0.0,
            "mad_mean": float(np.mean(mads)),
            "mad_std": float(np.std(mads, ddof=1)) if len(mads) > 1 else 0.0,
        })
    return rows


# ---------------------------------------------------------------------------
# Training-set-size sweep
# ---------------------------------------------------------------------------

def training_size_sweep(pool: list[Case], sizes, val_cases: list[Case],
                        test_cases: list[Case], net_spec: NetworkSpec,
                        cfg: TrainConfig, runner=None, repetitions: int = 10,
                        experiment_seed: int = 0) -> list[dict]:
    """Optimize with randomly drawn training subsets of each size.

    Each size is repeated ``repetitions`` times with fresh random draws;
    each size's test-Dice sample is compared against the largest size's by
    t-test (the largest size against itself gives p = 1).
    """
    sizes = sorted(int(s) for s in sizes)
    if sizes[-1] > len(pool):
        raise ValueError(f"size {sizes[-1]} exceeds pool of {len(pool)} cases")
    if runner is None:
        runner = make_pipeline_runner(evaluate_train=True)
    rng = np.random.default_rng(derive_seed(experiment_seed, 97))
    samples: dict[int, dict] = {}
    for si, size in enumerate(sizes):
        train_d, test_d = [], []
        for rep in range(repetitions):
            idx = rng.choice(len(pool), size=size, replace=False)
            subset = [pool[i] for i in sorted(idx)]
            seed = derive_seed(experiment_seed, si, rep)
            out = runner(subset, val_cases, test_cases, net_spec, cfg, seed, rep)
            train_d.append(out.train_dice)
            test_d.append(out.test_dice)
        samples[size] = {"train": train_d, "test": test_d}
    baseline = samples[sizes[-1]]["test"]
    rows = []
    for size in sizes:
        s = samples[size]
        rows.append({
            "size": size,
            "train_dice_mean": float(np.nanmean(s["train"])),
            "train_dice_std": float(np.nanstd(s["train"], ddof=1)) if repetitions > 1 else 0.0,
            "test_dice_mean": float(np.mean(s["test"])),
            "test_dice_std": float(np.std(s["test"], ddof=1)) if repetitions > 1 else 0.0,
            "p_value": ttest(s["test"], baseline),
        })
    return rows


# ---------------------------------------------------------------------------
# Depth ablation (with/without the pattern branch across depth levels)
# ---------------------------------------------------------------------------

@dataclass
class AblationGrid:
    """family x depth x {plain, cppn} run sets plus per-cell comparisons."""

    cells: dict = field(default_factory=dict)  # (family, depth, use_cppn) -> RunSet
    rows: list[dict] = field(default_factory=list)


def depth_ablation(train_cases, val_cases, test_cases, grid_spec,
                   cfg: TrainConfig, runner=None, n_runs: int = DEFAULT_RUNS,
                   experiment_seed: int = 0) -> AblationGrid:
    """Train every (family, depth, pattern on/off) cell and compare.

    ``grid_spec`` maps a family name to ``(depth_levels, base_spec)`` where
    ``base_spec`` is a NetworkSpec template whose family/depth/use_cppn
    fields are overridden per cell.
    """
    if runner is None:
        runner = make_pipeline_runner()
    grid = AblationGrid()
    counts = set()
    for fi, (family, (levels, base_spec)) in enumerate(sorted(grid_spec.items())):
        for di, depth in enumerate(levels):
            cell_sets = {}
            for ci, use_cppn in enumerate((False, True)):
                spec = replace(base_spec, family=family, depth_level=depth,
                               use_cppn=use_cppn)
                tag = "cppn" if use_cppn else "no_cppn"
                runset = repeat_runs(
                    runner, train_cases, val_cases, test_cases, spec, cfg,
                    f"{family}-L{spec.nominal_layers}-{tag}", experiment_seed,
                    n_runs=n_runs, cell=(fi, di, ci))
                grid.cells[(family, depth, use_cppn)] = runset
                cell_sets[use_cppn] = runset
                counts.add(len(runset.runs))
            plain, patt = cell_sets[False], cell_sets[True]
            spec = replace(base_spec, family=family, depth_level=depth)
            grid.rows.append({
                "network": family,
                "layers": spec.nominal_layers,
                "dice_no_cppn_mean": float(np.mean(plain.values("test_dice"))),
                "dice_no_cppn_std": float(np.std(plain.values("test_dice"), ddof=1)),
                "dice_cppn_mean": float(np.mean(patt.values("test_dice"))),
                "dice_cppn_std": float(np.std(patt.values("test_dice"), ddof=1)),
                "p_dice": ttest(plain.values("test_dice"), patt.values("test_dice")),
                "mad_no_cppn_mean": float(np.mean(plain.values("test_mad"))),
                "mad_no_cppn_std": float(np.std(plain.values("test_mad"), ddof=1)),
                "mad_cppn_mean": float(np.mean(patt.values("test_mad"))),
                "mad_cppn_std": float(np.std(patt.values("test_mad"), ddof=1)),
                "p_mad": ttest(plain.values("test_mad"), patt.values("test_mad")),
            })
    if len(counts) > 1:
        raise RuntimeError(f"unequal run counts across cells: {sorted(counts)}")
    # deeper rows first, per family (presentation convention)
    grid.rows.sort(key=lambda r: (r["network"], -r["layers"]))
    return grid


def write_rows(path, rows, fieldnames=None) -> None:
    """Write a list of uniform dict rows as CSV."""
    if not rows:
        raise ValueError("no rows to write")
    fieldnames = fieldnames or list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow(row)


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def plot_size_sweep(rows, path) -> None:
    """Mean train/test Dice against training-set size."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sizes = [r["size"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(sizes, [r["train_dice_mean"] for r in rows],
                yerr=[r["train_dice_std"] for r in rows], marker="o",
                label="training set")
    ax.errorbar(sizes, [r["test_dice_mean"] for r in rows],
                yerr=[r["test_dice_std"] for r in rows], marker="s",
                label="test set")
    ax.set_xlabel("training-set size")
    ax.set_ylabel("mean Dice")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(rows, path) -> None:
    """Dice and MAD against layer count, with and without the pattern branch."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    families = sorted({r["network"] for r in rows})
    fig, axes = plt.subplots(len(families), 2,
                             figsize=(9, 3.5 * len(families)), squeeze=False)
    for i, family in enumerate(families):
        fam_rows = sorted([r for r in rows if r["network"] == family],
                          key=lambda r: r["layers"])
        layers = [r["layers"] for r in fam_rows]
        for j, metric in enumerate(("dice", "mad")):
            ax = axes[i][j]
            for variant, marker in (("no_cppn", "o"), ("cppn", "s")):
                ax.errorbar(
                    layers,
                    [r[f"{metric}_{variant}_mean"] for r in fam_rows],
                    yerr=[r[f"{metric}_{variant}_std"] for r in fam_rows],
                    marker=marker, label=variant.replace("_", " "))
            ax.set_title(f"{family}: {metric}")
            ax.set_xlabel("layers")
            ax.grid(alpha=0.3)
            ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
