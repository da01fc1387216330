"""Block-wise branch pruning and the progressive mask/commit/restore controller.

Pruning proceeds per module and per round: the controller waits until the
decoupling losses stop improving, then masks, per PRM, the branch subset of
size p whose removal perturbs the module's cached calibration outputs least
(Frobenius norm, exhaustive over all subsets).  Masking is reversible; once
the model reconverges the controller either commits the mask permanently or
restores it and retries with a finer step.  p never increases, and p = 0
disables pruning for good.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .errors import DataError, LifecycleError, NumericError
from .network import Branch, BranchState, Network, capture_prm_io, eb_forward

MAINTAINED = "Maintained"
OVERPRUNED = "OverPruned"


# ---------------------------------------------------------------------------
# Calibration cache


@dataclass
class CalibrationCache:
    seed: int
    sample_ids: list[int]
    pairs: dict[str, list[tuple[np.ndarray, np.ndarray]]]  # prm id -> [(x_l, y_l)]


def build_calibration_cache(net: Network, dataset, count: int, seed: int) -> CalibrationCache:
    """Deterministically sample ``count`` patches (with replacement) and record
    every PRM's input/output during plain no-grad forward passes.

    ``dataset`` is either a sequence of Cin,D,H,W arrays or an object with
    ``__len__`` and ``extract(index, rng) -> array`` for seeded patch cropping.
    """
    n = len(dataset)
    if n == 0:
        raise DataError("calibration dataset is empty")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    ids = rng.integers(0, n, size=count)
    pairs: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for idx in ids:
        if hasattr(dataset, "extract"):
            patch = dataset.extract(int(idx), rng)
        else:
            patch = np.asarray(dataset[int(idx)])
        x = ag.tensor(patch[None].astype(net.dtype, copy=False))
        with ag.no_grad(), capture_prm_io() as cap:
            net.forward(x)
        for prm_id, xin, xout in cap.records:
            pairs.setdefault(prm_id, []).append((xin, xout))
    return CalibrationCache(seed=seed, sample_ids=[int(i) for i in ids], pairs=pairs)


# ---------------------------------------------------------------------------
# Block-wise subset search


@dataclass
class DiscrepancyRecord:
    prm_id: str
    subset: tuple[int, ...]
    value: float


@dataclass
class SearchResult:
    masked_set: list[tuple[str, int]]
    chosen: list[DiscrepancyRecord]
    evaluated: dict[str, int]
    skipped: list[str]


def blockwise_prune_search(net: Network, cache: CalibrationCache, p: int) -> SearchResult:
    """For every PRM independently, pick the size-p Active-branch subset whose
    masking minimizes the summed Frobenius discrepancy against the cached
    outputs; ties break toward the lexicographically smallest index tuple.

    PRMs with fewer than p+1 Active branches are skipped so that at least one
    branch always survives.
    """
    if p < 1:
        raise ValueError(f"prune step must be >= 1, got {p}")
    masked_set: list[tuple[str, int]] = []
    chosen: list[DiscrepancyRecord] = []
    evaluated: dict[str, int] = {}
    skipped: list[str] = []
    for prm in net.prms:
        active = prm.active_indices()
        if len(active) <= p:
            skipped.append(prm.identifier)
            continue
        pair_list = cache.pairs.get(prm.identifier)
        if not pair_list:
            raise DataError(f"calibration cache holds no pairs for PRM {prm.identifier}")
        # per-branch weighted responses, one evaluation per (branch, pair)
        contribs = []  # [pair][branch position] -> w_i * EB_i(x)
        for xin, _ in pair_list:
            xt = ag.tensor(xin)
            with ag.no_grad():
                contribs.append([ag.multiply(eb_forward(prm.branches[i], xt),
                                             prm.branches[i].weight).data
                                 for i in active])
        best_subset = None
        best_value = None
        count = 0
        for subset in itertools.combinations(range(len(active)), p):
            count += 1
            picked = set(subset)
            value = 0.0
            for (xin, yout), outs in zip(pair_list, contribs):
                acc = xin
                for pos in range(len(active)):
                    if pos in picked:
                        continue
                    acc = acc + outs[pos]
                value += float(np.linalg.norm((acc - yout).ravel()))
            if best_value is None or value < best_value:
                best_value = value
                best_subset = subset
        evaluated[prm.identifier] = count
        indices = tuple(active[pos] for pos in best_subset)
        chosen.append(DiscrepancyRecord(prm.identifier, indices, best_value))
        masked_set.extend((prm.identifier, i) for i in indices)
    return SearchResult(masked_set, chosen, evaluated, skipped)


# ---------------------------------------------------------------------------
# Lifecycle transitions


def _resolve(net: Network, masked_set) -> list[Branch]:
    return [net.prm_by_id(pid).branches[bi] for pid, bi in masked_set]


def apply_mask(net: Network, masked_set: Sequence[tuple[str, int]]):
    branches = _resolve(net, masked_set)
    for br, (pid, bi) in zip(branches, masked_set):
        if br.state is not BranchState.ACTIVE:
            raise LifecycleError(f"cannot mask branch {bi} of {pid}: state {br.state.value}")
    for br in branches:
        br.state = BranchState.MASKED


def restore_mask(net: Network, masked_set: Sequence[tuple[str, int]]):
    branches = _resolve(net, masked_set)
    for br, (pid, bi) in zip(branches, masked_set):
        if br.state is not BranchState.MASKED:
            raise LifecycleError(f"cannot restore branch {bi} of {pid}: state {br.state.value}")
    for br in branches:
        br.state = BranchState.ACTIVE


def commit_prune(net: Network, masked_set: Sequence[tuple[str, int]]):
    branches = _resolve(net, masked_set)
    for br, (pid, bi) in zip(branches, masked_set):
        if br.state is not BranchState.MASKED:
            raise LifecycleError(f"cannot prune branch {bi} of {pid}: state {br.state.value}")
    for br in branches:
        br.free()
        br.state = BranchState.PRUNED


# ---------------------------------------------------------------------------
# Convergence and improvement checks


def _last_improvement_epoch(series: Sequence[float], floor_epoch: int) -> int:
    """Epoch of the last strict new minimum after floor_epoch; the first
    post-floor epoch always counts as an improvement."""
    start = floor_epoch + 1
    if start >= len(series):
        return len(series)  # no post-floor history yet
    best = np.inf
    last = start
    for e in range(start, len(series)):
        if series[e] < best:
            best = series[e]
            last = e
    return last


def convergence_check(tr_history: Sequence[float], rl_history: Sequence[float],
                      window: int = 10, floor_epoch: int = -1) -> bool:
    """True when neither loss has set a new minimum within the trailing
    ``window`` epochs, considering only epochs after the last pruning event."""
    t = len(tr_history) - 1
    last_tr = _last_improvement_epoch(tr_history, floor_epoch)
    last_rl = _last_improvement_epoch(rl_history, floor_epoch)
    return (t - last_tr) >= window and (t - last_rl) >= window


def improvement_check(current_fd: float, best_fd: float, threshold: float = 0.01) -> str:
    """OverPruned only when the current loss strictly exceeds best + threshold."""
    if not (np.isfinite(current_fd) and np.isfinite(best_fd)):
        raise NumericError(f"non-finite decoupling loss: current={current_fd} best={best_fd}")
    return OVERPRUNED if current_fd > best_fd + threshold else MAINTAINED


# ---------------------------------------------------------------------------
# Controller


@dataclass
class ControllerState:
    p: int
    phase: str = "Stable"  # "Stable" | "Masked"
    best_tr: float = np.inf
    best_rl: float = np.inf
    best_fd: float = np.inf
    mask_best_fd: float = np.inf
    masked_set: list[tuple[str, int]] = dc_field(default_factory=list)
    last_event_epoch: int = -1
    epochs_since_improvement: int = 0
    tr_history: list[float] = dc_field(default_factory=list)
    rl_history: list[float] = dc_field(default_factory=list)
    events: list[dict] = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return {"p": self.p, "phase": self.phase, "best_tr": self.best_tr,
                "best_rl": self.best_rl, "best_fd": self.best_fd,
                "mask_best_fd": self.mask_best_fd,
                "masked_set": [list(m) for m in self.masked_set],
                "last_event_epoch": self.last_event_epoch,
                "epochs_since_improvement": self.epochs_since_improvement,
                "tr_history": self.tr_history, "rl_history": self.rl_history,
                "events": self.events}

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerState":
        st = cls(p=d["p"], phase=d["phase"])
        st.best_tr = d["best_tr"]
        st.best_rl = d["best_rl"]
        st.best_fd = d["best_fd"]
        st.mask_best_fd = d["mask_best_fd"]
        st.masked_set = [tuple(m) for m in d["masked_set"]]
        st.last_event_epoch = d["last_event_epoch"]
        st.epochs_since_improvement = d["epochs_since_improvement"]
        st.tr_history = list(d["tr_history"])
        st.rl_history = list(d["rl_history"])
        st.events = list(d["events"])
        return st


def _event(epoch: int, kind: str, state: ControllerState, fd: float,
           best_fd: float, masked_set, **extra) -> dict:
    ev = {"epoch": epoch, "event": kind, "p": state.p,
          "masked_set": [list(m) for m in masked_set], "fd": fd, "best_fd": best_fd}
    ev.update(extra)
    return ev


def controller_step(state: ControllerState, epoch: int, tr: float, rl: float,
                    net: Network, cache_builder: Callable[[Network], CalibrationCache],
                    window: int = 10, threshold: float = 0.01) -> list[dict]:
    """One post-training-stage controller tick; mutates state and the network.

    Transition table: on convergence, a Masked phase is judged against the
    best loss recorded at mask time (commit when maintained, restore and
    decrement p otherwise); a Stable phase masks a fresh search proposal when
    the converged loss sits within the maintenance threshold of the
    historical best (the same check that judges masks: pruning is warranted
    only from a model performing at its best).  A commit may be followed by a
    new mask in the same epoch.
    """
    state.tr_history.append(float(tr))
    state.rl_history.append(float(rl))
    fd = float(tr) + float(rl)
    events: list[dict] = []

    if state.p > 0:
        last_tr = _last_improvement_epoch(state.tr_history, state.last_event_epoch)
        last_rl = _last_improvement_epoch(state.rl_history, state.last_event_epoch)
        state.epochs_since_improvement = max(0, epoch - max(last_tr, last_rl))
        converged = convergence_check(state.tr_history, state.rl_history,
                                      window, state.last_event_epoch)
        if converged and state.phase == "Masked":
            verdict = improvement_check(fd, state.mask_best_fd, threshold)
            if verdict == MAINTAINED:
                commit_prune(net, state.masked_set)
                events.append(_event(epoch, "Commit", state, fd, state.mask_best_fd,
                                     state.masked_set))
            else:
                restore_mask(net, state.masked_set)
                state.p -= 1
                events.append(_event(epoch, "Restore", state, fd, state.mask_best_fd,
                                     state.masked_set))
            state.masked_set = []
            state.mask_best_fd = np.inf
            state.phase = "Stable"
            state.last_event_epoch = epoch
            if state.p == 0:
                events.append(_event(epoch, "Terminated", state, fd, state.best_fd, [],
                                     reason="prune step reached zero"))
        if (converged and state.phase == "Stable" and state.p > 0
                and improvement_check(fd, state.best_fd, threshold) == MAINTAINED):
            cache = cache_builder(net)
            result = blockwise_prune_search(net, cache, state.p)
            if result.masked_set:
                apply_mask(net, result.masked_set)
                state.masked_set = list(result.masked_set)
                state.mask_best_fd = min(state.best_fd, fd)
                state.phase = "Masked"
                state.last_event_epoch = epoch
                events.append(_event(epoch, "Mask", state, fd, state.mask_best_fd,
                                     state.masked_set, skipped_prms=result.skipped))
            else:
                state.p = 0
                events.append(_event(epoch, "Terminated", state, fd, state.best_fd, [],
                                     reason="no PRM retains more than p active branches"))

    state.best_tr = min(state.best_tr, float(tr))
    state.best_rl = min(state.best_rl, float(rl))
    state.best_fd = min(state.best_fd, fd)
    state.events.extend(events)
    return events
