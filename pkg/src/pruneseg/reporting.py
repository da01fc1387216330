"""Human- and machine-readable views of the pruning run: the branch-state
grid of a checkpoint and the per-epoch branch-state matrix rebuilt from an
event log."""

from __future__ import annotations

from typing import Optional

STATE_GLYPH = {"A": "#", "M": "o", "P": "."}


def branch_grid_text(descriptor: dict, counts: Optional[dict] = None) -> str:
    """Aligned text grid: one row per PRM, one column per branch kernel.

    '#' retained (active), 'o' masked, '.' pruned.
    """
    kernels = descriptor["kernels"]
    prm_ids = descriptor["prm_ids"]
    states = descriptor["branch_states"]
    header_cells = ["x".join(str(e) for e in k) for k in kernels]
    id_width = max(len(i) for i in prm_ids) + 1
    col_width = max(len(c) for c in header_cells) + 1
    lines = []
    lines.append(f"depth={descriptor['depth']} channels={descriptor['channels']} "
                 f"classes={descriptor['num_classes']} variant={descriptor['variant']}")
    lines.append(" " * id_width + "".join(c.rjust(col_width) for c in header_cells))
    for pid, row in zip(prm_ids, states):
        cells = "".join(STATE_GLYPH[s].rjust(col_width) for s in row)
        lines.append(pid.ljust(id_width) + cells)
    lines.append("legend: # active, o masked, . pruned")
    if counts:
        lines.append(f"params effective={counts['effective']} masked={counts['masked']} "
                     f"total={counts['total']}")
    return "\n".join(lines)


def timeline_from_events(events: list[dict], total_epochs: Optional[int] = None) -> dict:
    """Replay an event log into a dense per-epoch branch-state matrix.

    The log's leading Init entry declares the PRM layout and starting states;
    Mask/Restore/Commit entries flip the named (prm, branch) slots from their
    epoch onward.
    """
    if not events or events[0].get("event") != "Init":
        raise ValueError("event log must start with an Init entry")
    init = events[0]
    prm_ids: list[str] = init["prm_ids"]
    kernels = init["kernels"]
    states = {pid: list(init["states"][i]) if "states" in init
              else ["A"] * len(kernels[i])
              for i, pid in enumerate(prm_ids)}
    flips = {"Mask": "M", "Restore": "A", "Commit": "P"}

    last_epoch = max((e["epoch"] for e in events[1:]), default=-1)
    if total_epochs is not None:
        last_epoch = max(last_epoch, total_epochs - 1)
    per_epoch = []
    by_epoch: dict[int, list[dict]] = {}
    for e in events[1:]:
        by_epoch.setdefault(e["epoch"], []).append(e)
    for epoch in range(0, last_epoch + 1):
        for e in by_epoch.get(epoch, ()):
            new_state = flips.get(e["event"])
            if new_state is None:
                continue
            for pid, bi in e["masked_set"]:
                states[pid][bi] = new_state
        per_epoch.append({"epoch": epoch,
                          "states": [list(states[pid]) for pid in prm_ids]})
    return {"prm_ids": prm_ids, "kernels": kernels, "epochs": per_epoch}
