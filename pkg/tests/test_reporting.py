import pytest

from pruneseg.network import ModelConfig, build_network
from pruneseg.reporting import branch_grid_text, timeline_from_events

MINI = ModelConfig(2, (4, 8), ((1, 1, 1), (1, 3, 3), (3, 1, 3)), 2)


def init_event(net, p=1):
    return {"epoch": -1, "event": "Init", "p": p, "masked_set": [],
            "prm_ids": [prm.identifier for prm in net.prms],
            "kernels": [[list(b.spec.kernel) for b in prm.branches] for prm in net.prms],
            "states": [prm.states() for prm in net.prms]}


def ev(epoch, kind, masked_set, p=1):
    return {"epoch": epoch, "event": kind, "p": p,
            "masked_set": masked_set, "fd": 0.5, "best_fd": 0.5}


def test_grid_text_rows_and_legend():
    net = build_network(MINI, seed=0)
    net.prms[1].branches[2].state = net.prms[1].branches[2].state.__class__("M")
    text = branch_grid_text(net.descriptor(), net.parameter_counts())
    lines = text.splitlines()
    assert any(ln.startswith("enc_1") for ln in lines)
    assert any(ln.startswith("bn") for ln in lines)
    assert any(ln.startswith("dec_1") for ln in lines)
    assert "1x1x1" in text and "3x1x3" in text
    assert "o" in [c for ln in lines if ln.startswith("bn") for c in ln]
    assert "legend" in text
    assert "params effective" in text


def test_timeline_replay_mask_commit_restore():
    net = build_network(MINI, seed=0)
    events = [
        init_event(net),
        ev(3, "Mask", [["enc_1", 0], ["bn", 2]]),
        ev(7, "Commit", [["enc_1", 0], ["bn", 2]]),
        ev(12, "Mask", [["enc_1", 1]]),
        ev(15, "Restore", [["enc_1", 1]]),
    ]
    doc = timeline_from_events(events, total_epochs=18)
    assert doc["prm_ids"] == ["enc_1", "bn", "dec_1"]
    assert len(doc["epochs"]) == 18
    by_epoch = {e["epoch"]: e["states"] for e in doc["epochs"]}
    assert by_epoch[2] == [["A", "A", "A"]] * 3
    assert by_epoch[3][0] == ["M", "A", "A"]
    assert by_epoch[3][1] == ["A", "A", "M"]
    assert by_epoch[7][0] == ["P", "A", "A"]
    assert by_epoch[12][0] == ["P", "M", "A"]
    assert by_epoch[15][0] == ["P", "A", "A"]
    assert by_epoch[17][1] == ["A", "A", "P"]


def test_timeline_requires_init():
    with pytest.raises(ValueError):
        timeline_from_events([ev(0, "Mask", [])])


def test_timeline_without_total_epochs_ends_at_last_event():
    net = build_network(MINI, seed=0)
    doc = timeline_from_events([init_event(net), ev(4, "Mask", [["bn", 0]])])
    assert len(doc["epochs"]) == 5
