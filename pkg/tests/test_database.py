import math

from src.database import SweepLedger


def row(status="completed", efficiency=12.5, robustness=9.0, error=""):
    return {"arm": "alpha", "alpha": 0.2, "beta": 0.2, "seed": 1, "status": status,
            "efficiency": efficiency, "robustness": robustness, "error": error}


def test_record_and_get(tmp_path):
    ledger = SweepLedger(tmp_path / "sweep.db")
    assert ledger.get("a0.2_b0.2_s1") is None
    ledger.record("a0.2_b0.2_s1", row(), run_dir="cells/a0.2_b0.2_s1")
    cell = ledger.get("a0.2_b0.2_s1")
    assert cell.status == "completed"
    assert cell.efficiency == 12.5
    assert cell.error is None
    assert cell.run_dir == "cells/a0.2_b0.2_s1"


def test_record_updates_in_place(tmp_path):
    ledger = SweepLedger(tmp_path / "sweep.db")
    ledger.record("k", row(status="failed", efficiency=math.nan, robustness=math.nan, error="boom"))
    ledger.record("k", row())
    cells = ledger.cells()
    assert len(cells) == 1
    assert cells[0].status == "completed"
    assert cells[0].error is None


def test_ledger_survives_reopen(tmp_path):
    SweepLedger(tmp_path / "sweep.db").record("k1", row())
    SweepLedger(tmp_path / "sweep.db").record("k2", row(status="failed", error="boom"))
    ledger = SweepLedger(tmp_path / "sweep.db")
    assert [c.cell_key for c in ledger.cells()] == ["k1", "k2"]
    assert [c.cell_key for c in ledger.cells(status="failed")] == ["k2"]
