import pytest

from pyramid_adv.costs import CostLedger, GENERATION, TRAIN, cost_table, expected_cost, format_cost_table


class TestExpectedCost:
    def test_baseline_is_one_unit(self):
        r = expected_cost("baseline")
        assert (r.gen_passes_per_step, r.train_forward_units, r.train_backward_units) == (0.0, 0.5, 0.5)
        assert r.total_units_per_step == 1.0

    def test_sample_wise_ladder_is_k_plus_two(self):
        for k in range(1, 6):
            assert expected_cost("pat", k).total_units_per_step == k + 2
        # five-step training runs at seven times the standard cost,
        # two-step at four, one-step at three
        assert expected_cost("pat", 5).relative_cost == 7.0
        assert expected_cost("pat", 2).total_units_per_step == 4.0
        assert expected_cost("pat", 1).total_units_per_step == 3.0

    def test_universal_is_two_units_with_zero_generation(self):
        r = expected_cost("upat")
        assert r.gen_passes_per_step == 0.0
        assert r.total_units_per_step == 2.0
        assert expected_cost("upat_flat").total_units_per_step == 2.0
        assert expected_cost("upat_no_clean").total_units_per_step == 1.0

    def test_savings_arithmetic(self):
        five = expected_cost("pat", 5).total_units_per_step
        one = expected_cost("pat", 1).total_units_per_step
        upat = expected_cost("upat").total_units_per_step
        assert (five - upat) / five == 5 / 7
        assert (one - upat) / one == pytest.approx(1 / 3, abs=0)

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            expected_cost("fgsm")
        with pytest.raises(ValueError):
            expected_cost("pat", 0)


class TestCostLedger:
    def test_full_batch_step_units_are_exact(self):
        ledger = CostLedger(base_batch_size=128)
        ledger.record_forward(128)
        ledger.record_backward(128)
        assert ledger.units() == 1.0
        ledger.record_forward(256)
        ledger.record_backward(256)
        assert ledger.units() == 3.0

    def test_categories_are_separate(self):
        ledger = CostLedger(base_batch_size=64)
        ledger.record_forward(64, GENERATION)
        ledger.record_backward(64, GENERATION)
        ledger.record_forward(128, TRAIN)
        ledger.record_backward(128, TRAIN)
        assert ledger.units(GENERATION) == 1.0
        assert ledger.units(TRAIN) == 2.0
        assert ledger.units() == 3.0

    def test_half_units_from_forward_only(self):
        ledger = CostLedger(base_batch_size=32)
        ledger.record_forward(32)
        assert ledger.units() == 0.5

    def test_snapshot_restore(self):
        ledger = CostLedger(base_batch_size=8)
        ledger.record_forward(8)
        snap = ledger.snapshot()
        ledger.record_forward(8)
        ledger.restore(snap)
        assert ledger.units() == 0.5

    def test_rejects_bad_base(self):
        with pytest.raises(ValueError):
            CostLedger(base_batch_size=0)


def test_table_covers_all_methods():
    rows = cost_table()
    names = [r.method for r in rows]
    assert names[0] == "baseline"
    assert "pat(k=5)" in names and "upat" in names and "upat_no_clean" in names
    text = format_cost_table(rows)
    assert "7.0" in text and "2.0" in text
