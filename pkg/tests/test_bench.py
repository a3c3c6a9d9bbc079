import numpy as np
import pytest

from comerge.bench import (
    BreakdownConfig,
    SweepConfig,
    build_strategy_mask,
    parse_config_text,
    records_to_csv,
    records_to_json,
    retained_l1,
    run_sweep,
    runtime_breakdown,
    summary_table,
    tradeoff_table,
    tradeoff_to_csv,
)
from comerge.errors import ParameterError
from comerge.layout import LayoutDescriptor, TokenSequence
from comerge.maskgen import compile_mask
from comerge.tensors import make_rng


def small_config(**overrides):
    base = dict(ratios=[0.0, 0.5], group_sizes=[4], frames=[1],
                patches_per_frame=64, special_per_frame=2, channels=8,
                layers=1, seed=0, repetitions=3)
    base.update(overrides)
    return SweepConfig(**base)


class TestSweepConfig:
    def test_defaults_fill_d_ff(self):
        assert small_config().d_ff == 32

    def test_empty_lists_rejected(self):
        with pytest.raises(ParameterError):
            small_config(ratios=[])

    def test_ratio_range_checked(self):
        with pytest.raises(ParameterError):
            small_config(ratios=[1.0])

    def test_repetitions_minimum(self):
        with pytest.raises(ParameterError):
            small_config(repetitions=2)

    def test_unknown_strategy(self):
        with pytest.raises(ParameterError):
            small_config(strategy="entropy")


class TestRunSweep:
    def test_zero_ratio_zero_error(self):
        records = run_sweep(small_config(ratios=[0.0]))
        assert len(records) == 1
        rec = records[0]
        assert rec.status == "ok"
        assert rec.retained_l1 == 0.0
        assert rec.flop_ratio == pytest.approx(1.0)

    def test_errors_finite_for_positive_ratio(self):
        records = run_sweep(small_config(ratios=[0.25, 0.5, 0.75]))
        for rec in records:
            assert rec.status == "ok"
            assert np.isfinite(rec.retained_l1)
        nonzero = [r for r in records if r.ratio > 0]
        assert all(r.flops_merged < r.flops_oracle for r in nonzero)

    def test_determinism_of_flops_and_errors(self):
        a = run_sweep(small_config())
        b = run_sweep(small_config())
        for ra, rb in zip(a, b):
            assert ra.flops_oracle == rb.flops_oracle
            assert ra.flops_merged == rb.flops_merged
            assert ra.retained_l1 == rb.retained_l1

    def test_grid_covers_all_points(self):
        records = run_sweep(small_config(ratios=[0.0, 0.5], group_sizes=[2, 4],
                                         frames=[1, 2]))
        assert len(records) == 8

    def test_failure_becomes_record(self):
        # group size that does not divide the patch count fails per point
        records = run_sweep(small_config(group_sizes=[7]))
        assert all(r.status == "failed" for r in records)
        assert all("divisible" in r.error for r in records)

    def test_analytic_ratio_monotone_in_p_and_n(self):
        records = run_sweep(small_config(ratios=[0.25, 0.5, 0.75],
                                         patches_per_frame=256))
        ratios = [r.flop_ratio for r in records]
        assert ratios[0] < ratios[1] < ratios[2]
        by_group = run_sweep(small_config(ratios=[0.5], group_sizes=[2, 4, 8],
                                          patches_per_frame=256))
        group_ratios = [r.flop_ratio for r in by_group]
        assert group_ratios[0] < group_ratios[1] < group_ratios[2]


class TestTradeoff:
    def test_strategies_compared_at_matched_length(self):
        cfg = small_config(ratios=[0.5], patches_per_frame=256, channels=16)
        rows = tradeoff_table(cfg, ["confidence", "similarity", "pick-one", "drop-all"])
        assert len(rows) == 4
        lengths = {r.merged_tokens for r in rows}
        assert len(lengths) == 1  # matched compute across strategies

    def test_zero_ratio_rows_collapse_to_zero_error(self):
        cfg = small_config(ratios=[0.0])
        rows = tradeoff_table(cfg, ["confidence", "similarity", "pick-one", "drop-all"])
        assert all(r.retained_l1 == 0.0 for r in rows)

    def test_drop_all_worse_than_average(self):
        cfg = small_config(ratios=[0.5], patches_per_frame=256, channels=16, layers=2)
        rows = tradeoff_table(cfg, ["confidence", "drop-all"])
        by = {r.strategy: r for r in rows}
        assert by["drop-all"].retained_l1 >= by["confidence"].retained_l1

    def test_bias_off_error_at_least_bias_on(self):
        rows = {}
        for bias in (True, False):
            cfg = small_config(ratios=[0.5], patches_per_frame=256,
                               channels=16, layers=2, bias=bias)
            rows[bias] = tradeoff_table(cfg, ["confidence"])[0].retained_l1
        assert rows[False] >= rows[True]

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ParameterError):
            tradeoff_table(small_config(), ["nearest"])


class TestBreakdown:
    def test_shares_sum_to_one(self):
        cfg = BreakdownConfig(frames=1, patches_per_frame=64, ratio=0.5,
                              group_size=4, channels=8, repetitions=2)
        result = runtime_breakdown(cfg)
        assert sum(result.shares.values()) == pytest.approx(1.0, abs=1e-9)
        assert set(result.seconds) == {"mask_gen", "attention", "mlp", "merge_split"}

    def test_single_token_sequence_dominated_by_blocks(self):
        # one image token, nothing merged: attention + MLP carry the time
        cfg = BreakdownConfig(frames=1, patches_per_frame=1, special_per_frame=0,
                              ratio=0.0, group_size=1, channels=8, repetitions=5)
        result = runtime_breakdown(cfg)
        assert result.shares["attention"] + result.shares["mlp"] > 0.9

    def test_dump_activations(self, tmp_path):
        from comerge import fileio
        cfg = BreakdownConfig(frames=1, patches_per_frame=16, ratio=0.5,
                              group_size=4, channels=8, repetitions=1)
        runtime_breakdown(cfg, dump_dir=tmp_path)
        pre = fileio.read_tensor(tmp_path / "pre_merge.come")
        post = fileio.read_tensor(tmp_path / "post_merge.come")
        assert pre.shape == (1, 16, 8)
        assert post.shape[1] < 16
        layout = fileio.parse_layout_header((tmp_path / "layout.txt").read_text())
        assert layout.patches_per_frame == 16


class TestRetainedL1:
    def test_ignores_merged_positions(self):
        layout = LayoutDescriptor(1, 0, 4, 2)
        mask = compile_mask(np.array([[True, False]]), layout)
        a = TokenSequence(layout=layout, tokens=np.zeros((1, 4, 1)))
        btok = np.zeros((1, 4, 1), dtype=np.float32)
        btok[0, 0] = 99.0  # merged group position: excluded
        btok[0, 2] = 1.0   # retained position: counted
        b = TokenSequence(layout=layout, tokens=btok)
        assert retained_l1(b, a, mask) == pytest.approx(0.5)


class TestOutputs:
    def test_json_and_csv_roundtrip_fields(self):
        records = run_sweep(small_config(ratios=[0.5]))
        js = records_to_json(records)
        assert js[0]["ratio"] == 0.5
        csv_text = records_to_csv(records)
        header = csv_text.splitlines()[0].split(",")
        assert "speedup" in header and "retained_l1" in header
        table = summary_table(records)
        assert "speedup" in table

    def test_tradeoff_csv(self):
        cfg = small_config(ratios=[0.5])
        rows = tradeoff_table(cfg, ["confidence"])
        text = tradeoff_to_csv(rows)
        assert text.splitlines()[0].startswith("strategy,ratio")


class TestConfigText:
    def test_repeated_and_comma_lists(self):
        cfg = parse_config_text(
            """
            # sweep over two ratios
            ratio = 0.25
            ratio = 0.5
            group = 2, 4
            frames = 1
            patches = 64
            channels = 8
            bias = off
            strategy = similarity
            """
        )
        assert cfg.ratios == [0.25, 0.5]
        assert cfg.group_sizes == [2, 4]
        assert cfg.bias is False
        assert cfg.strategy == "similarity"

    def test_unknown_key_rejected(self):
        with pytest.raises(ParameterError):
            parse_config_text("speed = 9")

    def test_bad_line_rejected(self):
        with pytest.raises(ParameterError):
            parse_config_text("just some words")


class TestStrategyMask:
    def test_merged_count_override(self):
        layout = LayoutDescriptor(1, 0, 64, 4)
        rng = make_rng(0)
        from comerge.workload import smooth_tokens
        seq = smooth_tokens(layout, 8, rng)
        mask = build_strategy_mask(seq, "confidence", 0.5, merged_count=3)
        assert mask.merged_count == 3

    def test_similarity_rejects_override(self):
        layout = LayoutDescriptor(1, 0, 64, 4)
        from comerge.workload import smooth_tokens
        seq = smooth_tokens(layout, 8, make_rng(0))
        with pytest.raises(ParameterError):
            build_strategy_mask(seq, "similarity", 0.5, merged_count=3)
