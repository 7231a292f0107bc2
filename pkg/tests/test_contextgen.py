import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsicf.contextgen import (
    DATASET_LEVEL,
    SERIES_LEVEL,
    Dataset,
    DatasetRegistry,
    MixtureSampler,
    TimeSeries,
    default_weights,
    enumerate_windows,
    load_registry,
    load_series,
    sample_contexts,
    write_jsonl,
)
from tsicf.errors import ContractError, DataError
from tsicf.model import ModelConfig
from tsicf.tokenize import TRAIN, layout_context
from tsicf.train import make_training_context


def make_dataset(name, group, lengths, seed=0, eligible=True):
    rng = np.random.default_rng(seed)
    series = tuple(TimeSeries(f"{name}-{i}", rng.standard_normal(m), group) for i, m in enumerate(lengths))
    return Dataset(name, series, group, eligible)


def four_group_registry():
    return DatasetRegistry(
        [
            make_dataset("elec", "hourly", [50, 60]),
            make_dataset("traffic", "hourly", [40]),
            make_dataset("sales", "daily", [30, 35]),
            make_dataset("web", "weekly", [25]),
            make_dataset("tourism", "monthly", [22, 23]),
            make_dataset("syn", "synthetic", [40, 40]),
        ]
    )


class TestWindows:
    def test_closed_form(self):
        assert len(enumerate_windows(np.zeros(642), 640)) == 3
        assert len(enumerate_windows(np.zeros(80), 80)) == 1

    def test_short_series(self):
        np.testing.assert_array_equal(enumerate_windows(np.zeros(10), 80), [0])

    def test_empty(self):
        with pytest.raises(DataError):
            enumerate_windows(np.zeros(0), 4)

    def test_bad_T(self):
        with pytest.raises(ContractError):
            enumerate_windows(np.zeros(4), 0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 400), st.integers(1, 400))
    def test_count(self, M, T):
        starts = enumerate_windows(np.zeros(M), T)
        assert len(starts) == (M - T + 1 if M >= T else 1)
        assert starts[0] == 0


class TestSampleContexts:
    def test_default_count(self):
        reg = DatasetRegistry([make_dataset("d", "daily", [5, 6], seed=1)])
        # T=4 gives 2 + 3 = 5 windows
        specs = sample_contexts(reg, "d", n=3, T=4)
        assert len(specs) == 20 * 5

    def test_seven_windows(self):
        reg = DatasetRegistry([make_dataset("d", "daily", [6, 7], seed=1)])
        assert len(sample_contexts(reg, "d", n=2, T=4)) == 140

    def test_series_level_shares_series(self):
        reg = DatasetRegistry([make_dataset("d", "daily", [30, 40, 50])])
        for spec in sample_contexts(reg, "d", n=5, T=10, count=200, kind=SERIES_LEVEL, seed=3):
            assert len({r.series for r in spec.refs}) == 1
            assert len(spec.refs) == 5

    def test_dataset_level_mixes_series(self):
        reg = DatasetRegistry([make_dataset("d", "daily", [30, 40, 50])])
        specs = sample_contexts(reg, "d", n=5, T=10, count=200, kind=DATASET_LEVEL, seed=3)
        assert any(len({r.series for r in s.refs}) > 1 for s in specs)

    def test_deterministic(self):
        reg = DatasetRegistry([make_dataset("d", "daily", [30, 40])])
        assert sample_contexts(reg, "d", 4, 8, count=50, seed=9) == sample_contexts(reg, "d", 4, 8, count=50, seed=9)

    def test_windows_resolve_and_tokenize(self):
        reg = four_group_registry()
        cfg = ModelConfig(T_max=24, p=4, h=4, d_model=8, n_heads=2, n_layers=1, d_ff=8, n_max=4)
        sampler = MixtureSampler(reg, 4, cfg.T_max, seed=0)
        rng = np.random.default_rng(0)
        for _ in range(300):
            spec = sampler.draw(rng)
            raw = spec.resolve(reg, cfg.T_max)
            assert all(1 <= len(r) <= cfg.T_max for r in raw)
            ctx = make_training_context(raw, cfg)
            layout_context(ctx.windows, cfg.p, TRAIN, cfg.n_max)

    def test_uniform_over_windows(self):
        # dataset-level draws should hit each of the 11 + 1 windows about equally
        reg = DatasetRegistry([make_dataset("d", "daily", [20, 5])])
        specs = sample_contexts(reg, "d", n=1, T=10, count=24000, kind=DATASET_LEVEL, seed=2)
        counts = Counter((r.series, r.start) for s in specs for r in s.refs)
        assert len(counts) == 12
        assert all(abs(c / 24000 - 1 / 12) < 0.01 for c in counts.values())


class TestMixture:
    def test_weights_default(self):
        w = default_weights(four_group_registry())
        assert w["synthetic"] == 0.1
        assert all(abs(w[g] - 0.225) < 1e-15 for g in ("hourly", "daily", "weekly", "monthly"))

    def test_single_real_group(self):
        reg = DatasetRegistry([make_dataset("e", "hourly", [30]), make_dataset("s", "synthetic", [30])])
        assert MixtureSampler(reg, 2, 8).probabilities == {"hourly": 0.9, "synthetic": 0.1}

    def test_ineligible_excluded(self):
        reg = DatasetRegistry([make_dataset("wiki", "daily", [30], eligible=False), make_dataset("e", "hourly", [30])])
        assert MixtureSampler(reg, 2, 8).probabilities == {"hourly": 1.0}

    def test_synthetic_only_override(self):
        sampler = MixtureSampler(four_group_registry(), 2, 8, weights={"synthetic": 1.0})
        rng = np.random.default_rng(0)
        assert {sampler.draw(rng).group for _ in range(500)} == {"synthetic"}

    def test_unknown_group(self):
        with pytest.raises(ContractError):
            MixtureSampler(four_group_registry(), 2, 8, weights={"yearly": 1.0})

    def test_empty(self):
        with pytest.raises(DataError):
            MixtureSampler(DatasetRegistry([]), 2, 8)

    def test_frequencies(self):
        sampler = MixtureSampler(four_group_registry(), 2, 8, seed=1)
        draws = [spec for _, spec in zip(range(20000), sampler)]
        groups = Counter(s.group for s in draws)
        kinds = Counter(s.kind for s in draws)
        assert abs(groups["synthetic"] / 20000 - 0.1) < 0.01
        assert abs(kinds[SERIES_LEVEL] / 20000 - 0.5) < 0.015

    def test_stream_deterministic(self):
        a = [s for _, s in zip(range(50), MixtureSampler(four_group_registry(), 3, 8, seed=4))]
        b = [s for _, s in zip(range(50), MixtureSampler(four_group_registry(), 3, 8, seed=4))]
        assert a == b


class TestIO:
    def test_csv(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1,10\n2,20\n3,30\n4,40\n5,50\n")
        series = load_series(path)
        assert [s.id for s in series] == ["a", "b"]
        assert [len(s) for s in series] == [5, 5]

    def test_csv_ragged_columns(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1,10\n2,\n3,\n")
        assert [len(s) for s in load_series(path)] == [3, 1]

    def test_csv_bad_cell(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1,2\nabc,3\n")
        with pytest.raises(DataError, match=r"row 3, column 'a'"):
            load_series(path)

    def test_csv_nan(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a\n1\nnan\n")
        with pytest.raises(DataError, match="non-finite"):
            load_series(path)

    def test_csv_gap(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a\n1\n\n3\n")
        with pytest.raises(DataError, match="gap"):
            load_series(path)

    def test_csv_duplicate_ids(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,a\n1,2\n")
        with pytest.raises(DataError, match="duplicate"):
            load_series(path)

    def test_jsonl(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id": "x", "granularity": "daily", "values": [1, 2, 3]}\n')
        (s,) = load_series(path)
        assert s.id == "x" and s.granularity == "daily" and len(s) == 3

    def test_jsonl_errors(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id": "x", "values": [1]}\n{"id": "x", "values": [2]}\n')
        with pytest.raises(DataError, match="duplicate"):
            load_series(path)
        path.write_text('{"id": "x", "values": [1, "abc"]}\n')
        with pytest.raises(DataError, match="line 1, value 1"):
            load_series(path)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(DataError):
            load_series(tmp_path / "d.parquet")

    def test_jsonl_round_trip(self, tmp_path):
        series = [TimeSeries("a", [0.1, 1e-300, -3.5], "weekly"), TimeSeries("b", [2.0], "weekly")]
        write_jsonl(series, tmp_path / "s.jsonl")
        back = load_series(tmp_path / "s.jsonl")
        assert [s.id for s in back] == ["a", "b"]
        assert np.array_equal(back[0].values, series[0].values)
        json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])

    def test_registry_manifest(self, tmp_path):
        (tmp_path / "e.csv").write_text("a,b\n1,2\n3,4\n")
        write_jsonl([TimeSeries("s", [1.0, 2.0])], tmp_path / "s.jsonl")
        (tmp_path / "m.ini").write_text(
            "[dataset:elec]\npath = e.csv\ngroup = hourly\n\n"
            "[dataset:wiki]\npath = s.jsonl\nformat = jsonl\ngroup = daily\neligible = false\n"
        )
        reg = load_registry(tmp_path / "m.ini")
        assert reg.names() == ["elec", "wiki"]
        assert reg["elec"].group == "hourly" and len(reg["elec"].series) == 2
        assert not reg["wiki"].eligible
        assert list(reg.by_group()) == ["hourly"]

    def test_registry_bad_group(self, tmp_path):
        (tmp_path / "e.csv").write_text("a\n1\n")
        (tmp_path / "m.ini").write_text("[dataset:e]\npath = e.csv\ngroup = yearly\n")
        with pytest.raises(DataError, match="yearly"):
            load_registry(tmp_path / "m.ini")

    def test_registry_duplicate_names(self):
        with pytest.raises(DataError):
            DatasetRegistry([make_dataset("a", "daily", [3]), make_dataset("a", "daily", [3])])
