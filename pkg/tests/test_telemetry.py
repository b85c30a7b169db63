import csv

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskllm.telemetry import (
    DEFAULT_INTENSITY,
    Telemetry,
    TelemetryLog,
    checkpoint_report,
    emission_ratios,
    emissions_kg,
    energy_kwh,
    format_token_count,
    parse_token_count,
    render_report,
    with_intensity,
    write_report,
)


def fixture_rows(path):
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def report_cells(text):
    """Table body of a rendered report as lists of stripped cells."""
    body = text.splitlines()[2:]
    return [[c.strip() for c in line.split("|")] for line in body if "|" in line]


def test_energy_examples():
    assert energy_kwh(3600, 1000) == pytest.approx(1.0)
    assert energy_kwh(280 * 3600, 403.6) == pytest.approx(113.0, abs=0.05)
    assert energy_kwh(0, 500) == 0.0
    with pytest.raises(ValueError):
        energy_kwh(-1, 10)


def test_emissions_examples():
    assert emissions_kg(113.0) == pytest.approx(41.30, abs=0.01)
    assert emissions_kg(15.5, DEFAULT_INTENSITY) == pytest.approx(5.66, abs=0.05)
    assert emissions_kg(0.0) == 0.0
    with pytest.raises(ValueError):
        emissions_kg(1.0, -0.1)


@pytest.mark.parametrize("text,n", [("8.1M", 8_100_000), ("9.8B", 9_800_000_000), ("1,024", 1024), ("12K", 12_000)])
def test_token_count_parsing(text, n):
    assert parse_token_count(text) == n


def test_token_count_formatting():
    assert format_token_count(8_100_000) == "8.1M"
    assert format_token_count(9_830_400_000) == "9.8B"
    assert format_token_count(512) == "512"


def test_fake_clock_counters(fake_clock):
    tel = Telemetry(avg_power_w=1800.0, utilization=0.5, clock=fake_clock)
    tel.start()
    tel.add_tokens(100)
    tel.stop()  # one second
    row = tel.record(1, loss=2.0)
    assert row.elapsed_s == 1.0 and row.tokens == 100
    assert row.energy_kwh == pytest.approx(900 / 3.6e6)
    assert row.emissions_kg == pytest.approx(row.energy_kwh * DEFAULT_INTENSITY)
    tel.stop()  # not running, no change
    assert tel.elapsed_s == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10_000), st.just(0.0) | st.floats(1e-3, 100)), min_size=1, max_size=30))
def test_cumulative_values_monotone_and_ratio_exact(steps):
    t = {"now": 0.0}
    tel = Telemetry(avg_power_w=350.0, utilization=0.8, carbon_intensity=0.42, clock=lambda: t["now"])
    for i, (tokens, secs) in enumerate(steps):
        tel.start()
        t["now"] += secs
        tel.add_tokens(tokens)
        tel.stop()
        tel.record(i)
    rows = tel.log.rows
    for a, b in zip(rows, rows[1:]):
        assert b.tokens >= a.tokens and b.energy_kwh >= a.energy_kwh and b.emissions_kg >= a.emissions_kg
    for r in emission_ratios(tel.log):
        assert r == pytest.approx(0.42, rel=1e-12)


def test_csv_round_trip(fake_clock):
    tel = Telemetry(avg_power_w=250.0, region="Test Grid", clock=fake_clock)
    for step in range(1, 4):
        tel.start()
        tel.add_tokens(64)
        tel.stop()
        tel.record(step, loss=1.0 / step, perplexity=None if step < 3 else 1.5)
    text = tel.log.to_csv()
    back = TelemetryLog.from_csv(text)
    assert back == tel.log
    assert back.to_csv() == text
    header = text.splitlines()[1]
    for col in ("Processed Tokens", "Perplexity", "Energy Consumption (kWh)", "Emissions (KgCO2eq)"):
        assert col in header


def test_fixture_rows_verbatim_in_report(fixtures_dir):
    path = fixtures_dir / "ttl460m_energy_log.csv"
    expected = fixture_rows(path)
    cells = report_cells(render_report(TelemetryLog.load(path)))
    assert len(cells) == len(expected) == 12
    for rec, got in zip(expected, cells):
        assert got[:4] == [
            rec["Processed Tokens"],
            rec["Perplexity"],
            rec["Energy Consumption (kWh)"],
            rec["Emissions (KgCO2eq)"],
        ]


def test_fixture_ratio_nearly_constant(fixtures_dir):
    # fixture values carry two decimals, so the ratio is only approximately constant
    ratios = emission_ratios(TelemetryLog.load(fixtures_dir / "ttl460m_energy_log.csv"))
    assert max(ratios) / min(ratios) - 1 < 0.01


def test_fixture_marginal_gains(fixtures_dir):
    report = checkpoint_report(TelemetryLog.load(fixtures_dir / "ttl460m_energy_log.csv"))
    assert report[0].marginal_ppl_per_kwh is None
    first, last = report[1], report[-1]
    assert (first.delta_ppl, first.delta_kwh) == (pytest.approx(20.49 - 16.90), pytest.approx(18.82 - 9.40))
    assert (last.delta_ppl, last.delta_kwh) == (pytest.approx(0.19), pytest.approx(9.63))
    assert last.marginal_ppl_per_kwh == pytest.approx(0.19 / 9.63)
    gains = [r.marginal_ppl_per_kwh for r in report[1:]]
    assert gains[0] == max(gains) and gains[-1] == min(gains)


def test_report_without_perplexity_falls_back_to_all_rows(fake_clock):
    tel = Telemetry(clock=fake_clock)
    tel.record(1)
    tel.record(2)
    report = checkpoint_report(tel.log)
    assert len(report) == 2 and all(r.marginal_ppl_per_kwh is None for r in report)
    with pytest.raises(ValueError):
        checkpoint_report(TelemetryLog())


def test_with_intensity_rescales(fixtures_dir):
    log = TelemetryLog.load(fixtures_dir / "ttl460m_energy_log.csv")
    other = with_intensity(log, 0.1)
    assert other.rows[-1].emissions_kg == pytest.approx(11.569)
    assert [r.energy_kwh for r in other.rows] == [r.energy_kwh for r in log.rows]


def test_state_dict_round_trip(fake_clock):
    tel = Telemetry(clock=fake_clock)
    tel.start()
    tel.add_tokens(10)
    tel.stop()
    tel.record(1, loss=0.5)
    other = Telemetry()
    other.load_state_dict(tel.state_dict())
    assert other.state_dict() == tel.state_dict()
    assert other.log == tel.log


def test_write_report_files(tmp_path, fixtures_dir):
    log = TelemetryLog.load(fixtures_dir / "ttl460m_energy_log.csv")
    written = write_report(log, tmp_path / "out")
    assert sorted(p.name for p in written) == ["energy.svg", "loss.svg", "perplexity.svg", "report.txt", "telemetry.csv"]
    assert (tmp_path / "out" / "perplexity.svg").read_text().startswith("<svg")
    assert "<polyline" in (tmp_path / "out" / "energy.svg").read_text()
    assert TelemetryLog.load(tmp_path / "out" / "telemetry.csv").rows == log.rows
