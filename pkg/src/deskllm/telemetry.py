"""Energy and emissions accounting for training runs.

Power is modelled as a configured average draw times a utilisation factor,
so energy is a pure function of elapsed time. The clock is injectable.
"""

from __future__ import annotations

import csv
import io
import math
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

# kgCO2eq per kWh; 41.3 kg over 113.0 kWh for the North Rhine-Westphalia grid
DEFAULT_INTENSITY = 0.3655
DEFAULT_REGION = "North Rhine-Westphalia"

CSV_COLUMNS = [
    "step",
    "Processed Tokens",
    "loss",
    "Perplexity",
    "elapsed_s",
    "Energy Consumption (kWh)",
    "Emissions (KgCO2eq)",
]


def energy_kwh(elapsed_s: float, avg_power_w: float) -> float:
    if elapsed_s < 0 or avg_power_w < 0:
        raise ValueError("elapsed time and power must be non-negative")
    return avg_power_w * elapsed_s / 3.6e6


def emissions_kg(energy: float, intensity: float = DEFAULT_INTENSITY) -> float:
    if energy < 0 or intensity < 0:
        raise ValueError("energy and intensity must be non-negative")
    return energy * intensity


@dataclass(frozen=True)
class TelemetryRow:
    step: int | None
    tokens: int
    loss: float | None
    perplexity: float | None
    elapsed_s: float | None
    energy_kwh: float
    emissions_kg: float


@dataclass
class TelemetryLog:
    rows: list[TelemetryRow] = field(default_factory=list)
    avg_power_w: float = 400.0
    utilization: float = 1.0
    carbon_intensity: float = DEFAULT_INTENSITY
    region: str = DEFAULT_REGION

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(
            f"# avg_power_w={self.avg_power_w!r} utilization={self.utilization!r} "
            f"carbon_intensity={self.carbon_intensity!r} region={self.region}\n"
        )
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    _fmt(r.step),
                    r.tokens,
                    _fmt(r.loss),
                    _fmt(r.perplexity),
                    _fmt(r.elapsed_s),
                    repr(r.energy_kwh),
                    repr(r.emissions_kg),
                ]
            )
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TelemetryLog":
        """Parse :meth:`to_csv` output, or a table with the same headers.

        Token counts may be written like ``8.1M`` / ``9.8B``; missing columns
        and blank cells read as None.
        """
        log = cls()
        body = []
        for line in text.splitlines():
            if line.startswith("#"):
                for part in line[1:].split():
                    key, _, val = part.partition("=")
                    if key in ("avg_power_w", "utilization", "carbon_intensity"):
                        setattr(log, key, float(val))
                if "region=" in line:
                    log.region = line.split("region=", 1)[1].strip()
            elif line.strip():
                body.append(line)
        for rec in csv.DictReader(body):
            log.rows.append(
                TelemetryRow(
                    step=_opt(rec.get("step"), int),
                    tokens=parse_token_count(rec["Processed Tokens"]),
                    loss=_opt(rec.get("loss"), float),
                    perplexity=_opt(rec.get("Perplexity"), float),
                    elapsed_s=_opt(rec.get("elapsed_s"), float),
                    energy_kwh=float(rec["Energy Consumption (kWh)"]),
                    emissions_kg=float(rec["Emissions (KgCO2eq)"]),
                )
            )
        return log

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TelemetryLog":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _opt(v, conv):
    if v is None or v.strip() == "":
        return None
    return conv(v)


_SUFFIX = {"K": 1e3, "M": 1e6, "B": 1e9, "T": 1e12}


def parse_token_count(text: str) -> int:
    text = text.strip().replace(",", "")
    if text and text[-1].upper() in _SUFFIX:
        return int(round(float(text[:-1]) * _SUFFIX[text[-1].upper()]))
    return int(text)


def format_token_count(n: int) -> str:
    for suffix, scale in (("T", 1e12), ("B", 1e9), ("M", 1e6), ("K", 1e3)):
        if n >= scale:
            return f"{n / scale:.1f}{suffix}"
    return str(n)


class Telemetry:
    """Running counters for a training run.

    ``clock`` returns seconds; tests pass a fake one. Counters are guarded by
    a lock so a loader thread can add tokens safely.
    """

    def __init__(
        self,
        avg_power_w: float = 400.0,
        utilization: float = 1.0,
        carbon_intensity: float = DEFAULT_INTENSITY,
        region: str = DEFAULT_REGION,
        clock: Callable[[], float] = time.perf_counter,
    ):
        self.log = TelemetryLog([], avg_power_w, utilization, carbon_intensity, region)
        self.clock = clock
        self.tokens = 0
        self.elapsed_s = 0.0
        self._lock = threading.Lock()
        self._t0: float | None = None

    @property
    def effective_power_w(self) -> float:
        return self.log.avg_power_w * self.log.utilization

    @property
    def energy_kwh(self) -> float:
        return energy_kwh(self.elapsed_s, self.effective_power_w)

    @property
    def emissions_kg(self) -> float:
        return emissions_kg(self.energy_kwh, self.log.carbon_intensity)

    def start(self) -> None:
        self._t0 = self.clock()

    def stop(self) -> None:
        if self._t0 is None:
            return
        t1 = self.clock()
        with self._lock:
            self.elapsed_s += t1 - self._t0
        self._t0 = None

    def add_tokens(self, n: int) -> None:
        with self._lock:
            self.tokens += int(n)

    def record(self, step: int, loss: float | None = None, perplexity: float | None = None) -> TelemetryRow:
        with self._lock:
            row = TelemetryRow(
                step, self.tokens, loss, perplexity, self.elapsed_s, self.energy_kwh, self.emissions_kg
            )
            self.log.rows.append(row)
        return row

    def state_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "elapsed_s": self.elapsed_s,
            "avg_power_w": self.log.avg_power_w,
            "utilization": self.log.utilization,
            "carbon_intensity": self.log.carbon_intensity,
            "region": self.log.region,
            "rows": [list(_row_tuple(r)) for r in self.log.rows],
        }

    def load_state_dict(self, state: dict) -> None:
        self.tokens = int(state["tokens"])
        self.elapsed_s = float(state["elapsed_s"])
        self.log = TelemetryLog(
            [TelemetryRow(*r) for r in state["rows"]],
            state["avg_power_w"],
            state["utilization"],
            state["carbon_intensity"],
            state["region"],
        )


def _row_tuple(r: TelemetryRow):
    return (r.step, r.tokens, r.loss, r.perplexity, r.elapsed_s, r.energy_kwh, r.emissions_kg)


# -- reporting ------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    row: TelemetryRow
    marginal_ppl_per_kwh: float | None
    delta_ppl: float | None
    delta_kwh: float | None


def checkpoint_report(log: TelemetryLog) -> list[ReportRow]:
    """Rows that carry a perplexity, each with the perplexity gained per kWh since the previous one."""
    if not log.rows:
        raise ValueError("telemetry log is empty")
    evals = [r for r in log.rows if r.perplexity is not None] or list(log.rows)
    out, prev = [], None
    for r in evals:
        if prev is None or prev.perplexity is None or r.perplexity is None:
            out.append(ReportRow(r, None, None, None))
        else:
            d_ppl = round(prev.perplexity - r.perplexity, 10)
            d_kwh = round(r.energy_kwh - prev.energy_kwh, 10)
            out.append(ReportRow(r, d_ppl / d_kwh if d_kwh > 0 else None, d_ppl, d_kwh))
        prev = r
    return out


def emission_ratios(log: TelemetryLog) -> list[float]:
    """Emissions per kWh for every row with nonzero energy."""
    return [r.emissions_kg / r.energy_kwh for r in log.rows if r.energy_kwh > 0]


def render_report(log: TelemetryLog) -> str:
    rows = checkpoint_report(log)
    header = (
        f"{'Processed Tokens':>16} | {'Perplexity':>10} | {'Energy Consumption (kWh)':>24} | "
        f"{'Emissions (KgCO2eq)':>19} | {'dPPL':>6} | {'dkWh':>7} | {'dPPL/kWh':>9}"
    )
    lines = [header, "-" * len(header)]
    for rr in rows:
        r = rr.row
        ppl = "" if r.perplexity is None else f"{r.perplexity:.2f}"
        d_ppl = "" if rr.delta_ppl is None else f"{rr.delta_ppl:.2f}"
        d_kwh = "" if rr.delta_kwh is None else f"{rr.delta_kwh:.2f}"
        gain = "" if rr.marginal_ppl_per_kwh is None else f"{rr.marginal_ppl_per_kwh:.4f}"
        lines.append(
            f"{format_token_count(r.tokens):>16} | {ppl:>10} | {r.energy_kwh:>24.2f} | "
            f"{r.emissions_kg:>19.2f} | {d_ppl:>6} | {d_kwh:>7} | {gain:>9}"
        )
    ratios = emission_ratios(log)
    if ratios:
        lines.append(f"emissions per kWh {min(ratios):.4f} to {max(ratios):.4f} kgCO2eq")
    lines.append(
        f"carbon intensity {log.carbon_intensity} kgCO2eq/kWh ({log.region}); "
        f"average draw {log.avg_power_w:g} W x utilization {log.utilization:g}"
    )
    return "\n".join(lines) + "\n"


def svg_line_chart(xs, ys, title: str, x_label: str, y_label: str, width: int = 480, height: int = 300) -> str:
    """A bare-bones SVG polyline chart; no plotting dependency needed."""
    pts = [(float(x), float(y)) for x, y in zip(xs, ys) if y is not None and math.isfinite(float(y))]
    pad = 48
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="11">{x_label}</text>',
        f'<text x="12" y="{height / 2}" font-size="11" transform="rotate(-90 12 {height / 2})" '
        f'text-anchor="middle">{y_label}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad / 2}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad / 2}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
        sx = (width - 1.5 * pad) / ((x1 - x0) or 1.0)
        sy = (height - 1.5 * pad) / ((y1 - y0) or 1.0)
        coords = " ".join(f"{pad + (x - x0) * sx:.1f},{height - pad - (y - y0) * sy:.1f}" for x, y in pts)
        lines.append(f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{coords}"/>')
        lines.append(f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="9">{y0:.3g}</text>')
        lines.append(f'<text x="{pad - 4}" y="{pad / 2 + 8}" text-anchor="end" font-size="9">{y1:.3g}</text>')
        lines.append(f'<text x="{pad}" y="{height - pad + 12}" font-size="9">{x0:.3g}</text>')
        lines.append(
            f'<text x="{width - pad / 2}" y="{height - pad + 12}" text-anchor="end" font-size="9">{x1:.3g}</text>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_report(log: TelemetryLog, out_dir: str | Path) -> list[Path]:
    """Write report.txt, telemetry.csv and loss/perplexity/energy SVG charts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, content in (("report.txt", render_report(log)), ("telemetry.csv", log.to_csv())):
        (out_dir / name).write_text(content, encoding="utf-8")
        written.append(out_dir / name)
    toks = [r.tokens for r in log.rows]
    charts = {
        "loss.svg": ("training loss", "loss", [r.loss for r in log.rows]),
        "perplexity.svg": ("eval perplexity", "perplexity", [r.perplexity for r in log.rows]),
        "energy.svg": ("cumulative energy", "kWh", [r.energy_kwh for r in log.rows]),
    }
    for fname, (title, ylab, ys) in charts.items():
        (out_dir / fname).write_text(svg_line_chart(toks, ys, title, "processed tokens", ylab), encoding="utf-8")
        written.append(out_dir / fname)
    return written


def with_intensity(log: TelemetryLog, intensity: float) -> TelemetryLog:
    """Recompute emissions for a different grid."""
    rows = [replace(r, emissions_kg=emissions_kg(r.energy_kwh, intensity)) for r in log.rows]
    return TelemetryLog(rows, log.avg_power_w, log.utilization, intensity, log.region)
