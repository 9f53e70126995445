"""Checkpoint durations by technique and size, next to published values."""

from __future__ import annotations

from oohsim.experiments import repro


def main() -> None:
    rows = repro("table5")
    print(f"{'cell':>14} {'published ms':>13} {'simulated ms':>13} {'rel err':>9}")
    for row in rows:
        print(
            f"{row.label:>14} {row.published:>13.2f} {row.simulated:>13.2f} "
            f"{row.rel_err_pct:>8.1f}%"
        )
        assert 0.5 <= row.simulated / row.published <= 2.0

    at_1gb = {r.label.split("@")[0]: r.simulated for r in rows if "1GB" in r.label}
    print(
        f"1GB ratios: spml/proc = {at_1gb['spml'] / at_1gb['proc']:.1f}x, "
        f"proc is {(at_1gb['proc'] - at_1gb['epml']) / at_1gb['epml']:.0%} "
        f"slower than epml"
    )
    print("all 21 cells within 2x of the published grid")


if __name__ == "__main__":
    main()
