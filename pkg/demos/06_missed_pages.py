"""Missed dirty pages under allocation churn, by working-set size.

The churn workload dirties a working set and then retires a fixed number of
recently-written pages.  Frame-logging (spml) cannot resolve entries whose
pages are gone, so the smaller the working set, the larger the share of the
dirty set it misses.  Virtual-address logging (epml) misses nothing.
"""

from __future__ import annotations

from oohsim.checkpoint import missed_pages_experiment


def main() -> None:
    spml = missed_pages_experiment()
    epml = missed_pages_experiment(technique="epml")
    print(f"{'working set':>12} {'spml missed':>12} {'proportion':>11} {'epml':>6}")
    for s, e in zip(spml, epml):
        print(
            f"{s.working_set_pages:>12} {s.missed:>12} {s.proportion:>10.1%} "
            f"{e.missed:>6}"
        )
        assert e.missed == 0
    props = [p.proportion for p in spml]
    assert all(a >= b for a, b in zip(props, props[1:]))
    span = props[0] / props[-1]
    print(f"proportion falls monotonically, {span:.0f}x smallest-to-largest span")


if __name__ == "__main__":
    main()
