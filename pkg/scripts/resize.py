"""Surge on a single-stage encoder; compare the resize window with and without preloading."""
import argparse

from slopipe.scenarios import ResizeConfig, resize_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for preload in (False, True):
        r = resize_run(preload, ResizeConfig(seed=args.seed))
        print(f"preload={preload!s:5}  steady p95 {r.steady_p95_us / 1000:8.1f} ms  "
              f"window p95 {r.window_p95_us / 1000:8.1f} ms  ratio {r.ratio:6.2f}  "
              f"lost {r.lost}  cold starts {r.cold_starts}")
        for t, *action in r.actions:
            print(f"    t={t / 1e6:7.2f}s  {' '.join(map(str, action))}")


if __name__ == "__main__":
    main()
