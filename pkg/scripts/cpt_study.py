"""Run the desk-scale CPT study and print the directional checks.

    python scripts/cpt_study.py --out runs/study [--seed 0] [--no-trace]
"""
import argparse
import logging
import time

from moecpt.study import StudyConfig, run_study


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/study")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pretrain-steps", type=int, default=2000)
    ap.add_argument("--cpt-steps", type=int, default=2000)
    ap.add_argument("--no-trace", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = StudyConfig(seed=args.seed, pretrain_steps=args.pretrain_steps,
                      anneal_steps=args.pretrain_steps // 10, cpt_steps=args.cpt_steps,
                      cpt_horizon=4 * args.cpt_steps,
                      trace=not args.no_trace)
    t0 = time.perf_counter()
    res = run_study(cfg, args.out)
    print(res.to_json())
    print(f"wall time {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
